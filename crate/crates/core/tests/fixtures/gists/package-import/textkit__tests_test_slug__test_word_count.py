import pytest

from textkit.slug import word_count


@pytest.fixture
def sample_words():
    return ["alpha", "beta", "gamma"]


def test_word_count(sample_words):
    assert word_count(" ".join(sample_words)) == 3
