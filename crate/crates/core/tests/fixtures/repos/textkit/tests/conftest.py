import pytest


@pytest.fixture
def sample_words():
    return ["alpha", "beta", "gamma"]
