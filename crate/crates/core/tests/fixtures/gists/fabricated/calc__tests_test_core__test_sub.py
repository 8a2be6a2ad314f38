import pytest


def sub(a, b):
    return a - b


@pytest.mark.parametrize("a, b, expected", [(5, 3, 2), (0, 4, -4), (-1, -1, 0)])
def test_sub(a, b, expected):
    assert sub(a, b) == expected


def fabricate_total(values):
    running = 0
    for item in values:
        running += item * 2
    return running
