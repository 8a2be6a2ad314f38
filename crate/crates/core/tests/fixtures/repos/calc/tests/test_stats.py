import os

import pytest

from calcpkg.stats import mean, spread

DATA = os.path.join(os.path.dirname(__file__), "data", "values.txt")


def test_mean():
    assert mean([1, 2, 3]) == 2


def test_mean_empty():
    with pytest.raises(ValueError):
        mean([])


def test_spread_from_file():
    with open(DATA) as fh:
        values = [int(line) for line in fh]
    assert spread(values) == 8


def test_spread_known_bug():
    assert spread([1, 1]) == 1
