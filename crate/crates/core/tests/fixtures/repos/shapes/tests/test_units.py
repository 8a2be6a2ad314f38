import pytest

from shapes.units import convert


@pytest.mark.parametrize("value, src, dst, expected", [(1, "m", "cm", 100.0), (250, "mm", "m", 0.25)])
def test_convert(value, src, dst, expected):
    assert convert(value, src, dst) == pytest.approx(expected)


def test_convert_unknown():
    with pytest.raises(ValueError, match="unknown unit"):
        convert(1, "km", "m")


def test_convert_identity():
    assert convert(5, "cm", "cm") == pytest.approx(5)
