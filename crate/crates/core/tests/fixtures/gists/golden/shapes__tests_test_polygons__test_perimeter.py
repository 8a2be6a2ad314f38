import pytest

PRECISION = 3


def rounded(value):
    return round(value, PRECISION)


class Shape:
    name = "shape"


class Rectangle(Shape):
    name = "rectangle"

    def __init__(self, width, height):
        self.width = width
        self.height = height

    def perimeter(self):
        return rounded(2 * (self.width + self.height))


@pytest.mark.parametrize("w, h, expected", [(1, 1, 4), (2.5, 1, 7.0)])
def test_perimeter(w, h, expected):
    assert Rectangle(w, h).perimeter() == expected
