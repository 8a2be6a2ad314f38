import math


def add(a, b):
    return a + b


def mul(a, b):
    result = 0
    for _ in range(abs(b)):
        result = add(result, a)
    return result


def hypot(a, b):
    return math.sqrt(add(mul(a, a), mul(b, b)))


def test_hypot():
    assert hypot(3, 4) == 5.0
