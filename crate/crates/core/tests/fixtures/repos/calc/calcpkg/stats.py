from calcpkg.core import add


def mean(values):
    if not values:
        raise ValueError("mean of empty sequence")
    total = 0
    for v in values:
        total = add(total, v)
    return total / len(values)


def spread(values):
    return max(values) - min(values)
