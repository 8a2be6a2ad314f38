from shapes.base import Shape, rounded


class Rectangle(Shape):
    name = "rectangle"

    def __init__(self, width, height):
        self.width = width
        self.height = height

    def area(self):
        return self.width * self.height

    def perimeter(self):
        return rounded(2 * (self.width + self.height))


class Square(Rectangle):
    name = "square"

    def __init__(self, side):
        super().__init__(side, side)


class Triangle(Shape):
    name = "triangle"

    def __init__(self, base, height):
        self.base = base
        self.height = height

    def area(self):
        return 0.5 * self.base * self.height
