from utils import power


def describe(x):
    return "square of %s" % x


def square(x):
    y = power(x, 2)
    return y
