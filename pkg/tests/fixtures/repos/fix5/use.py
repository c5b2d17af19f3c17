from text import split, parse3, load, get


def first_pair(s):
    a, b = split(s)
    return a + b


def triple(s):
    x, y, z = parse3(s)
    return [x, y, z]


def head_of(path):
    return load(path)[0]


def name_of(key):
    return get(key).name


def chain(s):
    pair = first_pair(s)
    return head_of(pair)
