from models import Item, DEFAULT_QTY

TAX = 0.2
DISCOUNTS = {"bulk": 0.1, "member": 0.05}


def with_tax(amount, rate=TAX):
    return round(amount * (1 + rate), 2)


def discount(amount, kind):
    rate = DISCOUNTS.get(kind, 0.0)
    return amount * (1 - rate)


def line_price(item, kind):
    base = item.total()
    return with_tax(discount(base, kind))


def bulk_item(label, unit):
    return Item(label, unit, DEFAULT_QTY * 10)


def split_price(amount):
    whole = int(amount)
    cents = round((amount - whole) * 100)
    return whole, cents
