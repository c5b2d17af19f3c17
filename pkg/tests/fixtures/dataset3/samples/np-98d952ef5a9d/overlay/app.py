import pricing
from models import Inventory, Item
from pricing import line_price, split_price


def build():
    inv = Inventory()
    inv.add(Item("pen", 1.5, 4))
    inv.add(pricing.bulk_item("clip", 0.1), 2)
    return inv


def checkout(inv, kind):
    total = 0.0
    for item in inv.items:
        total += line_price(item, kind)
    whole, cents = split_price(total)
    return "%d.%02d" % (whole, cents)


def report(inv):
    rows = [i.label() for i in inv.items]
    price = pricing.with_tax(inv.value())
    rows.append("total %s" % price)
    return "\n".join(rows)


def main():
    inv = build()
    print(checkout(inv, "member"))
    print(report(inv))
