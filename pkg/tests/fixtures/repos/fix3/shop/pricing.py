TAX_RATE = 0.2


def price_of(sku, table):
    return table[sku]


def taxed(amount):
    return amount * (1 + TAX_RATE)
