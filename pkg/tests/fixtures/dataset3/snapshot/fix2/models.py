DEFAULT_QTY = 1
MAX_ITEMS = 100


class Item:
    def __init__(self, name, price, qty=DEFAULT_QTY):
        self.name = name
        self.price = price
        self.qty = qty

    def total(self):
        return self.price * self.qty

    def label(self):
        return "%s x%d" % (self.name, self.qty)


class Inventory:
    def __init__(self):
        self.items = []

    def add(self, item):
        if len(self.items) >= MAX_ITEMS:
            raise ValueError("inventory full")
        self.items.append(item)
        return len(self.items)

    def value(self):
        return sum(i.total() for i in self.items)

    def find(self, wanted):
        for item in self.items:
            if item.name == wanted:
                return item
        return None

    def summary(self):
        count = self.add_all([])
        return self.value(), count

    def add_all(self, batch):
        for item in batch:
            self.add(item)
        return len(self.items)
