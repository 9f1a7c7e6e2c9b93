"""Disjoint sets whose representative is always the smallest member."""


class MinUnionFind:
    """Union-find keyed on comparable items; ``find`` returns the set minimum.

    Member lists are kept per root so callers can refresh per-record fields
    (alias or current ID) for exactly the records whose representative moved.

    >>> uf = MinUnionFind([2, 3, 5])
    >>> uf.union(3, 5)
    [5]
    >>> sorted(uf.union(5, 2))
    [3, 5]
    >>> uf.find(5), sorted(uf.members(3))
    (2, [2, 3, 5])
    """

    def __init__(self, items=()):
        self.parent = {}
        self._members = {}
        for x in items:
            self.add(x)

    def add(self, x):
        if x not in self.parent:
            self.parent[x] = x
            self._members[x] = [x]

    def __contains__(self, x):
        return x in self.parent

    def __len__(self):
        return len(self.parent)

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        # path compression
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        """Merge the sets of ``a`` and ``b``; returns the members whose root changed."""
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return []
        lo, hi = (ra, rb) if ra < rb else (rb, ra)
        self.parent[hi] = lo
        moved = self._members.pop(hi)
        self._members[lo].extend(moved)
        return moved

    def members(self, x):
        return list(self._members[self.find(x)])

    def roots(self):
        return [x for x, p in self.parent.items() if x == p]
