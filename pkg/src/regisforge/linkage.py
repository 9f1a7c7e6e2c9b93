"""One-to-one linkage relations between two sources, and path composition.

A relation only ever connects two sources.  Longer integrations are built
by stepping through relations in a given order, which is a plain relational
join on the shared source's keys.  Each step can only drop rows.
"""

import csv
import io
import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from functools import cached_property
from fractions import Fraction

from . import idforge
from .errors import NonChainablePath, ThresholdOutOfRange, UnknownField
from .timeline import TimelineDB
from .util import is_missing

REGISTER = "REGISTER"

_WS = re.compile(r"\s+")


def standardize(value):
    """Case-fold and collapse whitespace."""
    return _WS.sub(" ", str(value)).strip().casefold()


def edit_distance(a, b):
    """Levenshtein distance (unit-cost insert/delete/substitute)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def string_similarity(a, b):
    """``1 - edit_distance / max_length`` as an exact fraction."""
    a, b = standardize(a), standardize(b)
    longest = max(len(a), len(b))
    if longest == 0:
        return Fraction(1)
    return 1 - Fraction(edit_distance(a, b), longest)


def numeric_similarity(a, b, scale):
    diff = abs(Fraction(str(a)) - Fraction(str(b)))
    return max(Fraction(0), 1 - diff / Fraction(str(scale)))


@dataclass(frozen=True)
class LinkageRelation:
    left_source: str
    right_source: str
    pairs: tuple
    method: dict = field(default_factory=dict, compare=False)
    excluded: dict = field(default_factory=dict, compare=False)
    scores: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        lefts = [l for l, _ in self.pairs]
        rights = [r for _, r in self.pairs]
        if len(set(lefts)) != len(lefts) or len(set(rights)) != len(rights):
            raise ValueError("linkage relation is not one-to-one")

    def __len__(self):
        return len(self.pairs)

    @property
    def exact(self):
        return self.method.get("kind") in ("exact", "admin-key")

    def flipped(self):
        return LinkageRelation(self.right_source, self.left_source,
                               tuple(sorted((r, l) for l, r in self.pairs)),
                               self.method, self.excluded,
                               {(r, l): s for (l, r), s in self.scores.items()})

    def left_to_right(self):
        return dict(self.pairs)

    def descriptor(self):
        return {"left_source": self.left_source, "right_source": self.right_source,
                "method": self.method, "pairs": len(self.pairs),
                "excluded": {k: len(v) for k, v in sorted(self.excluded.items())}}

    def to_tsv(self):
        """Header block of ``# key: json`` lines, then a two-column pair table."""
        buf = io.StringIO()
        for key, value in (("left_source", self.left_source), ("right_source", self.right_source),
                           ("method", self.method), ("excluded", self.excluded)):
            buf.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["left_key", "right_key"])
        w.writerows(self.pairs)
        return buf.getvalue()

    @classmethod
    def from_tsv(cls, text):
        header, body = {}, []
        for line in text.splitlines():
            if line.startswith("# "):
                key, _, value = line[2:].partition(": ")
                header[key] = json.loads(value)
            else:
                body.append(line)
        rows = list(csv.reader(body, delimiter="\t"))[1:]
        return cls(header["left_source"], header["right_source"],
                   tuple(tuple(r) for r in rows), header.get("method", {}),
                   header.get("excluded", {}))


def _profiles(side):
    if isinstance(side, TimelineDB):
        return side.source, side.profiles()
    source, table = side
    return source, table


def _check_fields(source, table, names):
    if not table or all(n == "entity_key" for n in names):
        return
    known = set()
    for prof in table.values():
        known.update(prof)
    known.add("entity_key")
    unknown = [n for n in names if n not in known]
    if unknown:
        raise UnknownField(f"{source}: unknown field(s) {unknown}")


def _value(key, prof, name):
    return key if name == "entity_key" else prof.get(name)


def build_exact_linkage(left, right, key_map):
    """Pair entities whose mapped key values are equal.

    ``left``/``right`` are ``TimelineDB`` objects or ``(source, profiles)``
    tuples where profiles is ``{entity_key: {field: value}}``.  ``key_map`` is
    ``(left_field, right_field)``; ``"entity_key"`` means the source's own key.
    A key value carried by more than one entity on either side is dropped
    from both sides and listed under ``excluded``.
    """
    lsrc, ltab = _profiles(left)
    rsrc, rtab = _profiles(right)
    lfield, rfield = key_map
    _check_fields(lsrc, ltab, [lfield])
    _check_fields(rsrc, rtab, [rfield])

    def index(table, name):
        """``(value -> key, collided values -> keys)``; blank values are skipped."""
        if name == "entity_key":
            items = list(zip(map(str.strip, map(str, table)), table))
        else:
            items = []
            for key, prof in table.items():
                v = prof.get(name)
                if v is not None:
                    items.append((str(v).strip(), key))
        first = dict(items)
        if "" in first:
            items = [(v, k) for v, k in items if v]
            del first[""]
        coll = defaultdict(list)
        if len(first) != len(items):
            counts = Counter(v for v, _ in items)
            for v, k in items:
                if counts[v] > 1:
                    coll[v].append(k)
        return first, coll

    (lidx, lcoll), (ridx, rcoll) = index(ltab, lfield), index(rtab, rfield)
    pairs = [(lidx[v], ridx[v]) for v in lidx.keys() & ridx.keys()
             if v not in lcoll and v not in rcoll]
    excluded = {}
    if lcoll:
        excluded["left_collisions"] = sorted(k for ks in lcoll.values() for k in ks)
    if rcoll:
        excluded["right_collisions"] = sorted(k for ks in rcoll.values() for k in ks)
    method = {"kind": "exact", "left_field": lfield, "right_field": rfield}
    return LinkageRelation(lsrc, rsrc, tuple(sorted(pairs)), method, excluded)


def _comparator(spec):
    if isinstance(spec, str):
        return spec, lambda a, b: string_similarity(a, b)
    kind = spec.get("kind", "string")
    name = spec["field"]
    if kind == "numeric":
        scale = spec.get("scale", 1)
        return name, lambda a, b: numeric_similarity(a, b, scale)
    return name, lambda a, b: string_similarity(a, b)


def build_blocked_linkage(left, right, blocking_fields, compare_fields, threshold):
    """Deterministic blocked-similarity linkage.

    Candidate pairs agree exactly (after standardisation) on every blocking
    field.  A pair's similarity is the mean per-field similarity over
    ``compare_fields``; a missing value scores 0.  String fields use
    normalised edit similarity; ``{"field": f, "kind": "numeric", "scale": s}``
    scores ``max(0, 1 - |a - b| / s)``.  Pairs at or above ``threshold`` are
    accepted greedily by descending similarity, ties broken by the
    lexicographic key pair, each key used at most once.
    """
    if not 0 < threshold <= 1:
        raise ThresholdOutOfRange(f"threshold must be in (0, 1], got {threshold}")
    if not compare_fields:
        raise UnknownField("at least one compare field is required")
    lsrc, ltab = _profiles(left)
    rsrc, rtab = _profiles(right)
    comps = [_comparator(c) for c in compare_fields]
    names = list(blocking_fields) + [n for n, _ in comps]
    _check_fields(lsrc, ltab, names)
    _check_fields(rsrc, rtab, names)
    cut = Fraction(str(threshold))

    def block_index(table):
        blocks = defaultdict(list)
        for key, prof in table.items():
            vals = [_value(key, prof, b) for b in blocking_fields]
            if any(is_missing(v) for v in vals):
                continue
            blocks[tuple(standardize(v) for v in vals)].append(key)
        return blocks

    lblocks, rblocks = block_index(ltab), block_index(rtab)
    candidates = []
    for bkey in sorted(lblocks.keys() & rblocks.keys()):
        for lk in lblocks[bkey]:
            lp = ltab[lk]
            for rk in rblocks[bkey]:
                rp = rtab[rk]
                total = Fraction(0)
                for name, fn in comps:
                    a, b = _value(lk, lp, name), _value(rk, rp, name)
                    if not (is_missing(a) or is_missing(b)):
                        total += fn(a, b)
                sim = total / len(comps)
                if sim >= cut:
                    candidates.append((-sim, lk, rk))
    candidates.sort()
    used_l, used_r, pairs, scores = set(), set(), [], {}
    for neg, lk, rk in candidates:
        if lk in used_l or rk in used_r:
            continue
        used_l.add(lk)
        used_r.add(rk)
        pairs.append((lk, rk))
        scores[(lk, rk)] = float(-neg)
    method = {
        "kind": "blocked-similarity",
        "threshold": threshold,
        "blocking_fields": list(blocking_fields),
        "compare_fields": [c if isinstance(c, str) else dict(c) for c in compare_fields],
    }
    # keys that cleared the threshold but lost the one-to-one assignment
    excluded = {}
    lost_l = sorted({lk for _, lk, _ in candidates} - used_l)
    lost_r = sorted({rk for _, _, rk in candidates} - used_r)
    if lost_l:
        excluded["left_unassigned"] = lost_l
    if lost_r:
        excluded["right_unassigned"] = lost_r
    return LinkageRelation(lsrc, rsrc, tuple(sorted(pairs)), method, excluded, scores)


def admin_key_linkage(admin_register, entity_register):
    """Relation from a core source's keys to register current IDs.

    Keys resolve through their alias to the representative record and then
    to its ``current_id``.  When several keys land on one entity, the key
    with the smallest SVID keeps the pair; the rest are listed as collapsed.
    """
    by_entity = {}
    for rec in admin_register:
        rep = rec.alias_id
        if rep not in entity_register.records:
            continue
        cur = entity_register.resolve_current_id(rep)
        by_entity.setdefault(cur, []).append((rec.svid, rec.source_key))
    pairs, collapsed = [], []
    for cur, keys in by_entity.items():
        keys.sort()
        pairs.append((keys[0][1], idforge.render_svid(cur)))
        collapsed.extend(k for _, k in keys[1:])
    excluded = {"collapsed_duplicates": sorted(collapsed)} if collapsed else {}
    return LinkageRelation(admin_register.source, REGISTER, tuple(sorted(pairs)),
                           {"kind": "admin-key"}, excluded)


def register_profiles(entity_register, fields=None):
    """Unique-view entities as ``{rendered current_id: {field: value}}``."""
    out = {}
    for rec in entity_register.unique_view():
        names = fields if fields is not None else sorted(rec.attrs)
        prof = {"entity_key": idforge.render_svid(rec.birth_svid)}
        for n in names:
            prof[n] = entity_register.attribute(rec.birth_svid, n)
        out[prof["entity_key"]] = prof
    return out


@dataclass(frozen=True)
class IntegratedDataset:
    """Rows of entity keys, one column per source along the path.

    ``attrs`` is aligned with ``rows`` and holds attributes attached after
    the join (strata, study variables).
    """

    sources: tuple
    rows: tuple
    path: tuple = ()
    attrs: tuple = None

    def __post_init__(self):
        if self.attrs is None:
            object.__setattr__(self, "attrs", tuple({} for _ in self.rows))

    def __len__(self):
        return len(self.rows)

    @property
    def exact(self):
        return all(d["method"].get("kind") in ("exact", "admin-key") for d in self.path)

    @property
    def reaches_register(self):
        return bool(self.sources) and self.sources[-1] == REGISTER

    def row_key(self, i):
        return "|".join(self.rows[i])

    def row_keys(self):
        return list(self._row_keys)

    @cached_property
    def _row_keys(self):
        return tuple(map("|".join, self.rows))

    def column(self, source):
        j = self.sources.index(source)
        return [r[j] for r in self.rows]

    def svids(self):
        if not self.reaches_register:
            return [None] * len(self.rows)
        return [int(r[-1]) for r in self.rows]

    def with_attributes(self, source, profiles, fields):
        """Copy with ``fields`` looked up in ``profiles`` by the ``source`` key column."""
        j = self.sources.index(source)
        attrs = []
        for row, old in zip(self.rows, self.attrs):
            prof = profiles.get(row[j], {})
            new = dict(old)
            for f in fields:
                new[f] = prof.get(f)
            attrs.append(new)
        return replace(self, attrs=tuple(attrs))

    @classmethod
    def from_csv(cls, text, path=()):
        """Inverse of ``to_csv``; attribute cells come back as strings (blank -> None)."""
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        k = 0
        while k < len(header) and header[k].endswith("_key"):
            k += 1
        sources = tuple(h[:-4] for h in header[:k])
        names = header[k:]
        rows, attrs = [], []
        for rec in reader:
            rows.append(tuple(rec[:k]))
            attrs.append({n: (v if v != "" else None) for n, v in zip(names, rec[k:])})
        return cls(sources, tuple(rows), tuple(path), tuple(attrs))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        attr_names = sorted({k for a in self.attrs for k in a})
        w.writerow([f"{s}_key" for s in self.sources] + attr_names)
        for row, a in zip(self.rows, self.attrs):
            w.writerow(list(row) + ["" if a.get(k) is None else a.get(k) for k in attr_names])
        return buf.getvalue()


def step_through(path):
    """Join relations in order; adjacent relations must share a source.

    A relation is flipped when its right side is the current terminal source.
    """
    if not path:
        raise NonChainablePath("empty path")
    first = path[0]
    sources = [first.left_source, first.right_source]
    rows = [tuple(p) for p in first.pairs]
    descriptors = [first.descriptor()]
    for rel in path[1:]:
        tail = sources[-1]
        if rel.left_source != tail:
            if rel.right_source == tail:
                rel = rel.flipped()
            else:
                raise NonChainablePath(
                    f"{rel.left_source}<->{rel.right_source} does not attach to {tail}")
        if rel.right_source in sources:
            raise NonChainablePath(f"path revisits {rel.right_source}")
        step = rel.left_to_right()
        rows = [r + (step[r[-1]],) for r in rows if r[-1] in step]
        sources.append(rel.right_source)
        descriptors.append(rel.descriptor())
    return IntegratedDataset(tuple(sources), tuple(sorted(rows)), tuple(descriptors))
