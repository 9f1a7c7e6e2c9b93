"""Administrative registers, the population entity register and frames.

Three layers, following the registry-system template:

* ``AdminRegister`` - one per core source; maps the source's own key to an
  SVID and tracks within-source duplicate groups through ``alias_id``.
* ``EntityRegister`` - every alias representative from every admin register,
  with one alias column per core source and a ``current_id`` that is the
  smallest birth SVID in the record's link component.
* ``Frame`` - an immutable, stratified snapshot of the register's unique
  entities passing a set of frame rules at a reference date.

Nothing is ever deleted: duplicates stay in place and point at their
representative.
"""

import csv
import datetime as dt
import io
import warnings
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from types import MappingProxyType

from . import idforge
from .errors import (
    BirthRejected,
    ConflictingAlias,
    CycleDetected,
    DuplicateBirth,
    FrameExists,
    InvariantViolation,
    TypeMismatch,
    UnknownStrataAttribute,
    UnknownSvid,
)
from .unionfind import MinUnionFind
from .util import (
    atomic_write_text,
    dumps,
    is_missing,
    parse_date,
    read_json,
    read_ndjson,
    write_ndjson,
    years_before,
)

MISSING_STRATUM = "NA"
STRATUM_SEP = "|"


# ---------------------------------------------------------------------------
# Declarative rules
# ---------------------------------------------------------------------------

def _as_number(value):
    try:
        return float(value)
    except (TypeError, ValueError):
        return None


def _compare(op, left, right):
    a, b = _as_number(left), _as_number(right)
    if a is None or b is None:
        a, b = str(left), str(right)
    return {"gt": a > b, "ge": a >= b, "lt": a < b, "le": a <= b}[op]


def _year_bounds(value):
    if isinstance(value, (list, tuple)):
        start, end = value
        return parse_date(str(start)), parse_date(str(end))
    year = int(value)
    return dt.date(year, 1, 1), dt.date(year, 12, 31)


@dataclass(frozen=True)
class Rule:
    """One predicate ``field <op> value``.

    Ops: ``eq ne in not_in gt ge lt le present missing`` on attribute values,
    plus ``active_overlaps`` (a year or ``[start, end]``) and ``active_on``
    (a date) on an entity's activity span.
    """

    field: str
    op: str
    value: object = None

    OPS = ("eq", "ne", "in", "not_in", "gt", "ge", "lt", "le", "present", "missing",
           "active_overlaps", "active_on")

    def __post_init__(self):
        if self.op not in self.OPS:
            raise ValueError(f"unknown rule op {self.op!r}")

    @classmethod
    def from_dict(cls, d):
        value = d.get("value")
        if isinstance(value, list):
            value = tuple(value)
        return cls(d.get("field", ""), d["op"], value)

    def to_dict(self):
        value = list(self.value) if isinstance(self.value, tuple) else self.value
        return {"field": self.field, "op": self.op, "value": value}

    def evaluate(self, lookup, span=None):
        if self.op in ("active_overlaps", "active_on"):
            if span is None or span[0] is None:
                return False
            first, last = span
            if self.op == "active_on":
                day = parse_date(str(self.value))
                return first <= day <= last
            lo, hi = _year_bounds(self.value)
            return first <= hi and last >= lo
        value = lookup(self.field)
        if self.op == "present":
            return not is_missing(value)
        if self.op == "missing":
            return is_missing(value)
        if is_missing(value):
            return False
        if self.op == "eq":
            return str(value) == str(self.value)
        if self.op == "ne":
            return str(value) != str(self.value)
        if self.op in ("in", "not_in"):
            hit = str(value) in {str(v) for v in self.value}
            return hit if self.op == "in" else not hit
        return _compare(self.op, value, self.value)


@dataclass(frozen=True)
class RuleSet:
    """Conjunction of rules plus a retention window in years (None = unlimited).

    Used both as birth rules (over admin-record attributes) and frame rules
    (over entity fields).  Evaluation is a pure AND, so order is irrelevant.
    An empty rule set accepts everything.
    """

    rules: tuple = ()
    retention_years: int = None

    @classmethod
    def from_config(cls, cfg):
        if cfg is None:
            return cls()
        if isinstance(cfg, list):
            return cls(tuple(Rule.from_dict(r) for r in cfg))
        return cls(tuple(Rule.from_dict(r) for r in cfg.get("rules", ())),
                   cfg.get("retention_years"))

    def to_dict(self):
        return {"rules": [r.to_dict() for r in self.rules],
                "retention_years": self.retention_years}

    def accepts(self, lookup, span=None):
        return all(r.evaluate(lookup, span) for r in self.rules)


BirthRules = RuleSet
FrameRules = RuleSet


# ---------------------------------------------------------------------------
# Administrative registers
# ---------------------------------------------------------------------------

@dataclass
class AdminRecord:
    source: str
    source_key: str
    svid: int
    alias_id: int
    attrs: dict
    first_seen: dt.date
    last_seen: dt.date

    @property
    def is_representative(self):
        return self.svid == self.alias_id

    def to_json(self):
        return {
            "source": self.source,
            "source_key": self.source_key,
            "svid": idforge.render_svid(self.svid),
            "alias_id": idforge.render_svid(self.alias_id),
            "attrs": self.attrs,
            "first_seen": self.first_seen.isoformat(),
            "last_seen": self.last_seen.isoformat(),
        }

    @classmethod
    def from_json(cls, d):
        return cls(d["source"], d["source_key"], int(d["svid"]), int(d["alias_id"]),
                   dict(d["attrs"]), parse_date(d["first_seen"]), parse_date(d["last_seen"]))


def namespace_source_key(raw_key, institution="", period=""):
    """Composite key that keeps keys from different institutions/periods apart.

    Components are joined with ``:``; backslashes and colons inside a
    component are escaped, so the encoding is injective and reversible.

    >>> namespace_source_key("K1", "HOSP_A", "2019")
    'K1:HOSP_A:2019'
    >>> split_source_key(namespace_source_key("a:b", "x", ""))
    ('a:b', 'x', '')
    """
    def esc(part):
        return str(part).replace("\\", "\\\\").replace(":", "\\:")
    return ":".join(esc(p) for p in (raw_key, institution, period))


def split_source_key(key):
    parts, buf, i = [], [], 0
    while i < len(key):
        ch = key[i]
        if ch == "\\" and i + 1 < len(key):
            buf.append(key[i + 1])
            i += 2
            continue
        if ch == ":":
            parts.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
        i += 1
    parts.append("".join(buf))
    if len(parts) != 3:
        raise ValueError(f"not a namespaced key: {key!r}")
    return tuple(parts)


class AdminRegister:
    """Per-source register: source key -> SVID, with duplicate aliasing."""

    def __init__(self, source, birth_rules=None):
        self.source = source
        self.birth_rules = birth_rules or RuleSet()
        self.records = {}
        self.by_svid = {}
        self.rejected = []
        self._groups = MinUnionFind()

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(sorted(self.records.values(), key=lambda r: r.svid))

    def lookup(self, source_key):
        return self.records[source_key]

    def record(self, svid):
        try:
            return self.records[self.by_svid[svid]]
        except KeyError:
            raise UnknownSvid(f"{svid} not in {self.source} register") from None

    def ingest_transaction(self, generator, source_key, attrs, date):
        """Upsert one incoming transaction; new keys draw a fresh SVID.

        Raises ``BirthRejected`` (after logging it) when a new key fails the
        birth rules; no SVID is consumed in that case.
        """
        day = parse_date(date)
        source_key = str(source_key)
        rec = self.records.get(source_key)
        if rec is not None:
            rec.attrs.update(attrs)
            rec.first_seen = min(rec.first_seen, day)
            rec.last_seen = max(rec.last_seen, day)
            return rec
        if not self.birth_rules.accepts(lambda f: attrs.get(f)):
            self.rejected.append({"source_key": source_key, "date": day.isoformat()})
            raise BirthRejected(f"{self.source}:{source_key} rejected by birth rules")
        svid = generator.draw()
        rec = AdminRecord(self.source, source_key, svid, svid, dict(attrs), day, day)
        self.records[source_key] = rec
        self.by_svid[svid] = source_key
        self._groups.add(svid)
        return rec

    def mark_source_duplicates(self, svids):
        """Assert that ``svids`` are one entity; alias all to the group minimum."""
        svids = sorted(set(svids))
        for s in svids:
            self.record(s)
        for s in svids[1:]:
            for moved in self._groups.union(svids[0], s):
                self.records[self.by_svid[moved]].alias_id = self._groups.find(moved)
        return self

    def representatives(self):
        return [r for r in self if r.is_representative]

    def to_lines(self):
        return [r.to_json() for r in self]

    def save(self, path):
        write_ndjson(path, self.to_lines())

    @classmethod
    def from_lines(cls, source, lines, birth_rules=None):
        reg = cls(source, birth_rules)
        latest = {}
        for d in lines:
            latest[d["source_key"]] = d  # last line per key wins
        for d in latest.values():
            rec = AdminRecord.from_json(d)
            reg.records[rec.source_key] = rec
            reg.by_svid[rec.svid] = rec.source_key
            reg._groups.add(rec.svid)
        for rec in reg.records.values():
            if rec.alias_id != rec.svid:
                reg._groups.add(rec.alias_id)
                reg._groups.union(rec.svid, rec.alias_id)
        for rec in reg.records.values():
            if rec.alias_id != reg._groups.find(rec.svid):
                raise InvariantViolation(f"{source}:{rec.source_key} alias is not its group minimum")
        return reg

    @classmethod
    def load(cls, source, path, birth_rules=None):
        return cls.from_lines(source, read_ndjson(path), birth_rules)


# ---------------------------------------------------------------------------
# Entity register
# ---------------------------------------------------------------------------

@dataclass
class EntityRecord:
    birth_svid: int
    birth_source: str
    source_alias: dict
    current_id: int
    entity_type: str = "person"
    parent_alias: int = None
    active_from: dt.date = None
    active_to: dt.date = None
    attrs: dict = field(default_factory=dict)

    @property
    def unique(self):
        return self.birth_svid == self.current_id

    def to_json(self):
        r = idforge.render_svid
        return {
            "kind": "entity",
            "birth_svid": r(self.birth_svid),
            "birth_source": self.birth_source,
            "source_alias": {k: r(v) for k, v in sorted(self.source_alias.items())},
            "current_id": r(self.current_id),
            "entity_type": self.entity_type,
            "parent_alias": r(self.parent_alias) if self.parent_alias is not None else None,
            "active_from": self.active_from.isoformat() if self.active_from else None,
            "active_to": self.active_to.isoformat() if self.active_to else None,
            "attrs": self.attrs,
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            int(d["birth_svid"]), d["birth_source"],
            {k: int(v) for k, v in d["source_alias"].items()},
            int(d["current_id"]), d["entity_type"],
            int(d["parent_alias"]) if d.get("parent_alias") else None,
            parse_date(d["active_from"]) if d.get("active_from") else None,
            parse_date(d["active_to"]) if d.get("active_to") else None,
            dict(d.get("attrs") or {}),
        )


class EntityRegister:
    """Population register over all core sources.

    ``hierarchy`` maps a child entity type to its allowed parent type,
    e.g. ``{"location": "enterprise"}``.
    """

    def __init__(self, sources=(), hierarchy=None):
        self.sources = tuple(sources)
        self.hierarchy = dict(hierarchy or {})
        self.records = {}
        self.links = set()
        self._components = MinUnionFind()

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(sorted(self.records.values(), key=lambda r: r.birth_svid))

    def __getitem__(self, svid):
        try:
            return self.records[svid]
        except KeyError:
            raise UnknownSvid(f"{svid} not in entity register") from None

    def add(self, rec):
        if rec.birth_svid in self.records:
            raise DuplicateBirth(f"birth SVID {rec.birth_svid} appears twice")
        self.records[rec.birth_svid] = rec
        self._components.add(rec.birth_svid)

    def link_entities(self, svid_a, svid_b):
        """Assert two records are the same entity.

        Cross-source links fill each record's alias column for the other's
        birth source; a column already holding a different SVID raises
        ``ConflictingAlias`` and leaves the register untouched.  Same-source
        links only merge components (the shared column already holds each
        record's own ID).
        """
        a, b = self[svid_a], self[svid_b]
        if a.birth_svid == b.birth_svid:
            return self
        if a.birth_source != b.birth_source:
            for rec, other in ((a, b), (b, a)):
                held = rec.source_alias.get(other.birth_source)
                if held is not None and held != other.birth_svid:
                    raise ConflictingAlias(
                        f"{rec.birth_svid} already has {other.birth_source} alias {held}; "
                        f"refusing {other.birth_svid}")
            a.source_alias[b.birth_source] = b.birth_svid
            b.source_alias[a.birth_source] = a.birth_svid
        self.links.add((min(a.birth_svid, b.birth_svid), max(a.birth_svid, b.birth_svid)))
        for moved in self._components.union(a.birth_svid, b.birth_svid):
            self.records[moved].current_id = self._components.find(moved)
        return self

    def resolve_current_id(self, svid):
        self[svid]
        return self._components.find(svid)

    def component(self, svid):
        self[svid]
        return sorted(self._components.members(svid))

    def unique_view(self):
        return [r for r in self if r.unique]

    def link_child_to_parent(self, child_svid, parent_svid):
        child, parent = self[child_svid], self[parent_svid]
        allowed = self.hierarchy.get(child.entity_type)
        if allowed != parent.entity_type:
            raise TypeMismatch(
                f"{child.entity_type} cannot sit under {parent.entity_type} "
                f"(configured parent: {allowed})")
        child_root = self._components.find(child.birth_svid)
        node = parent
        while True:
            if self._components.find(node.birth_svid) == child_root:
                raise CycleDetected(f"{child_svid} is an ancestor of {parent_svid}")
            up = node.parent_alias
            if up is None or self._components.find(up) == self._components.find(node.birth_svid):
                break
            node = self[up]
        child.parent_alias = parent.current_id
        if parent.parent_alias is None:
            # the parent heads its own group
            parent.parent_alias = parent.current_id
        return self

    def hierarchy_table(self, parent_type, child_type):
        """Rows ``(birth_svid, parent-type alias, child-type alias)``.

        A parent heading its own group appears as ``(p, p, p)``; a child
        under it as ``(c, p, c)``.
        """
        rows = []
        for rec in self:
            if rec.parent_alias is None or rec.entity_type not in (parent_type, child_type):
                continue
            rows.append((rec.birth_svid, rec.parent_alias, rec.birth_svid))
        return rows

    def activity_span(self, svid):
        """Union of the activity spans over the record's link component."""
        firsts, lasts = [], []
        for m in self._components.members(svid):
            rec = self.records[m]
            if rec.active_from is not None:
                firsts.append(rec.active_from)
                lasts.append(rec.active_to or rec.active_from)
        if not firsts:
            return None, None
        return min(firsts), max(lasts)

    def attribute(self, svid, name):
        """First non-missing value of ``name`` over the component, smallest SVID first."""
        rec = self.records[svid]
        if not is_missing(rec.attrs.get(name)):
            return rec.attrs[name]
        for m in sorted(self._components.members(svid)):
            v = self.records[m].attrs.get(name)
            if not is_missing(v):
                return v
        return None

    def to_lines(self):
        lines = [r.to_json() for r in self]
        r = idforge.render_svid
        lines += [{"kind": "link", "a": r(a), "b": r(b)} for a, b in sorted(self.links)]
        return lines

    def save(self, path):
        write_ndjson(path, self.to_lines())

    @classmethod
    def from_lines(cls, lines, sources=(), hierarchy=None):
        reg = cls(sources, hierarchy)
        entities, links = {}, []
        for d in lines:
            if d.get("kind") == "link":
                links.append((int(d["a"]), int(d["b"])))
            else:
                rec = EntityRecord.from_json(d)
                entities[rec.birth_svid] = rec
        for rec in entities.values():
            reg.records[rec.birth_svid] = rec
            reg._components.add(rec.birth_svid)
        for a, b in links:
            reg.links.add((a, b))
            reg._components.union(a, b)
        for rec in reg.records.values():
            if rec.current_id != reg._components.find(rec.birth_svid):
                raise InvariantViolation(f"stored current_id of {rec.birth_svid} is stale")
        return reg

    @classmethod
    def load(cls, path, sources=(), hierarchy=None):
        return cls.from_lines(read_ndjson(path), sources, hierarchy)


def init_entity_register(admin_registers, entity_types=None, hierarchy=None):
    """Seed the population register from admin-register representatives.

    ``admin_registers`` is an ordered sequence (or mapping) of
    ``AdminRegister``; ``entity_types`` maps source tag -> entity type.
    """
    if hasattr(admin_registers, "values"):
        admin_registers = list(admin_registers.values())
    entity_types = entity_types or {}
    reg = EntityRegister([a.source for a in admin_registers], hierarchy)
    for admin in admin_registers:
        etype = entity_types.get(admin.source, "person")
        for rec in admin.representatives():
            reg.add(EntityRecord(
                birth_svid=rec.svid,
                birth_source=admin.source,
                source_alias={admin.source: rec.svid},
                current_id=rec.svid,
                entity_type=etype,
                active_from=rec.first_seen,
                active_to=rec.last_seen,
                attrs=dict(rec.attrs),
            ))
    return reg


# module-level spellings of the register operations
def link_entities(register, svid_a, svid_b):
    return register.link_entities(svid_a, svid_b)


def resolve_current_id(register, svid):
    return register.resolve_current_id(svid)


def unique_view(register):
    return register.unique_view()


def link_child_to_parent(register, child_svid, parent_svid):
    return register.link_child_to_parent(child_svid, parent_svid)


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------

def stratum_label(values):
    for v in values:
        if STRATUM_SEP in v:
            raise ValueError(f"stratum value may not contain {STRATUM_SEP!r}: {v!r}")
    return STRATUM_SEP.join(values)


def split_stratum(label):
    return tuple(label.split(STRATUM_SEP))


@dataclass(frozen=True)
class Frame:
    """Immutable statistical-registry snapshot.

    ``strata`` maps SVID -> stratum label (attribute values joined with
    ``|`` in ``strata_fields`` order); ``stratum_counts`` holds N_d.
    """

    frame_id: str
    as_of: dt.date
    strata_fields: tuple
    members: frozenset
    strata: MappingProxyType
    stratum_counts: MappingProxyType
    rules: dict = None

    @classmethod
    def from_strata(cls, frame_id, as_of, strata_fields, strata, rules=None):
        strata = dict(sorted(strata.items()))
        counts = dict(sorted(Counter(strata.values()).items()))
        return cls(frame_id, parse_date(as_of), tuple(strata_fields), frozenset(strata),
                   MappingProxyType(strata), MappingProxyType(counts), rules)

    @property
    def size(self):
        return len(self.members)

    @cached_property
    def lookup(self):
        """Plain-dict copy of ``strata`` for bulk lookups (read-only by convention)."""
        return dict(self.strata)

    def values(self, svid):
        return split_stratum(self.strata[svid])

    def margins(self):
        """Per-field category counts: ``{field: {category: N}}``."""
        out = {f: Counter() for f in self.strata_fields}
        for label, n in self.stratum_counts.items():
            for f, v in zip(self.strata_fields, split_stratum(label)):
                out[f][v] += n
        return {f: dict(sorted(c.items())) for f, c in out.items()}

    @property
    def key(self):
        return f"{self.frame_id}@{self.as_of.isoformat()}"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["svid", "stratum", "as_of"])
        for svid, label in self.strata.items():
            w.writerow([idforge.render_svid(svid), label, self.as_of.isoformat()])
        return buf.getvalue()

    def meta(self):
        return {
            "frame_id": self.frame_id,
            "as_of": self.as_of.isoformat(),
            "strata_fields": list(self.strata_fields),
            "size": self.size,
            "stratum_counts": dict(self.stratum_counts),
            "rules": self.rules,
        }

    def save(self, directory):
        """Write ``<frame_id>@<as_of>.csv`` plus a JSON sidecar.

        Snapshots are never rewritten: saving different content under an
        existing key raises ``FrameExists``; identical content is a no-op.
        """
        directory = Path(directory)
        csv_path = directory / f"{self.key}.csv"
        meta_path = directory / f"{self.key}.json"
        text = self.to_csv()
        meta = dumps(self.meta()) + "\n"
        if csv_path.exists():
            if csv_path.read_text(encoding="utf-8") != text:
                raise FrameExists(f"snapshot {self.key} exists with different content")
            return csv_path
        atomic_write_text(csv_path, text)
        atomic_write_text(meta_path, meta)
        return csv_path

    @classmethod
    def load(cls, csv_path):
        csv_path = Path(csv_path)
        meta = read_json(csv_path.with_suffix(".json"))
        strata = {}
        with open(csv_path, encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                strata[int(row["svid"])] = row["stratum"]
        return cls.from_strata(meta["frame_id"], meta["as_of"], meta["strata_fields"],
                               strata, meta.get("rules"))


def build_frame(register, frame_rules, as_of, strata_fields, frame_id="frame"):
    """Filter the register's unique view into a stratified snapshot.

    An entity qualifies when its component's activity started on or before
    ``as_of``, its last activity falls inside the retention window (if one is
    set), and every frame rule holds.  Rules see ``entity_type``,
    ``birth_source``, ``birth_svid`` and any attribute name.
    """
    as_of = parse_date(as_of)
    frame_rules = frame_rules or RuleSet()
    strata_fields = tuple(strata_fields)
    if strata_fields and len(register):
        known = set()
        for rec in register:
            known.update(rec.attrs)
        unknown = [f for f in strata_fields if f not in known]
        if unknown:
            raise UnknownStrataAttribute(f"no entity carries {unknown}")
    cutoff = (years_before(as_of, frame_rules.retention_years)
              if frame_rules.retention_years is not None else None)
    strata = {}
    for rec in register.unique_view():
        first, last = register.activity_span(rec.birth_svid)
        if first is None or first > as_of:
            continue
        if cutoff is not None and last < cutoff:
            continue

        def lookup(name, rec=rec):
            if name in ("entity_type", "birth_source"):
                return getattr(rec, name)
            if name == "birth_svid":
                return idforge.render_svid(rec.birth_svid)
            return register.attribute(rec.birth_svid, name)

        if not frame_rules.accepts(lookup, (first, last)):
            continue
        values = []
        for f in strata_fields:
            v = register.attribute(rec.birth_svid, f)
            values.append(MISSING_STRATUM if is_missing(v) else str(v))
        strata[rec.birth_svid] = stratum_label(values)
    if not strata:
        warnings.warn(f"frame {frame_id!r} at {as_of} is empty", stacklevel=2)
    return Frame.from_strata(frame_id, as_of, strata_fields, strata, frame_rules.to_dict())
