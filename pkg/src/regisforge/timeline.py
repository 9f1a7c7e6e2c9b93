"""Per-source timeline databases.

Events are grouped by their source entity key (a deterministic grouping, not
a linkage) and kept sorted by ``(event_date, ingest_seq)``; the arrival
sequence breaks same-day ties.
"""

import bisect
import csv
import datetime as dt
from dataclasses import dataclass, field

from .errors import UnknownField
from .util import is_missing, parse_date, read_ndjson, write_ndjson


@dataclass(frozen=True)
class Event:
    entity_key: str
    event_date: dt.date
    ingest_seq: int
    payload: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def sort_key(self):
        return (self.event_date, self.ingest_seq)

    def to_json(self):
        return {"entity_key": self.entity_key, "event_date": self.event_date.isoformat(),
                "ingest_seq": self.ingest_seq, "payload": self.payload}

    @classmethod
    def from_json(cls, d):
        return cls(str(d["entity_key"]), parse_date(d["event_date"]), int(d["ingest_seq"]),
                   dict(d.get("payload") or {}))


def make_event(entity_key, event_date, ingest_seq, payload=None):
    """Validate and build an event (raises ``MalformedDate``)."""
    return Event(str(entity_key), parse_date(event_date), int(ingest_seq), dict(payload or {}))


class TimelineDB:
    """entity_key -> list of events sorted by (event_date, ingest_seq)."""

    def __init__(self, source):
        self.source = source
        self.timelines = {}
        self._seqs = set()

    def __len__(self):
        return len(self.timelines)

    def __contains__(self, key):
        return key in self.timelines

    def __getitem__(self, key):
        return self.timelines[key]

    def keys(self):
        return sorted(self.timelines)

    @property
    def n_events(self):
        return len(self._seqs)

    @property
    def next_seq(self):
        return max(self._seqs) + 1 if self._seqs else 0

    def append_event(self, event):
        if event.ingest_seq in self._seqs:
            raise ValueError(f"ingest_seq {event.ingest_seq} already used in {self.source}")
        line = self.timelines.setdefault(event.entity_key, [])
        keys = [e.sort_key for e in line]
        line.insert(bisect.bisect_right(keys, event.sort_key), event)
        self._seqs.add(event.ingest_seq)
        return self

    def events(self):
        """All events, keys in sorted order, each timeline in time order."""
        for key in self.keys():
            yield from self.timelines[key]

    def fields(self):
        out = set()
        for line in self.timelines.values():
            for e in line:
                out.update(e.payload)
        return out

    def latest(self, key, name):
        """Most recent non-missing value of ``name`` on a timeline."""
        for e in reversed(self.timelines[key]):
            v = e.payload.get(name)
            if not is_missing(v):
                return v
        return None

    def profiles(self, fields=None):
        """``{entity_key: {field: latest non-missing value}}``, plus ``entity_key``."""
        fields = sorted(self.fields()) if fields is None else list(fields)
        out = {}
        for key in self.keys():
            prof = {"entity_key": key}
            for f in fields:
                if f != "entity_key":
                    prof[f] = self.latest(key, f)
            out[key] = prof
        return out

    def save(self, path):
        write_ndjson(path, [e.to_json() for e in self.events()])

    @classmethod
    def load(cls, source, path):
        return group_events(source, (Event.from_json(d) for d in read_ndjson(path)))


def append_event(db, event):
    return db.append_event(event)


def group_events(source, raw_events):
    """Bucket events by entity key; the result does not depend on input order."""
    db = TimelineDB(source)
    buckets = {}
    for e in raw_events:
        if e.ingest_seq in db._seqs:
            raise ValueError(f"ingest_seq {e.ingest_seq} repeated")
        db._seqs.add(e.ingest_seq)
        buckets.setdefault(e.entity_key, []).append(e)
    for key in sorted(buckets):
        db.timelines[key] = sorted(buckets[key], key=lambda e: e.sort_key)
    return db


def read_events_csv(path, key_field="entity_key", date_field="event_date", start_seq=0):
    """Events from a UTF-8 CSV with a header row; other columns become payload.

    Rows are numbered in file order from ``start_seq``.
    """
    events = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in (key_field, date_field) if c not in (reader.fieldnames or ())]
        if missing:
            raise UnknownField(f"{path}: missing mandatory column(s) {missing}")
        for i, row in enumerate(reader):
            payload = {k: v for k, v in row.items() if k not in (key_field, date_field)}
            events.append(make_event(row[key_field], row[date_field], start_seq + i, payload))
    return events


@dataclass
class StabilityMetrics:
    change_rate: float
    missing_rate: float
    n_events: int


def timeline_stability(values):
    """Change and missing rates for one timeline's sequence of field values.

    ``missing_rate`` is the share of events without a value; ``change_rate``
    is the share of adjacent present-value pairs (missing values skipped)
    that differ, and 0 with fewer than two present values.

    >>> timeline_stability(["A", "A", "B"])
    StabilityMetrics(change_rate=0.5, missing_rate=0.0, n_events=3)
    """
    n = len(values)
    present = [v for v in values if not is_missing(v)]
    missing_rate = (n - len(present)) / n if n else 0.0
    pairs = len(present) - 1
    if pairs < 1:
        return StabilityMetrics(0.0, missing_rate, n)
    changes = sum(1 for a, b in zip(present, present[1:]) if a != b)
    return StabilityMetrics(changes / pairs, missing_rate, n)


def stability_metrics(db, name):
    """Per-entity and aggregate stability of one payload field.

    The aggregate is the plain mean over timelines, every entity counting
    once regardless of how many events it has.
    """
    if name not in db.fields():
        raise UnknownField(f"{name!r} not in {db.source} payloads")
    per_entity = {}
    for key in db.keys():
        per_entity[key] = timeline_stability([e.payload.get(name) for e in db[key]])
    k = len(per_entity)
    aggregate = {
        "change_rate": sum(m.change_rate for m in per_entity.values()) / k if k else 0.0,
        "missing_rate": sum(m.missing_rate for m in per_entity.values()) / k if k else 0.0,
        "entities": k,
    }
    return per_entity, aggregate
