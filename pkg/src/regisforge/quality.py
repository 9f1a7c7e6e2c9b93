"""Coverage ratios, source metadata descriptors and the TSE report.

Coverage of a dataset in stratum d is ``n_d / N_d``: the number of distinct
frame members the dataset reaches through its linkage to the frame, over
the frame count.  A linked (integrated) dataset can never cover more of a
stratum than any of its exact-key inputs, and the composite report checks
that bound every time it is built.
"""

import datetime as dt
import json
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction

from . import idforge
from .errors import IncompleteRun, InvariantViolation, SpecMismatch, UnknownSource
from .estimate import frame_field_index
from .registry import split_stratum, stratum_label
from .timeline import stability_metrics
from .util import is_missing

DIMENSIONS = ("relevance", "timeliness", "accuracy", "accessibility",
              "interpretability", "coherence")
NOT_ASSESSED = "not assessed"

# Checklist keys per quality dimension; answers come from the source config.
CHECKLIST = {
    "relevance": ["collecting_agency", "legal_purpose", "entity_types", "excluded_subpopulations",
                  "variables_collected"],
    "timeliness": ["collection_frequency", "known_gaps", "unusual_periods"],
    "accuracy": ["identifier_uniqueness", "known_weaknesses", "imputation", "miscoding"],
    "accessibility": ["format", "access_restrictions"],
    "interpretability": ["variable_definitions", "nonstandard_definitions"],
    "coherence": ["discontinuities", "coverage_changes"],
}


@dataclass
class CoverageReport:
    dataset_ref: str
    frame_ref: str
    strata_fields: tuple
    per_stratum: dict
    unmatched: int
    dataset_size: int

    def ratio(self, stratum):
        return self.per_stratum[stratum]["ratio"]

    def to_dict(self):
        return {
            "dataset_ref": self.dataset_ref,
            "frame_ref": self.frame_ref,
            "strata_fields": list(self.strata_fields),
            "dataset_size": self.dataset_size,
            "unmatched": self.unmatched,
            "per_stratum": {
                s: {"n_d": v["n_d"], "N_d": v["N_d"], "ratio": float(v["ratio"]),
                    "ratio_exact": str(v["ratio"]), "over_coverage": v["over_coverage"]}
                for s, v in sorted(self.per_stratum.items())
            },
        }


def _project(frame, fields):
    """Frame member -> stratum label on ``fields`` (a subset of the frame's)."""
    if fields is None or tuple(fields) == frame.strata_fields:
        return frame.lookup, dict(frame.stratum_counts), frame.strata_fields
    idx = frame_field_index(frame, fields)
    strata = {s: stratum_label([split_stratum(l)[i] for i in idx]) for s, l in frame.strata.items()}
    return strata, dict(sorted(Counter(strata.values()).items())), tuple(fields)


def coverage_ratios(dataset_keys, link_to_frame, frame, strata_fields=None, dataset_ref=None):
    """Per-stratum coverage of ``frame`` by a set of dataset keys.

    ``link_to_frame`` maps dataset keys to frame SVIDs: a ``LinkageRelation``
    whose right side holds rendered SVIDs, or a plain mapping.
    """
    if strata_fields is not None and not set(strata_fields) <= set(frame.strata_fields):
        raise SpecMismatch(f"frame {frame.frame_id} is not stratified by {list(strata_fields)}")
    strata, N, fields = _project(frame, strata_fields)
    mapping = link_to_frame.left_to_right() if hasattr(link_to_frame, "left_to_right") else link_to_frame
    keys = set(dataset_keys)
    # None and "" mean unlinked; no SVID is falsy
    targets = list(filter(None, map(mapping.get, keys)))
    svids = list(map(int, targets))
    inside = set(filter(strata.__contains__, set(svids)))
    if len(inside) == len(svids):
        matched = len(svids)
    else:
        matched = sum(1 for s in svids if s in inside)
    unmatched = len(keys) - matched
    reached = Counter(map(strata.__getitem__, inside))
    per = {}
    for label, Nd in N.items():
        nd = reached.get(label, 0)
        ratio = Fraction(nd, Nd) if Nd else Fraction(0)
        per[label] = {"n_d": nd, "N_d": Nd, "ratio": ratio, "over_coverage": ratio > 1}
    ref = dataset_ref or getattr(link_to_frame, "left_source", "dataset")
    return CoverageReport(ref, frame.key, fields, per, unmatched, len(keys))


def linked_coverage_report(sources, integrated, frame, strata_fields=None, integrated_ref="integrated"):
    """Coverage of each source and of the integrated dataset.

    ``sources`` maps a source tag to ``(dataset_keys, link_to_frame)``.  The
    integrated dataset reaches the frame through its terminal SVID column,
    or else through the frame linkage of the first source in its path that
    has one.  Under all-exact linkage the integrated ratio must not exceed
    any constituent source's ratio in any stratum; a violation raises
    ``InvariantViolation``.
    """
    reports = {tag: coverage_ratios(keys, rel, frame, strata_fields, tag)
               for tag, (keys, rel) in sorted(sources.items())}
    if integrated.reaches_register:
        mapping = {r[-1]: r[-1] for r in integrated.rows}
        keys = [r[-1] for r in integrated.rows]
    else:
        anchor = next((s for s in integrated.sources if s in sources), None)
        if anchor is None:
            raise UnknownSource("no source of the integrated dataset has a frame linkage")
        rel = sources[anchor][1]
        mapping = rel.left_to_right() if hasattr(rel, "left_to_right") else rel
        keys = integrated.column(anchor)
    integ = coverage_ratios(keys, mapping, frame, strata_fields, integrated_ref)

    constituents = [s for s in integrated.sources if s in reports]
    bound = {}
    for label, v in integ.per_stratum.items():
        lowest = min((reports[s].per_stratum[label]["ratio"] for s in constituents), default=None)
        ok = lowest is None or v["ratio"] <= lowest
        bound[label] = {"integrated": float(v["ratio"]),
                        "min_source": float(lowest) if lowest is not None else None,
                        "holds": ok}
    exact = integrated.exact
    if exact and not all(b["holds"] for b in bound.values()):
        bad = [k for k, b in bound.items() if not b["holds"]]
        raise InvariantViolation(f"integrated coverage exceeds a source's coverage in {bad}")
    return {
        "frame_ref": frame.key,
        "path": [d["left_source"] + "<->" + d["right_source"] for d in integrated.path],
        "exact_linkage": exact,
        "sources": {t: r.to_dict() for t, r in reports.items()},
        "integrated": integ.to_dict(),
        "intersection_bound": bound,
        "bound_verified": exact,
    }


@dataclass
class MetaDescriptor:
    source: str
    sections: dict
    auto_fields: dict = field(default_factory=dict)

    def to_dict(self):
        return {"source": self.source, "sections": self.sections, "auto_fields": self.auto_fields}


def _periods(first, last, granularity):
    if granularity == "month":
        out, y, m = [], first.year, first.month
        while (y, m) <= (last.year, last.month):
            out.append(f"{y:04d}-{m:02d}")
            y, m = (y + 1, 1) if m == 12 else (y, m + 1)
        return out
    return [str(y) for y in range(first.year, last.year + 1)]


def _period_of(day, granularity):
    return f"{day.year:04d}-{day.month:02d}" if granularity == "month" else str(day.year)


def build_meta_descriptor(source_config, timeline_db, granularity="year"):
    """Checklist answers from config plus fields computed from the timelines.

    ``source_config`` carries ``tag`` and optional ``checklist`` (dimension
    -> {question: answer}) and ``load_date_field``.  Unanswered questions are
    marked "not assessed".
    """
    tag = source_config.get("tag")
    if tag != timeline_db.source:
        raise UnknownSource(f"config is for {tag!r}, timelines are for {timeline_db.source!r}")
    answers = source_config.get("checklist") or {}
    sections = {}
    for dim in DIMENSIONS:
        given = answers.get(dim) or {}
        questions = list(CHECKLIST[dim]) + sorted(set(given) - set(CHECKLIST[dim]))
        sections[dim] = [{"question": q,
                          "answer": given[q] if not is_missing(given.get(q)) else NOT_ASSESSED}
                         for q in questions]

    dates = [e.event_date for e in timeline_db.events()]
    auto = {"events": len(dates), "entities": len(timeline_db)}
    if dates:
        first, last = min(dates), max(dates)
        seen = {_period_of(d, granularity) for d in dates}
        auto["span"] = [first.isoformat(), last.isoformat()]
        auto["period_granularity"] = granularity
        auto["missing_periods"] = [p for p in _periods(first, last, granularity) if p not in seen]
    else:
        auto.update(span=None, missing_periods=[])

    lag_field = source_config.get("load_date_field")
    if lag_field and dates:
        lags = []
        for e in timeline_db.events():
            v = e.payload.get(lag_field)
            if not is_missing(v):
                lags.append((dt.date.fromisoformat(str(v)[:10]) - e.event_date).days)
        lags.sort()
        auto["collection_lag_days"] = ({"median": lags[len(lags) // 2], "max": lags[-1]}
                                       if lags else None)
    else:
        auto["collection_lag_days"] = None

    missing_rates, stability = {}, {}
    n = len(dates)
    for f in sorted(timeline_db.fields()):
        absent = sum(1 for e in timeline_db.events() if is_missing(e.payload.get(f)))
        missing_rates[f] = absent / n if n else 0.0
        _, agg = stability_metrics(timeline_db, f)
        stability[f] = {"change_rate": agg["change_rate"], "missing_rate": agg["missing_rate"]}
    auto["field_missing_rates"] = missing_rates
    auto["timeline_stability"] = stability
    return MetaDescriptor(tag, sections, auto)


SUBPROCESSES = ("source", "linkage", "frame", "estimation")


def tse_report(run):
    """Assemble the per-sub-process quality collage of a pipeline run.

    ``run`` is a mapping with ``config_revision``, ``input_digests`` and the
    phase records ``sources`` (list), ``linkages`` (list), ``frames`` (list),
    ``estimation`` (mapping or None), ``coverage`` (mapping or None).  Missing
    phases are listed under ``incomplete``; a run without ingestion or any
    linkage raises ``IncompleteRun`` carrying the partial report.
    """
    cite = {"config_revision": run.get("config_revision"),
            "input_digests": dict(sorted((run.get("input_digests") or {}).items()))}
    sections = []
    for s in run.get("sources") or []:
        sections.append({"subprocess": "source", "name": s["tag"], **cite, "measures": s})
    for l in run.get("linkages") or []:
        sections.append({"subprocess": "linkage", "name": l["name"], **cite, "measures": l})
    for f in run.get("frames") or []:
        sections.append({"subprocess": "frame", "name": f["frame_id"], **cite, "measures": f})
    est = run.get("estimation")
    if est:
        sections.append({"subprocess": "estimation", "name": est.get("name", "estimation"),
                         **cite, "measures": est})
    present = {s["subprocess"] for s in sections}
    incomplete = [p for p in SUBPROCESSES if p not in present]
    report = {
        "config_revision": cite["config_revision"],
        "sections": sections,
        "coverage": run.get("coverage"),
        "incomplete": incomplete,
        "estimation": "present" if est else "absent",
        "counts": dict(Counter(s["subprocess"] for s in sections)),
    }
    if "source" in incomplete or "linkage" in incomplete:
        err = IncompleteRun(f"run is missing phase(s): {incomplete}")
        err.report = report
        raise err
    return report


def render_tse_text(report):
    lines = ["TOTAL SURVEY ERROR REPORT", f"config revision: {report['config_revision']}", ""]
    for s in report["sections"]:
        lines.append(f"[{s['subprocess']}] {s['name']}")
        for k, v in sorted(s["measures"].items()):
            if isinstance(v, (dict, list)):
                v = _short(v)
            lines.append(f"  {k}: {v}")
        lines.append("")
    cov = report.get("coverage")
    if cov:
        for composite in ([cov] if "frame_ref" in cov else [cov[k] for k in sorted(cov)]):
            lines.append(render_coverage_text(composite))
    lines.append(f"estimation: {report['estimation']}")
    if report["incomplete"]:
        lines.append(f"incomplete phases: {', '.join(report['incomplete'])}")
    return "\n".join(lines) + "\n"


def _short(v, limit=100):
    text = json.dumps(v, sort_keys=True)
    return text if len(text) <= limit else text[: limit - 3] + "..."


def render_coverage_text(composite):
    lines = [f"COVERAGE against {composite['frame_ref']}"]
    names = list(composite["sources"]) + ["integrated"]
    strata = sorted(composite["integrated"]["per_stratum"])
    width = max([len(s) for s in strata] + [7])
    lines.append("stratum".ljust(width) + "".join(f"{n:>14}" for n in names))
    for s in strata:
        cells = [composite["sources"][n]["per_stratum"][s]["ratio"] for n in names[:-1]]
        cells.append(composite["integrated"]["per_stratum"][s]["ratio"])
        lines.append(s.ljust(width) + "".join(f"{c:>14.4f}" for c in cells))
    return "\n".join(lines) + "\n"


def svid_keys(svids):
    return [idforge.render_svid(s) for s in svids]
