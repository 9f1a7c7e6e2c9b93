"""Calibration of a linked sample to frame totals, and weighted totals.

Weights ``w_k`` are chosen so that the weighted sample reproduces the frame's
domain counts.  Two routes are provided:

* ``poststratify`` - full cross-classification, ``w = N_d / n_d`` per cell,
  computed in exact rational arithmetic so residuals are exactly zero.
* ``rake`` - margins only, classical iterative proportional fitting from
  unit weights.

Linked rows are assumed to be a random selection within each cell; that is
what lets the cell ratio correct for unequal inclusion across cells.
"""

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import (
    IncompatibleMargins,
    NonConvergence,
    SpecMismatch,
    UnknownCategory,
    UnknownDomain,
    UnknownField,
)
from .registry import split_stratum, stratum_label
from .util import is_missing

FULL_CROSS = "full-cross"
MARGINS = "margins-only"


@dataclass(frozen=True)
class DomainSpec:
    """Ordered categorical dimensions, e.g. ``(("region", ("N", "S")), ("sex", ("F", "M")))``."""

    dimensions: tuple
    mode: str = FULL_CROSS

    def __post_init__(self):
        if self.mode not in (FULL_CROSS, MARGINS):
            raise ValueError(f"unknown mode {self.mode!r}")
        dims = tuple((str(n), tuple(str(c) for c in cats)) for n, cats in self.dimensions)
        if not dims:
            raise ValueError("a domain spec needs at least one dimension")
        for name, cats in dims:
            if not cats or len(set(cats)) != len(cats):
                raise ValueError(f"categories of {name!r} must be non-empty and distinct")
        if len({n for n, _ in dims}) != len(dims):
            raise ValueError("dimension names must be distinct")
        object.__setattr__(self, "dimensions", dims)

    @classmethod
    def from_frame(cls, frame, fields=None, mode=FULL_CROSS):
        """Categories observed in the frame for ``fields`` (default: all strata fields)."""
        margins = frame.margins()
        fields = tuple(fields or frame.strata_fields)
        missing = [f for f in fields if f not in margins]
        if missing:
            raise SpecMismatch(f"frame {frame.frame_id} has no strata field(s) {missing}")
        return cls(tuple((f, tuple(sorted(margins[f]))) for f in fields), mode)

    @property
    def names(self):
        return tuple(n for n, _ in self.dimensions)

    def categories(self, name):
        return dict(self.dimensions)[name]

    def cells(self):
        """Full-cross cell labels in lexicographic category order."""
        return [stratum_label(combo)
                for combo in itertools.product(*(cats for _, cats in self.dimensions))]

    def constraints(self):
        if self.mode == FULL_CROSS:
            return [(label,) for label in self.cells()]
        return [(name, c) for name, cats in self.dimensions for c in cats]

    def to_dict(self):
        return {"mode": self.mode, "dimensions": [[n, list(c)] for n, c in self.dimensions]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple((n, tuple(c)) for n, c in d["dimensions"]), d.get("mode", FULL_CROSS))


def domain_vector(row, spec):
    """0/1 indicator vector of a row (a mapping dimension -> category).

    Full-cross: one slot per cell, row-major over the dimensions.  Margins:
    one block per dimension, concatenated.
    """
    blocks = []
    for name, cats in spec.dimensions:
        value = row.get(name)
        if is_missing(value) or str(value) not in cats:
            raise UnknownCategory(f"{name}={value!r} is not one of {list(cats)}")
        blocks.append([1 if c == str(value) else 0 for c in cats])
    if spec.mode == MARGINS:
        return tuple(v for b in blocks for v in b)
    out = [1]
    for b in blocks:
        out = [x * y for x in out for y in b]
    return tuple(out)


def frame_field_index(frame, names):
    """Positions of ``names`` within the frame's strata fields."""
    idx = []
    for name in names:
        if name not in frame.strata_fields:
            raise SpecMismatch(f"frame {frame.frame_id} is not stratified by {name!r}")
        idx.append(frame.strata_fields.index(name))
    return idx


def frame_cell_counts(frame, spec):
    """N_d for every full-cross cell of ``spec`` (cells absent from the frame get 0)."""
    idx = frame_field_index(frame, spec.names)
    counts = {c: 0 for c in spec.cells()}
    for label, n in frame.stratum_counts.items():
        values = split_stratum(label)
        cell = stratum_label([values[i] for i in idx])
        counts[cell] = counts.get(cell, 0) + n
    return counts


def frame_margins(frame, spec):
    frame_field_index(frame, spec.names)
    margins = frame.margins()
    return {name: {c: margins[name].get(c, 0) for c in cats} for name, cats in spec.dimensions}


def row_domains(integrated, spec, frame=None):
    """Per-row dimension values, or ``None`` for rows outside the frame.

    Rows that reach the register take their values from the frame's strata
    for that SVID; other rows use their attached attributes.
    """
    out = []
    idx = frame_field_index(frame, spec.names) if frame is not None else None
    strata = frame.lookup if frame is not None else {}
    by_label = {}
    for svid, attrs in zip(integrated.svids(), integrated.attrs):
        if svid is not None:
            if frame is None:
                raise SpecMismatch("rows carry SVIDs but no frame was given")
            label = strata.get(svid)
            if label is None:
                out.append(None)
                continue
            dom = by_label.get(label)
            if dom is None:
                values = split_stratum(label)
                dom = by_label[label] = tuple(values[i] for i in idx)
            out.append(dom)
            continue
        values = []
        for name in spec.names:
            v = attrs.get(name)
            if is_missing(v):
                raise UnknownCategory(f"linked row has no value for {name!r}")
            values.append(str(v))
        out.append(tuple(values))
    return out


@dataclass(frozen=True)
class WeightSet:
    weights: dict
    spec: DomainSpec
    frame_ref: str
    method: str
    row_domains: dict = field(default_factory=dict, repr=False)
    diagnostics: dict = field(default_factory=dict)

    @property
    def converged(self):
        return self.diagnostics.get("converged", False)

    def positive(self):
        return {k: w for k, w in self.weights.items() if w > 0}

    def to_csv(self):
        buf = io.StringIO()
        buf.write(f"# method: {json.dumps(self.method)}\n")
        buf.write(f"# frame_ref: {json.dumps(self.frame_ref)}\n")
        buf.write(f"# spec: {json.dumps(self.spec.to_dict(), sort_keys=True)}\n")
        buf.write(f"# diagnostics: {json.dumps(self.diagnostics, sort_keys=True)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row_key", "weight", "weight_exact", "domain"])
        for key, wt in self.weights.items():
            exact = str(wt) if isinstance(wt, Fraction) else ""
            dom = self.row_domains.get(key)
            w.writerow([key, repr(float(wt)), exact, "" if dom is None else stratum_label(dom)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        header, body = {}, []
        for line in text.splitlines():
            if line.startswith("# "):
                k, _, v = line[2:].partition(": ")
                header[k] = json.loads(v)
            else:
                body.append(line)
        weights, domains = {}, {}
        for row in csv.DictReader(body):
            key = row["row_key"]
            weights[key] = Fraction(row["weight_exact"]) if row["weight_exact"] else float(row["weight"])
            domains[key] = split_stratum(row["domain"]) if row["domain"] else None
        return cls(weights, DomainSpec.from_dict(header["spec"]), header["frame_ref"],
                   header["method"], domains, header["diagnostics"])


def poststratify(frame, integrated, spec):
    """Cell weights ``N_d / n_d`` (exact fractions).

    Rows outside the frame, or in cells with ``N_d = 0``, get weight 0 and are
    listed as out of scope.  Cells with ``N_d > 0`` but no linked rows are
    reported as uncovered; the calibration equations cannot hold there.
    """
    if spec.mode != FULL_CROSS:
        raise SpecMismatch("post-stratification needs a full-cross spec")
    N = frame_cell_counts(frame, spec)
    keys = integrated.row_keys()
    domains = row_domains(integrated, spec, frame)
    names = {}
    labels = []
    for d in domains:
        if d is None:
            labels.append(None)
            continue
        lab = names.get(d)
        if lab is None:
            lab = names[d] = stratum_label(d)
        labels.append(lab)
    n = {}
    for lab in labels:
        if lab is not None and N.get(lab, 0) > 0:
            n[lab] = n.get(lab, 0) + 1
    cell_weight = {lab: Fraction(N[lab], m) for lab, m in n.items()}
    zero = Fraction(0)
    weights, out_of_scope = {}, []
    for key, lab in zip(keys, labels):
        w = cell_weight.get(lab)
        if w is None:
            weights[key] = zero
            out_of_scope.append(key)
        else:
            weights[key] = w
    uncovered = sorted(c for c, Nd in N.items() if Nd > 0 and c not in n)
    diagnostics = {
        "converged": not uncovered,
        "iterations": 0,
        "max_residual": max((N[c] for c in uncovered), default=0),
        "uncovered": uncovered,
        "out_of_scope": len(out_of_scope),
        "n_d": dict(sorted(n.items())),
        "N_d": dict(sorted(N.items())),
    }
    return WeightSet(weights, spec, frame.key, "poststratify",
                     dict(zip(keys, domains)), diagnostics)


def rake(frame_margins_, integrated, spec, tol=1e-6, max_iter=100, frame=None):
    """Iterative proportional fitting to one-way margins.

    ``frame_margins_`` is ``{dimension: {category: N}}`` (``None`` to take it
    from ``frame``).  Starting from unit weights, each sweep rescales every
    dimension's categories in turn to their margin; iteration stops once the
    largest absolute margin residual is at most ``tol``.  Raises
    ``IncompatibleMargins`` when margins cannot be met (inconsistent totals,
    a positive margin with no linked rows, or a stalled residual) and
    ``NonConvergence`` when ``max_iter`` sweeps are not enough.
    """
    if spec.mode != MARGINS:
        raise SpecMismatch("raking needs a margins-only spec")
    if frame_margins_ is None:
        if frame is None:
            raise SpecMismatch("rake needs margins or a frame")
        frame_margins_ = frame_margins(frame, spec)
    targets = []
    for name, cats in spec.dimensions:
        if name not in frame_margins_:
            raise SpecMismatch(f"no margin for {name!r}")
        m = frame_margins_[name]
        targets.append(np.array([float(m.get(c, 0)) for c in cats]))
    totals = [t.sum() for t in targets]
    if any(t <= 0 for t in totals) or max(totals) - min(totals) > tol:
        raise IncompatibleMargins(f"margin totals disagree or are not positive: {totals}")

    keys = integrated.row_keys()
    domains = row_domains(integrated, spec, frame)
    lookups = [{c: i for i, c in enumerate(cats)} for _, cats in spec.dimensions]
    inscope = []
    for d in domains:
        ok = d is not None and all(v in lk and t[lk[v]] > 0
                                   for v, lk, t in zip(d, lookups, targets))
        inscope.append(ok)
    rows = [d for d, ok in zip(domains, inscope) if ok]
    codes = [np.array([lk[d[j]] for d in rows], dtype=np.int64)
             for j, lk in enumerate(lookups)]
    for (name, cats), code, t in zip(spec.dimensions, codes, targets):
        support = np.bincount(code, minlength=len(cats))
        empty = [c for c, s, tt in zip(cats, support, t) if s == 0 and tt > 0]
        if empty:
            raise IncompatibleMargins(f"{name}: no linked rows for {empty}",
                                      {"iterations": 0, "uncovered": empty})

    w = np.ones(len(rows))

    def residuals():
        return [np.abs(np.bincount(code, weights=w, minlength=len(t)) - t)
                for code, t in zip(codes, targets)]

    history = []
    iterations = 0
    converged = False
    for iterations in range(1, max_iter + 1):
        for code, t in zip(codes, targets):
            sums = np.bincount(code, weights=w, minlength=len(t))
            w = w * (t / sums)[code]
        worst = max(float(r.max()) for r in residuals())
        history.append(worst)
        if worst <= tol:
            converged = True
            break
    diagnostics = {
        "converged": converged,
        "iterations": iterations,
        "max_residual": history[-1],
        "tol": tol,
        "out_of_scope": len(keys) - len(rows),
    }
    if not converged:
        mid = history[len(history) // 2]
        # too few sweeps to tell a stall from slow progress
        stalled = len(history) >= 10 and history[-1] > 0.5 * mid
        err = IncompatibleMargins if stalled else NonConvergence
        raise err(f"raking did not reach tol {tol} in {max_iter} sweeps "
                  f"(max residual {history[-1]:.3g})", diagnostics)
    weights = {}
    it = iter(w.tolist())
    for key, ok in zip(keys, inscope):
        weights[key] = next(it) if ok else 0.0
    return WeightSet(weights, spec, frame.key if frame is not None else "margins", "rake",
                     dict(zip(keys, domains)), diagnostics)


def _numeric(value):
    if isinstance(value, (int, float, Fraction)) and not isinstance(value, bool):
        return value
    text = str(value).strip()
    try:
        return int(text)
    except ValueError:
        return float(text)


def _in_domain(dom, spec, domain):
    if domain is None or domain == "all":
        return True
    if dom is None:
        return False
    if isinstance(domain, str):
        return stratum_label(dom) == domain
    return all(dom[spec.names.index(k)] == str(v) for k, v in domain.items())


def _check_domain(spec, domain):
    if domain is None or domain == "all":
        return
    if isinstance(domain, str):
        if spec.mode != FULL_CROSS or domain not in spec.cells():
            raise UnknownDomain(f"no cell {domain!r} in spec")
        return
    for k, v in domain.items():
        if k not in spec.names or str(v) not in spec.categories(k):
            raise UnknownDomain(f"{k}={v!r} is not in the domain spec")


def estimate_detail(weights, integrated, y_field, domain=None):
    """Weighted total plus bookkeeping.

    ``domain`` is ``None``/``"all"``, a full-cross cell label, or a mapping
    ``{dimension: category}``.  Rows with a missing ``y_field`` are left out
    and counted under ``n_missing_y``.
    """
    _check_domain(weights.spec, domain)
    if integrated.rows and not any(y_field in a for a in integrated.attrs):
        raise UnknownField(f"{y_field!r} is not attached to the integrated dataset")
    # y summed per distinct weight: exact when weights and y are rational
    exact_sums, float_terms, rational = {}, [], {}
    n_used = n_missing = 0
    wget, dget = weights.weights.get, weights.row_domains.get
    everything = domain is None or domain == "all"
    for key, attrs in zip(integrated.row_keys(), integrated.attrs):
        w = wget(key, 0)
        if not w or not (everything or _in_domain(dget(key), weights.spec, domain)):
            continue
        y = attrs.get(y_field)
        if is_missing(y):
            n_missing += 1
            continue
        y = _numeric(y)
        if type(y) is int or isinstance(y, Fraction):
            # hashing Fractions is slow; key on numerator/denominator, memoised
            # per weight object since cells share one
            wk = rational.get(id(w))
            if wk is None:
                wk = rational[id(w)] = ((w.numerator, w.denominator)
                                        if isinstance(w, (int, Fraction)) else False)
        else:
            wk = False
        if wk:
            exact_sums[wk] = exact_sums.get(wk, 0) + y
        else:
            float_terms.append(float(w) * float(y))
        n_used += 1
    exact = sum((Fraction(n, d) * s for (n, d), s in exact_sums.items()), Fraction(0))
    total = float(exact) + math.fsum(float_terms) if float_terms else float(exact)
    return {"estimate": total, "n_used": n_used, "n_missing_y": n_missing}


def estimate_total(weights, integrated, y_field, domain=None):
    """``sum of w_k * y_k`` over linked rows in ``domain``."""
    return estimate_detail(weights, integrated, y_field, domain)["estimate"]


def check_calibration(weights, integrated, frame, spec, tol=1e-6):
    """Residual ``|sum_A w_k x_k - frame total|`` for every calibration constraint."""
    if weights.spec != spec:
        raise SpecMismatch("weights were computed for a different domain spec")
    keys = integrated.row_keys()
    if spec.mode == FULL_CROSS:
        targets = frame_cell_counts(frame, spec)
        sums = {c: [] for c in targets}
        for key in keys:
            dom = weights.row_domains.get(key)
            w = weights.weights.get(key, 0)
            if dom is not None and w:
                sums.setdefault(stratum_label(dom), []).append(w)
        pairs = [((c,), targets.get(c, 0), sums.get(c, [])) for c in sorted(set(targets) | set(sums))]
    else:
        margins = frame_margins(frame, spec)
        sums = {(n, c): [] for n, cats in spec.dimensions for c in cats}
        for key in keys:
            dom = weights.row_domains.get(key)
            w = weights.weights.get(key, 0)
            if dom is None or not w:
                continue
            for name, v in zip(spec.names, dom):
                sums.setdefault((name, v), []).append(w)
        pairs = [(k, margins.get(k[0], {}).get(k[1], 0), v) for k, v in sums.items()]
    constraints = []
    for label, target, ws in pairs:
        if all(isinstance(w, Fraction) for w in ws):
            achieved = sum(ws, Fraction(0))
        else:
            achieved = math.fsum(float(w) for w in ws)
        resid = abs(achieved - target)
        constraints.append({"constraint": list(label), "target": target,
                            "achieved": float(achieved), "residual": float(resid),
                            "exact_zero": resid == 0})
    worst = max((c["residual"] for c in constraints), default=0.0)
    return {"constraints": constraints, "max_residual": worst,
            "tol": tol, "passed": worst <= tol}


def estimate_table(weights, integrated, frame, y_field):
    """Rows ``(domain, estimate, n_d, N_d, coverage)`` per cell plus the total."""
    spec = weights.spec
    if spec.mode == FULL_CROSS:
        domains = spec.cells()
        N = frame_cell_counts(frame, spec)
    else:
        domains = [f"{n}={c}" for n, cats in spec.dimensions for c in cats]
        margins = frame_margins(frame, spec)
        N = {f"{n}={c}": margins[n][c] for n, cats in spec.dimensions for c in cats}
    rows = []
    for d in domains:
        sel = d if spec.mode == FULL_CROSS else dict([d.split("=", 1)])
        det = estimate_detail(weights, integrated, y_field, sel)
        n_d = sum(1 for k, w in weights.weights.items()
                  if w and _in_domain(weights.row_domains.get(k), spec, sel))
        rows.append({"domain": d, "estimate": det["estimate"], "n_d": n_d, "N_d": N[d],
                     "coverage": n_d / N[d] if N[d] else None,
                     "n_missing_y": det["n_missing_y"]})
    det = estimate_detail(weights, integrated, y_field)
    n_all = sum(1 for w in weights.weights.values() if w)
    rows.append({"domain": "all", "estimate": det["estimate"], "n_d": n_all,
                 "N_d": frame.size, "coverage": n_all / frame.size if frame.size else None,
                 "n_missing_y": det["n_missing_y"]})
    return rows
