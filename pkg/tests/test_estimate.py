import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from oracles import ipf
from regisforge.errors import (
    IncompatibleMargins,
    NonConvergence,
    SpecMismatch,
    UnknownDomain,
    UnknownField,
)
from regisforge.estimate import (
    FULL_CROSS,
    MARGINS,
    DomainSpec,
    WeightSet,
    check_calibration,
    domain_vector,
    estimate_detail,
    estimate_table,
    estimate_total,
    poststratify,
    rake,
)
from regisforge.linkage import REGISTER, IntegratedDataset
from regisforge.registry import Frame

# (1,1) x2, (1,2), (2,1), (2,2) x2 against rows {1: 30, 2: 30}, cols {1: 40, 2: 20}
IPF_CELLS = [("1", "1"), ("1", "1"), ("1", "2"), ("2", "1"), ("2", "2"), ("2", "2")]
IPF_FROZEN = {("1", "1"): 12.192235935955921, ("1", "2"): 5.615528128088362,
              ("2", "1"): 15.615528128088158, ("2", "2"): 7.192235935955818}


def attr_dataset(cells, names=("r", "c"), ys=None):
    rows = tuple((f"k{i:03d}",) for i in range(len(cells)))
    attrs = []
    for i, cell in enumerate(cells):
        a = dict(zip(names, cell))
        if ys is not None:
            a["y"] = ys[i]
        attrs.append(a)
    return IntegratedDataset(("A",), rows, (), tuple(attrs))


def register_world(strata, linked, ys=None):
    """Frame over SVIDs 1..len(strata); ``linked`` lists the SVIDs reached."""
    frame = Frame.from_strata("f", "2020-12-31", ["region", "sex"],
                              {i + 1: lab for i, lab in enumerate(strata)})
    rows = tuple((f"a{s:04d}", str(s)) for s in sorted(linked))
    attrs = tuple({"y": (ys or {}).get(s, 1)} for s in sorted(linked))
    return frame, IntegratedDataset(("A", REGISTER), rows, (), attrs)


def test_domain_vector():
    spec = DomainSpec((("r", ("1", "2")), ("c", ("1", "2", "3"))))
    assert domain_vector({"r": "2", "c": "1"}, spec) == (0, 0, 0, 1, 0, 0)
    margins = DomainSpec(spec.dimensions, MARGINS)
    assert domain_vector({"r": "2", "c": "1"}, margins) == (0, 1, 1, 0, 0)


def test_spec_validation():
    with pytest.raises(ValueError):
        DomainSpec(())
    with pytest.raises(ValueError):
        DomainSpec((("r", ("1", "1")),))
    with pytest.raises(ValueError):
        DomainSpec((("r", ("1",)),), "bogus")


def test_ipf_frozen_values():
    spec = DomainSpec((("r", ("1", "2")), ("c", ("1", "2"))), MARGINS)
    ws = rake({"r": {"1": 30, "2": 30}, "c": {"1": 40, "2": 20}}, attr_dataset(IPF_CELLS), spec, tol=1e-11)
    got = list(ws.weights.values())
    for cell, w in zip(IPF_CELLS, got):
        assert w == pytest.approx(IPF_FROZEN[cell], abs=1e-9)
    assert sum(got) == pytest.approx(60)


def test_ipf_matches_oracle():
    margins = [{"1": 30, "2": 30}, {"1": 40, "2": 20}]
    oracle = ipf(IPF_CELLS, margins)
    for cell, w in zip(IPF_CELLS, oracle):
        assert w == pytest.approx(IPF_FROZEN[cell], abs=1e-9)


def test_proportional_margins_converge_fast():
    # sample proportional to the population: one or two sweeps suffice
    cells = [("1", "1")] * 2 + [("1", "2")] * 2 + [("2", "1")] + [("2", "2")]
    spec = DomainSpec((("r", ("1", "2")), ("c", ("1", "2"))), MARGINS)
    ws = rake({"r": {"1": 40, "2": 20}, "c": {"1": 30, "2": 30}}, attr_dataset(cells), spec)
    assert ws.diagnostics["iterations"] <= 2
    assert set(round(w, 9) for w in ws.weights.values()) == {10.0}


def test_rake_errors():
    spec = DomainSpec((("r", ("1", "2")), ("c", ("1", "2"))), MARGINS)
    data = attr_dataset(IPF_CELLS)
    with pytest.raises(IncompatibleMargins):
        rake({"r": {"1": 30, "2": 30}, "c": {"1": 40, "2": 30}}, data, spec)
    with pytest.raises(IncompatibleMargins):
        rake({"r": {"1": 30, "2": 30}, "c": {"1": 40, "2": 20}},
             attr_dataset([("1", "1"), ("2", "1")]), spec)
    with pytest.raises(NonConvergence):
        rake({"r": {"1": 30, "2": 30}, "c": {"1": 40, "2": 20}}, data, spec, tol=1e-12, max_iter=2)
    with pytest.raises(SpecMismatch):
        rake({}, data, DomainSpec(spec.dimensions, FULL_CROSS))
    # structurally unattainable: (1,*) only in column 1, yet row 1 exceeds column 1
    cells = [("1", "1"), ("2", "1"), ("2", "2")]
    with pytest.raises(IncompatibleMargins):
        rake({"r": {"1": 50, "2": 10}, "c": {"1": 30, "2": 30}}, attr_dataset(cells), spec, max_iter=200)


def test_poststratify_exact_zero_residuals():
    strata = ["N|F"] * 7 + ["N|M"] * 5 + ["S|F"] * 3 + ["S|M"] * 11
    linked = [1, 2, 3, 8, 13, 14, 16, 17, 18, 19]
    frame, data = register_world(strata, linked)
    spec = DomainSpec.from_frame(frame)
    ws = poststratify(frame, data, spec)
    assert ws.weights["a0001|1"] == Fraction(7, 3)
    chk = check_calibration(ws, data, frame, spec)
    assert chk["max_residual"] == 0 and all(c["exact_zero"] for c in chk["constraints"])
    # y = 1 recovers the frame count exactly
    assert estimate_total(ws, data, "y") == frame.size
    assert estimate_total(ws, data, "y", "S|M") == 11
    assert estimate_total(ws, data, "y", {"region": "N"}) == 12


def test_poststratify_uncovered_and_out_of_scope():
    frame, data = register_world(["N|F", "N|M", "S|F"], [1, 2])
    data = IntegratedDataset(data.sources, data.rows + (("a9999", "9999"),), (), data.attrs + ({"y": 1},))
    ws = poststratify(frame, data, DomainSpec.from_frame(frame))
    assert ws.diagnostics["uncovered"] == ["S|F"] and not ws.converged
    assert ws.weights["a9999|9999"] == 0 and ws.diagnostics["out_of_scope"] == 1


def test_estimate_missing_y_and_errors():
    frame, data = register_world(["N|F"] * 4, [1, 2, 3], {1: 10, 2: None, 3: "5"})
    ws = poststratify(frame, data, DomainSpec.from_frame(frame))
    det = estimate_detail(ws, data, "y")
    assert det == {"estimate": 20.0, "n_used": 2, "n_missing_y": 1}
    with pytest.raises(UnknownDomain):
        estimate_total(ws, data, "y", "X|Y")
    with pytest.raises(UnknownField):
        estimate_total(ws, data, "income")
    table = estimate_table(ws, data, frame, "y")
    assert table[0]["N_d"] == 4 and table[-1]["domain"] == "all"
    assert table[-1]["n_missing_y"] == 1


def test_weightset_csv_roundtrip():
    frame, data = register_world(["N|F", "N|F", "S|M"], [1, 3])
    ws = poststratify(frame, data, DomainSpec.from_frame(frame))
    back = WeightSet.from_csv(ws.to_csv())
    assert back.weights == ws.weights and back.spec == ws.spec
    assert back.diagnostics == ws.diagnostics


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_rake_against_oracle_random(seed):
    rnd = random.Random(seed)
    cats = ("a", "b", "c")
    cells = [(x, y) for x in cats for y in cats]
    rows = cells + [rnd.choice(cells) for _ in range(rnd.randrange(0, 20))]
    true_w = [rnd.uniform(0.5, 5) for _ in rows]
    margins = []
    for j in range(2):
        m = {c: 0.0 for c in cats}
        for r, w in zip(rows, true_w):
            m[r[j]] += w
        margins.append(m)
    spec = DomainSpec((("r", cats), ("c", cats)), MARGINS)
    ws = rake({"r": margins[0], "c": margins[1]}, attr_dataset(rows), spec, tol=1e-10, max_iter=5000)
    for got, want in zip(ws.weights.values(), ipf(rows, margins, tol=1e-10)):
        assert got == pytest.approx(want, rel=1e-6, abs=1e-6)
