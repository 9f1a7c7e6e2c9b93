import datetime as dt
import warnings

import pytest
from hypothesis import given, settings, strategies as st

from oracles import component_minima
from regisforge.errors import (
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
from regisforge.idforge import IdGenerator, make_svid
from regisforge.registry import (
    AdminRegister,
    EntityRecord,
    EntityRegister,
    Frame,
    Rule,
    RuleSet,
    build_frame,
    init_entity_register,
    namespace_source_key,
    split_source_key,
)


def sv(k):
    """SV_IDk: the k-th ID drawn from a fresh generator."""
    return make_svid(10**13 + k - 1)


def example_registers():
    gen = IdGenerator()
    regs = []
    for src in ("IRD", "IMM", "OTH"):
        admin = AdminRegister(src)
        for i in range(1, 4):
            admin.ingest_transaction(gen, f"{src}_{i:03d}", {"region": "N"}, "2019-01-01")
        regs.append(admin)
    return regs


def table(reg):
    rows = []
    for r in reg:
        rows.append((r.birth_svid, r.birth_source, r.source_alias.get("IRD"),
                     r.source_alias.get("IMM"), r.source_alias.get("OTH"), r.current_id))
    return rows


# -- admin registers ---------------------------------------------------------

def test_figure2_duplicates_alias_to_first():
    gen = IdGenerator()
    admin = AdminRegister("IRD")
    recs = [admin.ingest_transaction(gen, f"IRD_00{i}", {}, "2019-01-01") for i in (1, 2, 3)]
    assert [r.svid for r in recs] == [sv(1), sv(2), sv(3)]
    assert all(r.alias_id == r.svid for r in recs)
    admin.mark_source_duplicates([sv(1), sv(2), sv(3)])
    assert [admin.lookup(f"IRD_00{i}").alias_id for i in (1, 2, 3)] == [sv(1)] * 3
    assert [r.svid for r in admin.representatives()] == [sv(1)]


def test_marking_in_two_steps():
    gen = IdGenerator()
    admin = AdminRegister("IRD")
    for i in (1, 2, 3):
        admin.ingest_transaction(gen, f"K{i}", {}, "2019-01-01")
    admin.mark_source_duplicates([sv(2), sv(3)])
    assert admin.record(sv(3)).alias_id == sv(2)
    admin.mark_source_duplicates([sv(1), sv(2)])
    assert {admin.record(sv(k)).alias_id for k in (1, 2, 3)} == {sv(1)}


def test_repeat_key_reuses_svid_and_widens_span():
    gen = IdGenerator()
    admin = AdminRegister("IRD")
    a = admin.ingest_transaction(gen, "K", {"x": "1"}, "2019-05-01")
    b = admin.ingest_transaction(gen, "K", {"x": "2"}, "2018-01-01")
    assert a is b and b.svid == sv(1)
    assert (b.first_seen, b.last_seen) == (dt.date(2018, 1, 1), dt.date(2019, 5, 1))
    assert b.attrs["x"] == "2"
    assert gen.state.next_seq == 10**13 + 1


def test_birth_rejection_consumes_no_id():
    gen = IdGenerator()
    admin = AdminRegister("IRD", RuleSet((Rule("nin", "present"),)))
    with pytest.raises(BirthRejected):
        admin.ingest_transaction(gen, "K1", {}, "2019-01-01")
    assert admin.rejected == [{"source_key": "K1", "date": "2019-01-01"}]
    rec = admin.ingest_transaction(gen, "K2", {"nin": "N2"}, "2019-01-01")
    assert rec.svid == sv(1)


def test_unknown_svid_in_duplicates():
    admin = AdminRegister("IRD")
    with pytest.raises(UnknownSvid):
        admin.mark_source_duplicates([sv(1), sv(2)])


def test_admin_roundtrip_last_line_wins(tmp_path):
    gen = IdGenerator()
    admin = AdminRegister("IRD")
    for i in (1, 2, 3):
        admin.ingest_transaction(gen, f"K{i}", {"i": i}, "2019-01-01")
    admin.mark_source_duplicates([sv(1), sv(3)])
    path = tmp_path / "IRD.ndjson"
    admin.save(path)
    back = AdminRegister.load("IRD", path)
    assert [r.to_json() for r in back] == [r.to_json() for r in admin]
    lines = admin.to_lines()
    stale = dict(lines[0], attrs={"i": 99})
    again = AdminRegister.from_lines("IRD", [stale] + lines)
    assert again.lookup("K1").attrs == {"i": 1}


def test_admin_load_detects_bad_alias():
    gen = IdGenerator()
    admin = AdminRegister("IRD")
    for i in (1, 2):
        admin.ingest_transaction(gen, f"K{i}", {}, "2019-01-01")
    lines = admin.to_lines()
    lines[0] = dict(lines[0], alias_id=str(sv(2)))
    with pytest.raises(InvariantViolation):
        AdminRegister.from_lines("IRD", lines)


@given(st.text(min_size=0, max_size=8), st.text(max_size=6), st.text(max_size=6))
def test_namespace_roundtrip(raw, inst, period):
    assert split_source_key(namespace_source_key(raw, inst, period)) == (raw, inst, period)


def test_namespace_separates_institutions():
    assert namespace_source_key("K1", "HOSP_A", "2019") != namespace_source_key("K1", "HOSP_B", "2019")
    assert namespace_source_key("K1", "HOSP_A", "2019") == "K1:HOSP_A:2019"


# -- entity register ---------------------------------------------------------

def test_example_initial_table():
    reg = init_entity_register(example_registers())
    assert table(reg) == [
        (sv(1), "IRD", sv(1), None, None, sv(1)),
        (sv(2), "IRD", sv(2), None, None, sv(2)),
        (sv(3), "IRD", sv(3), None, None, sv(3)),
        (sv(4), "IMM", None, sv(4), None, sv(4)),
        (sv(5), "IMM", None, sv(5), None, sv(5)),
        (sv(6), "IMM", None, sv(6), None, sv(6)),
        (sv(7), "OTH", None, None, sv(7), sv(7)),
        (sv(8), "OTH", None, None, sv(8), sv(8)),
        (sv(9), "OTH", None, None, sv(9), sv(9)),
    ]


def test_example_link_table():
    reg = init_entity_register(example_registers())
    reg.link_entities(sv(3), sv(5))
    rows = table(reg)
    assert rows[2] == (sv(3), "IRD", sv(3), sv(5), None, sv(3))
    assert rows[4] == (sv(5), "IMM", sv(3), sv(5), None, sv(3))
    assert [r for i, r in enumerate(rows) if i not in (2, 4)] == \
        [r for i, r in enumerate(table(init_entity_register(example_registers()))) if i not in (2, 4)]
    assert reg.resolve_current_id(sv(5)) == sv(3)
    assert len(reg.unique_view()) == 8


def test_duplicates_contribute_representatives_only():
    regs = example_registers()
    regs[0].mark_source_duplicates([sv(1), sv(2)])
    reg = init_entity_register(regs)
    assert len(reg) == 8 and sv(2) not in reg.records


def test_conflicting_alias_is_atomic():
    reg = init_entity_register(example_registers())
    reg.link_entities(sv(3), sv(5))
    before = [r.to_json() for r in reg]
    with pytest.raises(ConflictingAlias):
        reg.link_entities(sv(3), sv(6))
    assert [r.to_json() for r in reg] == before


def test_link_chain_minimum():
    reg = init_entity_register(example_registers())
    reg.link_entities(sv(1), sv(4))
    reg.link_entities(sv(4), sv(7))
    assert {reg.resolve_current_id(sv(k)) for k in (1, 4, 7)} == {sv(1)}
    assert reg.component(sv(7)) == [sv(1), sv(4), sv(7)]


def test_same_source_link_merges_components_only():
    reg = init_entity_register(example_registers())
    reg.link_entities(sv(1), sv(2))
    assert reg[sv(2)].current_id == sv(1)
    assert reg[sv(2)].source_alias == {"IRD": sv(2)}


def test_duplicate_birth():
    reg = EntityRegister(["IRD"])
    rec = EntityRecord(sv(1), "IRD", {"IRD": sv(1)}, sv(1))
    reg.add(rec)
    with pytest.raises(DuplicateBirth):
        reg.add(EntityRecord(sv(1), "IRD", {"IRD": sv(1)}, sv(1)))


def test_register_roundtrip_and_stale_check(tmp_path):
    reg = init_entity_register(example_registers())
    reg.link_entities(sv(3), sv(5))
    path = tmp_path / "entity.ndjson"
    reg.save(path)
    back = EntityRegister.load(path, reg.sources)
    assert table(back) == table(reg)
    lines = reg.to_lines()
    lines[4] = dict(lines[4], current_id=str(sv(5)))
    with pytest.raises(InvariantViolation):
        EntityRegister.from_lines(lines)


@st.composite
def link_scripts(draw):
    n = draw(st.integers(2, 30))
    edges = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=40))
    return n, edges


@settings(max_examples=60, deadline=None)
@given(link_scripts())
def test_current_id_is_component_minimum(script):
    n, edges = script
    reg = EntityRegister(["S"])
    for i in range(n):
        s = sv(i + 1)
        reg.add(EntityRecord(s, "S", {"S": s}, s))
    for a, b in edges:
        reg.link_entities(sv(a + 1), sv(b + 1))
    expected = component_minima([sv(i + 1) for i in range(n)],
                                [(sv(a + 1), sv(b + 1)) for a, b in edges])
    for s, low in expected.items():
        assert reg.resolve_current_id(s) == low == reg[s].current_id
    assert len(reg.unique_view()) == len(set(expected.values()))


# -- hierarchy ---------------------------------------------------------------

def business_register():
    gen = IdGenerator()
    ent, loc = AdminRegister("ENT"), AdminRegister("LOC")
    ent.ingest_transaction(gen, "E1", {}, "2019-01-01")
    loc.ingest_transaction(gen, "L1", {}, "2019-01-01")
    loc.ingest_transaction(gen, "L2", {}, "2019-01-01")
    return init_entity_register([ent, loc], {"ENT": "enterprise", "LOC": "location"},
                                {"location": "enterprise"})


def test_hierarchy_rows():
    reg = business_register()
    reg.link_child_to_parent(sv(2), sv(1))
    rows = reg.hierarchy_table("enterprise", "location")
    assert rows == [(sv(1), sv(1), sv(1)), (sv(2), sv(1), sv(2))]


def test_hierarchy_type_mismatch():
    reg = business_register()
    with pytest.raises(TypeMismatch):
        reg.link_child_to_parent(sv(1), sv(2))
    with pytest.raises(TypeMismatch):
        reg.link_child_to_parent(sv(2), sv(3))


def test_hierarchy_cycle():
    gen = IdGenerator()
    a = AdminRegister("ORG")
    for k in ("A", "B"):
        a.ingest_transaction(gen, k, {}, "2019-01-01")
    reg = init_entity_register([a], {"ORG": "unit"}, {"unit": "unit"})
    reg.link_child_to_parent(sv(2), sv(1))
    with pytest.raises(CycleDetected):
        reg.link_child_to_parent(sv(1), sv(2))


# -- rules and frames --------------------------------------------------------

@pytest.mark.parametrize("rule,value,expected", [
    (Rule("x", "eq", "A"), "A", True),
    (Rule("x", "ne", "A"), "A", False),
    (Rule("x", "in", ("A", "B")), "B", True),
    (Rule("x", "not_in", ("A", "B")), "C", True),
    (Rule("x", "gt", 5), "10", True),
    (Rule("x", "le", 5), "10", False),
    (Rule("x", "present"), "", False),
    (Rule("x", "missing"), None, True),
    (Rule("x", "eq", "A"), None, False),
])
def test_rule_ops(rule, value, expected):
    assert rule.evaluate(lambda f: value) is expected


def test_rule_span_ops():
    span = (dt.date(2015, 3, 1), dt.date(2017, 6, 30))
    assert Rule("", "active_overlaps", 2016).evaluate(None, span)
    assert not Rule("", "active_overlaps", 2018).evaluate(None, span)
    assert Rule("", "active_on", "2017-06-30").evaluate(None, span)
    with pytest.raises(ValueError):
        Rule("x", "bogus")


def test_ruleset_order_irrelevant():
    r1 = RuleSet((Rule("a", "eq", "1"), Rule("b", "present")))
    r2 = RuleSet(tuple(reversed(r1.rules)))
    for attrs in ({"a": "1", "b": "x"}, {"a": "1"}, {"b": "x"}, {}):
        assert r1.accepts(attrs.get) == r2.accepts(attrs.get)


def frame_register():
    gen = IdGenerator()
    regs = []
    data = {"IRD": [("N", "F", "2019-01-01"), ("S", "M", "2010-01-01"), ("N", "M", "2019-01-01")],
            "IMM": [("S", "F", "2019-01-01"), ("N", "M", "2019-01-01"), ("", "F", "2021-06-01")]}
    for src, rows in data.items():
        admin = AdminRegister(src)
        for i, (region, sex, day) in enumerate(rows):
            attrs = {"sex": sex}
            if region:
                attrs["region"] = region
            admin.ingest_transaction(gen, f"{src}{i}", attrs, day)
        regs.append(admin)
    return init_entity_register(regs)


def test_frame_pass_all_over_example_register():
    reg = init_entity_register(example_registers())
    reg.link_entities(sv(3), sv(5))
    fr = build_frame(reg, RuleSet(), "2020-12-31", ["region"])
    assert fr.size == 8 and dict(fr.stratum_counts) == {"N": 8}


def test_frame_retention_and_as_of():
    reg = frame_register()
    fr = build_frame(reg, RuleSet(retention_years=5), "2020-12-31", ["region", "sex"], "persons")
    # the 2010-only entity is outside the window; the 2021 entity is not yet born
    assert fr.size == 4
    assert dict(fr.stratum_counts) == {"N|F": 1, "N|M": 2, "S|F": 1}
    assert fr.key == "persons@2020-12-31"


def test_frame_missing_stratum_is_na():
    reg = frame_register()
    fr = build_frame(reg, None, "2021-12-31", ["region"])
    assert fr.strata[sv(6)] == "NA"


def test_frame_unknown_attribute():
    with pytest.raises(UnknownStrataAttribute):
        build_frame(frame_register(), None, "2020-12-31", ["income"])


def test_empty_frame_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fr = build_frame(frame_register(), RuleSet((Rule("region", "eq", "X"),)), "2020-12-31", ["sex"])
    assert fr.size == 0 and caught


def test_frame_uses_component_span_and_attributes():
    reg = frame_register()
    # the out-of-window IRD entity linked to a recent IMM one is back in scope
    reg.link_entities(sv(2), sv(4))
    fr = build_frame(reg, RuleSet(retention_years=5), "2020-12-31", ["region"])
    assert sv(2) in fr.members and sv(4) not in fr.members


def test_frame_immutable_and_write_once(tmp_path):
    fr = build_frame(frame_register(), None, "2020-12-31", ["sex"], "f")
    with pytest.raises(TypeError):
        fr.strata[sv(1)] = "X"
    path = fr.save(tmp_path)
    assert fr.save(tmp_path) == path
    assert Frame.load(path) == fr
    other = Frame.from_strata("f", "2020-12-31", ["sex"], {sv(1): "F"})
    with pytest.raises(FrameExists):
        other.save(tmp_path)
