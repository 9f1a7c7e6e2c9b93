import csv

import numpy as np
import pytest

from regisforge.errors import ConfigInvalid
from regisforge.synth import SyntheticScenario, draw_inclusion, draw_population, write_scenario


def scenario():
    return SyntheticScenario.from_config({
        "population": 1001,
        "inclusion": {"X": {"N|F": 1, "N|M": 0, "S|F": 0.5, "S|M": 0.5}},
        "y_source": "X", "missing_rate": 0.1})


def test_population_sizes():
    sc = scenario()
    assert sc.size == 1001 and sorted(sc.sizes.values()) == [250, 250, 250, 251]
    pop = draw_population(sc, np.random.default_rng(0))
    assert len(pop) == 1001 and (pop.y >= 1).all()
    assert pop.true_totals()["all"] == int(pop.y.sum())


def test_inclusion_follows_strata():
    sc = scenario()
    pop = draw_population(sc, np.random.default_rng(0))
    inc = draw_inclusion(sc, pop, "X", np.random.default_rng(1))
    labels = np.array(pop.labels)[pop.stratum]
    assert inc[labels == "N|F"].all() and not inc[labels == "N|M"].any()


def test_write_scenario_deterministic(tmp_path):
    a = write_scenario(scenario(), 5, tmp_path / "a")
    b = write_scenario(scenario(), 5, tmp_path / "b")
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    with open(tmp_path / "a" / "X.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {"entity_key", "event_date", "uid", "region", "sex", "income"} <= set(rows[0])
    assert any(r["region"] == "" for r in rows)


@pytest.mark.parametrize("bad", [
    {"inclusion": {"X": {"N|F": 2, "N|M": 0, "S|F": 0, "S|M": 0}}},
    {"inclusion": {"X": {"N|F": 1}}},
    {"sizes": {"N|F": 1}},
    {"missing_rate": 1.0},
])
def test_invalid_scenarios(bad):
    with pytest.raises(ConfigInvalid):
        SyntheticScenario.from_config(bad)
