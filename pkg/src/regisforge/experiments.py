"""Monte Carlo studies on synthetic populations, and the path-order fixture.

``bias_correction_mc`` links two sources on exact keys, post-stratifies the
linked rows to the frame and compares the calibrated total with the naive
scale-up ``N * mean(y)``.  Each replication also records per-stratum
coverage of both sources, of their integration, and of the integration
extended by a third source.
"""

import gc
import time
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import idforge
from .estimate import DomainSpec, estimate_total, poststratify
from .linkage import REGISTER, LinkageRelation, build_blocked_linkage, build_exact_linkage, step_through
from .quality import linked_coverage_report
from .registry import AdminRegister, build_frame, init_entity_register
from .synth import SyntheticScenario, draw_inclusion, draw_population, population_key
from .timeline import group_events, read_events_csv


def default_scenario(n=100_000):
    """Four equal strata; inclusion rates 0.2-0.9 aligned with income so the naive estimate is biased."""
    labels = ["N|F", "N|M", "S|F", "S|M"]
    return SyntheticScenario(
        strata={"region": ("N", "S"), "sex": ("F", "M")},
        sizes={lab: n // 4 + (i < n % 4) for i, lab in enumerate(labels)},
        y_means={"N|F": 60000, "N|M": 45000, "S|F": 30000, "S|M": 20000},
        inclusion={
            "A": {"N|F": 0.9, "N|M": 0.7, "S|F": 0.4, "S|M": 0.2},
            "B": {"N|F": 0.8, "N|M": 0.6, "S|F": 0.3, "S|M": 0.2},
            "C": {"N|F": 0.5, "N|M": 0.9, "S|F": 0.7, "S|M": 0.3},
        },
    )


@dataclass
class MonteCarloResult:
    true_total: int
    calibrated: list
    naive: list
    coverage_checks: int = 0
    coverage_violations: int = 0
    third_source_increases: int = 0
    seconds: float = 0.0
    per_rep_coverage: list = field(default_factory=list, repr=False)

    @property
    def calibrated_mean_rel_error(self):
        """Mean over replications of ``|estimate - T| / T``."""
        return float(np.mean(np.abs(np.array(self.calibrated) - self.true_total)) / self.true_total)

    @property
    def calibrated_rel_bias(self):
        return abs(float(np.mean(self.calibrated)) - self.true_total) / self.true_total

    @property
    def naive_rel_bias(self):
        return abs(float(np.mean(self.naive)) - self.true_total) / self.true_total

    def summary(self):
        est = bool(self.calibrated)
        return {
            "replications": len(self.per_rep_coverage),
            "true_total": self.true_total,
            "calibrated_mean_rel_error": self.calibrated_mean_rel_error if est else None,
            "calibrated_rel_bias": self.calibrated_rel_bias if est else None,
            "naive_rel_bias": self.naive_rel_bias if est else None,
            "coverage_checks": self.coverage_checks,
            "coverage_violations": self.coverage_violations,
            "third_source_increases": self.third_source_increases,
            "seconds": round(self.seconds, 2),
        }


class SyntheticWorld:
    """A population register and frame built once, reused by every replication."""

    def __init__(self, scenario, seed=0):
        self.scenario = scenario
        self.pop = draw_population(scenario, np.random.default_rng(seed))
        dims = list(scenario.strata)
        values = [lab.split("|") for lab in self.pop.labels]
        self.keys = [population_key(u) for u in self.pop.uid]

        admin = AdminRegister("POP")
        gen = idforge.IdGenerator()
        for key, s in zip(self.keys, self.pop.stratum):
            attrs = dict(zip(dims, values[s]))
            attrs["uid"] = key
            admin.ingest_transaction(gen, key, attrs, "2020-01-01")
        self.register = init_entity_register([admin])
        self.frame = build_frame(self.register, None, "2020-12-31", dims, "synthetic")
        self.spec = DomainSpec.from_frame(self.frame)
        svids = [idforge.render_svid(admin.records[k].svid) for k in self.keys]
        register_side = (REGISTER, {s: {"uid": k} for k, s in zip(self.keys, svids)})
        # uids are unique on both sides, so the exact linkage of any source
        # to the register is this relation restricted to the source's keys
        self.to_register = build_exact_linkage(
            ("POP", {k: {} for k in self.keys}), register_side, ("entity_key", "uid")).left_to_right()
        self.key_to_int = {k: int(s) for k, s in self.to_register.items()}
        self.y_profiles = {s: {"y": int(y)} for s, y in zip(svids, self.pop.y)}
        self.true_total = int(self.pop.y.sum())

    def draw_source(self, tag, rng):
        inc = draw_inclusion(self.scenario, self.pop, tag, rng)
        keys = [self.keys[i] for i in np.flatnonzero(inc)]
        return keys, (tag, {k: {} for k in keys})

    def register_link(self, tag, keys):
        # keys come out of draw_source already sorted
        pairs = tuple(zip(keys, map(self.to_register.__getitem__, keys)))
        return LinkageRelation(tag, REGISTER, pairs, {"kind": "exact", "left_field": "entity_key",
                                                      "right_field": "uid"})

    def replicate(self, rng, third=None, estimate=True):
        """One replication; sources are drawn from ``rng`` in the order A, B, third."""
        ka, a = self.draw_source("A", rng)
        kb, b = self.draw_source("B", rng)
        ab = build_exact_linkage(a, b, ("entity_key", "entity_key"))
        b_reg = self.register_link("B", kb)
        integ = step_through([ab, b_reg])
        out = {"integrated": integ, "keys": {"A": ka, "B": kb}}
        if estimate:
            integ = integ.with_attributes(REGISTER, self.y_profiles, ["y"])
            weights = poststratify(self.frame, integ, self.spec)
            out["calibrated"] = estimate_total(weights, integ, "y")
            ys = [row["y"] for row in integ.attrs]
            out["naive"] = self.frame.size * float(np.mean(ys)) if ys else 0.0

        sources = {"A": (ka, self.key_to_int), "B": (kb, self.key_to_int)}
        out["two"] = linked_coverage_report(sources, integ, self.frame)
        if third:
            kc, c = self.draw_source(third, rng)
            out["keys"][third] = kc
            bc = build_exact_linkage(b, c, ("entity_key", "entity_key"))
            c_reg = self.register_link(third, kc)
            integ3 = step_through([ab, bc, c_reg])
            sources[third] = (kc, self.key_to_int)
            out["three"] = linked_coverage_report(sources, integ3, self.frame)
        return out


def replication_rngs(seed, reps):
    """Independent per-replication generators, so adding a source never shifts the others' draws."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(reps)]


def bias_correction_mc(n=100_000, reps=200, seed=20240601, scenario=None, third=None,
                       estimate=True, world=None):
    start = time.perf_counter()
    world = world or SyntheticWorld(scenario or default_scenario(n), seed)
    res = MonteCarloResult(world.true_total, [], [])
    # the world's objects live for the whole run, and replications make no
    # reference cycles worth chasing: pause the cyclic collector, sweep now and then
    gc.collect()
    gc.freeze()
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i, rng in enumerate(replication_rngs(seed + 1, reps), 1):
            r = world.replicate(rng, third, estimate)
            _tally(res, r)
            if i % 20 == 0:
                gc.collect()
    finally:
        if was_enabled:
            gc.enable()
        gc.unfreeze()
    res.seconds = time.perf_counter() - start
    return res


def _tally(res, r):
    if "calibrated" in r:
        res.calibrated.append(r["calibrated"])
        res.naive.append(r["naive"])
    cov = {}
    for label, b in r["two"]["intersection_bound"].items():
        res.coverage_checks += 1
        res.coverage_violations += not b["holds"]
        cov[label] = b["integrated"]
    if "three" in r:
        for label, b in r["three"]["intersection_bound"].items():
            res.coverage_checks += 1
            res.coverage_violations += not b["holds"]
            res.third_source_increases += b["integrated"] > cov[label]
    res.per_rep_coverage.append(cov)


def load_path_fixture():
    """The shipped three-source fixture (11 records) as timeline databases."""
    out = {}
    for tag in "ABC":
        path = resources.files("regisforge") / "data" / f"path_{tag}.csv"
        with resources.as_file(path) as p:
            out[tag] = group_events(tag, read_events_csv(p))
    return out


def path_rows(integrated, order=("A", "B", "C")):
    """Integrated rows as key tuples in a fixed source order, for comparing paths."""
    idx = [integrated.sources.index(s) for s in order]
    return sorted(tuple(r[i] for i in idx) for r in integrated.rows)


def path_dependence(method="blocked", threshold=0.6):
    """Row sets of the (A,B,C) and (A,C,B) paths over the fixture."""
    db = load_path_fixture()

    def rel(x, y):
        if method == "exact":
            return build_exact_linkage(db[x], db[y], ("uid", "uid"))
        return build_blocked_linkage(db[x], db[y], ["sex"], ["name"], threshold)

    abc = step_through([rel("A", "B"), rel("B", "C")])
    acb = step_through([rel("A", "C"), rel("C", "B")])
    return path_rows(abc), path_rows(acb)
