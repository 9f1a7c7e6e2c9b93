"""Seeded synthetic populations for exercising the pipeline.

Stratum attributes are drawn first; each source then includes every entity
by an independent coin flip whose probability depends only on the entity's
stratum.  Inclusion is therefore completely random within a stratum, which
is the regime under which cell calibration removes selection bias.
"""

import csv
import datetime as dt
import io
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigInvalid
from .registry import stratum_label
from .util import atomic_write_text

POPULATION_SOURCE = "POP"


@dataclass
class SyntheticScenario:
    """Population, strata and per-source inclusion probabilities.

    ``sizes`` maps stratum label -> number of entities; ``inclusion`` maps
    source tag -> {stratum label: probability}; ``y_means`` gives the mean
    of the study variable ``income`` per stratum.
    """

    strata: dict = field(default_factory=lambda: {"region": ("N", "S"), "sex": ("F", "M")})
    sizes: dict = None
    inclusion: dict = field(default_factory=dict)
    y_means: dict = None
    y_cv: float = 0.25
    y_source: str = None
    missing_rate: float = 0.0
    start_year: int = 2015
    end_year: int = 2020

    def __post_init__(self):
        self.strata = {k: tuple(str(c) for c in v) for k, v in self.strata.items()}
        labels = self.labels
        if self.sizes is None:
            self.sizes = {lab: 250 for lab in labels}
        if self.y_means is None:
            self.y_means = {lab: 30000 + 10000 * i for i, lab in enumerate(labels)}
        for what, table in (("sizes", self.sizes), ("y_means", self.y_means)):
            if set(table) != set(labels):
                raise ConfigInvalid(f"synth {what} must cover strata {labels}")
        for src, probs in self.inclusion.items():
            if set(probs) != set(labels):
                raise ConfigInvalid(f"synth inclusion for {src} must cover strata {labels}")
            for p in probs.values():
                if not 0 <= float(p) <= 1:
                    raise ConfigInvalid(f"synth inclusion probability {p} outside [0, 1]")
        if not 0 <= self.missing_rate < 1:
            raise ConfigInvalid("synth missing_rate must be in [0, 1)")

    @property
    def labels(self):
        return [stratum_label(c) for c in itertools.product(*self.strata.values())]

    @property
    def size(self):
        return sum(self.sizes.values())

    @classmethod
    def from_config(cls, d):
        keys = ("strata", "sizes", "inclusion", "y_means", "y_cv", "y_source",
                "missing_rate", "start_year", "end_year")
        kw = {k: d[k] for k in keys if k in d}
        if "population" in d and "sizes" not in d:
            strata = cls(strata=kw.get("strata", cls().strata)).labels
            n, k = int(d["population"]), len(strata)
            kw["sizes"] = {lab: n // k + (i < n % k) for i, lab in enumerate(strata)}
        return cls(**kw)


@dataclass
class Population:
    uid: np.ndarray
    stratum: np.ndarray   # index into scenario.labels
    y: np.ndarray
    labels: list

    def __len__(self):
        return len(self.uid)

    def true_totals(self):
        out = {lab: int(self.y[self.stratum == i].sum()) for i, lab in enumerate(self.labels)}
        out["all"] = int(self.y.sum())
        return out


def draw_population(scenario, rng):
    """Stratum and income for every entity; income is a positive integer."""
    labels = scenario.labels
    stratum = np.concatenate([np.full(scenario.sizes[lab], i, dtype=np.int64)
                              for i, lab in enumerate(labels)])
    means = np.array([float(scenario.y_means[lab]) for lab in labels])[stratum]
    y = np.maximum(1, np.rint(rng.normal(means, scenario.y_cv * means))).astype(np.int64)
    uid = np.arange(1, len(stratum) + 1, dtype=np.int64)
    return Population(uid, stratum, y, labels)


def draw_inclusion(scenario, population, source, rng):
    probs = np.array([float(scenario.inclusion[source][lab]) for lab in population.labels])
    return rng.random(len(population)) < probs[population.stratum]


def population_key(uid):
    return f"P{int(uid):07d}"


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _date(rng, scenario):
    start = dt.date(scenario.start_year, 1, 1).toordinal()
    end = dt.date(scenario.end_year, 12, 31).toordinal()
    return dt.date.fromordinal(int(rng.integers(start, end + 1))).isoformat()


def write_scenario(scenario, seed, out_dir):
    """Write ``population.csv``, ``POP.csv`` and one event CSV per source.

    ``POP`` lists every entity once (it seeds the register); each other
    source carries its own entity keys, the shared ``uid``, the stratum
    attributes and, for ``y_source``, the study variable.  Returns the
    written paths.
    """
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    pop = draw_population(scenario, rng)
    dims = list(scenario.strata)
    values = [lab.split("|") for lab in pop.labels]
    sources = sorted(scenario.inclusion)
    included = {s: draw_inclusion(scenario, pop, s, rng) for s in sources}

    written = []
    truth = []
    for i in range(len(pop)):
        truth.append([population_key(pop.uid[i])] + values[pop.stratum[i]] + [int(pop.y[i])]
                     + [int(included[s][i]) for s in sources])
    path = out_dir / "population.csv"
    atomic_write_text(path, _csv(["uid"] + dims + ["income"] + [f"in_{s}" for s in sources], truth))
    written.append(path)

    rows = []
    for i in range(len(pop)):
        rows.append([population_key(pop.uid[i]), f"{scenario.start_year}-01-01",
                     population_key(pop.uid[i])] + values[pop.stratum[i]])
    path = out_dir / f"{POPULATION_SOURCE}.csv"
    atomic_write_text(path, _csv(["entity_key", "event_date", "uid"] + dims, rows))
    written.append(path)

    for s in sources:
        members = np.flatnonzero(included[s])
        keys = rng.permutation(len(members))
        with_y = s == scenario.y_source
        header = ["entity_key", "event_date", "uid"] + dims + (["income"] if with_y else [])
        rows = []
        for m, k in zip(members, keys):
            n_events = int(rng.integers(1, 4))
            for _ in range(n_events):
                row = [f"{s}{int(k):07d}", _date(rng, scenario), population_key(pop.uid[m])]
                for v in values[pop.stratum[m]]:
                    row.append("" if rng.random() < scenario.missing_rate else v)
                if with_y:
                    row.append(int(pop.y[m]))
                rows.append(row)
        rows.sort(key=lambda r: (r[1], r[0]))
        path = out_dir / f"{s}.csv"
        atomic_write_text(path, _csv(header, rows))
        written.append(path)
    return written
