"""Per-stratum coverage of two sources, their exact-key integration, and the
integration extended by a third source, averaged over replications."""

import argparse

import numpy as np

from regisforge.experiments import SyntheticWorld, default_scenario, replication_rngs


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=20_000)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--seed", type=int, default=20240601)
    args = p.parse_args()

    world = SyntheticWorld(default_scenario(args.n), args.seed)
    rows = {}
    for rng in replication_rngs(args.seed + 1, args.reps):
        r = world.replicate(rng, third="C", estimate=False)
        for label, b in r["two"]["intersection_bound"].items():
            srcs = r["two"]["sources"]
            rows.setdefault(label, []).append((
                srcs["A"]["per_stratum"][label]["ratio"],
                srcs["B"]["per_stratum"][label]["ratio"],
                b["integrated"],
                r["three"]["intersection_bound"][label]["integrated"],
            ))
    print(f"{'stratum':8}{'A':>8}{'B':>8}{'A+B':>8}{'A+B+C':>8}")
    for label in sorted(rows):
        a, b, ab, abc = np.mean(rows[label], axis=0)
        print(f"{label:8}{a:8.3f}{b:8.3f}{ab:8.3f}{abc:8.3f}")


if __name__ == "__main__":
    main()
