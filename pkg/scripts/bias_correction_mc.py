"""Monte Carlo: calibrated vs naive totals when two sources under-cover unevenly by stratum.

    python scripts/bias_correction_mc.py --n 100000 --reps 200
"""

import argparse
import json

from regisforge.experiments import bias_correction_mc, default_scenario


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=100_000, help="population size")
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--seed", type=int, default=20240601)
    args = p.parse_args()
    res = bias_correction_mc(args.n, args.reps, args.seed, default_scenario(args.n))
    print(json.dumps(res.summary(), indent=2))


if __name__ == "__main__":
    main()
