"""Command line: ``regisforge <command> --config <path> [--workspace <path>] [--seed <n>]``.

Exit status: 0 success, 1 user or config error, 2 internal invariant violation.
"""

import argparse
import json
import sys

from . import pipeline
from .config import load_config
from .errors import InvariantViolation, MissingPrerequisite, RegisforgeError

COMMANDS = list(pipeline.STAGES) + ["synth", "audit", "run"]


def build_parser():
    p = argparse.ArgumentParser(prog="regisforge", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="project YAML file")
    p.add_argument("--workspace", help="override the config's workspace directory")
    p.add_argument("--seed", type=int, help="seed for synth (default: the config's synth.seed)")
    p.add_argument("--quiet", action="store_true", help="suppress the JSON summary")
    return p


def run_command(command, config, workspace=None, seed=None):
    """Run one command; returns its summary (raises on error)."""
    cfg = load_config(config, workspace)
    if command == "synth":
        return [str(p.relative_to(cfg.root)) for p in pipeline.synth(cfg, seed)]
    ws = pipeline.Workspace(cfg.workspace)
    if command == "audit":
        return pipeline.audit(ws, cfg)
    with ws.lock():
        if command == "run":
            pipeline.run_all(cfg, ws)
            return {"stages": sorted(ws.manifest()["stages"])}
        return pipeline.RUNNERS[command](cfg, ws)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        out = run_command(args.command, args.config, args.workspace, args.seed)
    except InvariantViolation as exc:
        print(f"regisforge: invariant violation: {exc}", file=sys.stderr)
        return 2
    except MissingPrerequisite as exc:
        print(f"regisforge: {exc}", file=sys.stderr)
        return 1
    except RegisforgeError as exc:
        print(f"regisforge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"regisforge: {exc}", file=sys.stderr)
        return 1
    if not args.quiet:
        print(json.dumps(out, indent=2, sort_keys=True, default=str))
    if args.command == "audit" and not out["clean"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
