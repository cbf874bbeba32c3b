"""Command-line entry points for the experiment drivers.

Verbs: explore-static, explore-dynamic, rl, baseline, certify-env. Each
takes --config/--seed/--out; --full switches from the reduced desk-scale
grids to paper-scale iteration counts. The exit code is nonzero whenever a
run in a SafeMPC mode logged a constraint violation.
"""

from __future__ import annotations

import argparse
import json
import sys

from .experiments import RUNNERS, config_hash, emit_results, load_config

FULL_SCALE = {
    "explore-static": {"run": {"n_iterations": 300}, "solver": {"multistarts": 25}},
    "explore-dynamic": {"run": {"n_iterations": 200}, "solver": {"multistarts": 5}},
    "rl": {"solver": {"multistarts": 5, "max_iters": 40}},
    "baseline": {"solver": {"multistarts": 5, "max_iters": 40}},
    "certify-env": {},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safempc",
        description="Safe learning-based MPC experiment drivers")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for verb in RUNNERS:
        sp = sub.add_parser(verb)
        sp.add_argument("--config", default=None, help="YAML config file")
        sp.add_argument("--env", default=None, choices=["pendulum", "cartpole"],
                        help="environment when no config file is given")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--full", action="store_true",
                        help="paper-scale settings instead of desk scale")
        sp.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                        help="config override, e.g. run.T=4")
    return parser


def _parse_overrides(pairs: list[str]) -> dict:
    out: dict = {}
    for pair in pairs:
        key, _, raw = pair.partition("=")
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = val
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = _parse_overrides(args.set)
    if args.seed is not None:
        overrides.setdefault("run", {})["seed"] = args.seed
    if args.full:
        overrides = {**FULL_SCALE.get(args.experiment, {}), **overrides}
        overrides.setdefault("run", {})["full"] = True
    cfg = load_config(args.config, experiment=args.experiment,
                      env_name=args.env, overrides=overrides)
    record = RUNNERS[args.experiment](cfg)
    print(f"config_hash: {config_hash(cfg)}")
    for key, val in sorted(record.summary.items()):
        print(f"  {key}: {val}")
    if args.out:
        for path in emit_results(record, args.out):
            print(f"wrote {path}")
    violations = int(record.summary.get("n_violations", 0))
    if args.experiment in ("explore-static", "explore-dynamic", "rl") and violations:
        print(f"SAFETY VIOLATIONS: {violations}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
