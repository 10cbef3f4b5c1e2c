"""`sim` command line: run named experiments, sweeps and fingerprint datasets.

Exit codes: 0 success, 2 configuration error, 3 security-oracle violation.
"""

from __future__ import annotations

import argparse
import sys

from .harness import (EXPERIMENTS, SWEEPS, ExperimentConfig, apply_overrides,
                      parse_config, run_experiment, run_sweep)
from .workloads import ConfigError, OutOfRange


def _load_config(path, exp, seed, extra=None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path:
        with open(path) as fh:
            cfg = parse_config(fh.read(), cfg)
    if exp:
        cfg.exp = exp
    if seed is not None:
        cfg.seed = seed
    if extra:
        cfg = apply_overrides(cfg, extra)
    return cfg


def _parse_set_args(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sim",
                                     description="Deterministic DRAM timing-channel simulator")
    sub = parser.add_subparsers(dest="cmd", required=True)

    run_p = sub.add_parser("run", help="run one named experiment or a custom config")
    run_p.add_argument("--config", help="flat dotted key=value config file")
    run_p.add_argument("--exp", choices=EXPERIMENTS, help="named experiment")
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--out", default="out")
    run_p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="inline config override (repeatable)")

    sweep_p = sub.add_parser("sweep", help="run a parameter sweep")
    sweep_p.add_argument("--config", help="base config file")
    sweep_p.add_argument("--sweep", required=True, choices=SWEEPS)
    sweep_p.add_argument("--seed", type=int)
    sweep_p.add_argument("--out", default="out")
    sweep_p.add_argument("--set", action="append", metavar="KEY=VALUE")

    fp_p = sub.add_parser("fingerprint", help="emit a labeled fingerprint trace dataset")
    fp_p.add_argument("--profiles", type=int, default=10)
    fp_p.add_argument("--runs", type=int, default=20)
    fp_p.add_argument("--seed", type=int, default=1)
    fp_p.add_argument("--out", default="out")

    args = parser.parse_args(argv)
    try:
        if args.cmd == "run":
            cfg = _load_config(args.config, args.exp, args.seed, _parse_set_args(args.set))
            art = run_experiment(cfg)
        elif args.cmd == "sweep":
            cfg = _load_config(args.config, None, args.seed, _parse_set_args(args.set))
            art = run_sweep(args.sweep, cfg)
        else:
            cfg = ExperimentConfig(exp="fingerprint", seed=args.seed,
                                   profiles=args.profiles, runs_per_profile=args.runs)
            art = run_experiment(cfg)
    except (ConfigError, OutOfRange, FileNotFoundError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    art.write(args.out)
    for line in art.summary_lines:
        print(line)
    if art.oracle_violation is not None:
        print("oracle violation detected", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
