"""Command line runner.

    fedafd run --config exp.json --mode afd_multi --seeds 1,2,3 --out runs
    fedafd compare --baseline-config base.json --config afd.json --out runs

Each run writes ``<out>/<run_id>/`` containing ``config.json``,
``summary.json`` and per seed ``seed_<s>/metrics.csv`` plus
``seed_<s>/controller.csv``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, ExperimentConfig, parse_config
from .federation import METRIC_COLUMNS, RoundMetrics, run_experiment
from .netsim import convergence_time, speedup_ratio

log = logging.getLogger("fedafd")

CONTROLLER_COLUMNS = ("round", "client", "spec", "recorded", "loss", "down_bytes", "up_bytes")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def run_seed(cfg: ExperimentConfig, seed: int, seed_dir: Path) -> list[dict]:
    seed_dir.mkdir(parents=True, exist_ok=True)
    with open(seed_dir / "metrics.csv", "w", newline="") as mf, open(
        seed_dir / "controller.csv", "w", newline=""
    ) as cf:
        mw = csv.writer(mf, lineterminator="\n")
        cw = csv.writer(cf, lineterminator="\n")
        mw.writerow(METRIC_COLUMNS)
        cw.writerow(CONTROLLER_COLUMNS)

        def on_row(row):
            mw.writerow([_fmt(row[k]) for k in METRIC_COLUMNS])
            mf.flush()

        def on_round(m: RoundMetrics):
            for c in m.clients:
                rec = m.recorded.get(c)
                cw.writerow(
                    [m.round, c, m.specs[c], "" if rec is None else int(rec), _fmt(m.losses[c]),
                     m.down_bytes[c], m.up_bytes[c]]
                )

        return run_experiment(cfg, seed, on_row=on_row, on_round=on_round)


def summarize(cfg: ExperimentConfig, per_seed: dict[int, list[dict]]) -> dict:
    seeds = sorted(per_seed)
    finals = [per_seed[s][-1]["test_accuracy"] for s in seeds]
    conv = [convergence_time(per_seed[s], cfg.target_accuracy) for s in seeds]
    reached = [c for c in conv if c is not None]
    return {
        "run_id": cfg.resolved_run_id(),
        "mode": cfg.mode,
        "seeds": seeds,
        "rounds": cfg.rounds,
        "final_accuracy": {
            "mean": statistics.fmean(finals),
            "std": statistics.stdev(finals) if len(finals) > 1 else 0.0,
            "per_seed": finals,
        },
        "convergence_minutes": {
            "target_accuracy": cfg.target_accuracy,
            "per_seed": conv,
            "mean": statistics.fmean(conv) if len(reached) == len(conv) else None,
        },
        "cum_down_bytes": [per_seed[s][-1]["cum_down_bytes"] for s in seeds],
        "cum_up_bytes": [per_seed[s][-1]["cum_up_bytes"] for s in seeds],
    }


def add_speedup(summary: dict, baseline: dict) -> dict:
    base = baseline["convergence_minutes"]["mean"]
    mine = summary["convergence_minutes"]["mean"]
    summary["baseline_run_id"] = baseline.get("run_id")
    try:
        summary["speedup_ratio"] = speedup_ratio(base, mine)
    except ValueError as e:
        summary["speedup_ratio"] = None
        summary["speedup_error"] = str(e)
    return summary


def threads_cap() -> int:
    try:
        return max(1, int(os.environ.get("FEDAFD_THREADS", os.cpu_count() or 1)))
    except ValueError:
        return 1


def run(cfg: ExperimentConfig, parallel: bool = False, baseline: Optional[dict] = None) -> dict:
    """Run every seed of ``cfg`` and write its outputs; returns the summary."""
    run_dir = Path(cfg.out) / cfg.resolved_run_id()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    def one(seed):
        log.info("run %s seed %d", run_dir.name, seed)
        return seed, run_seed(cfg, seed, run_dir / f"seed_{seed}")

    if parallel and len(cfg.seeds) > 1:
        with ThreadPoolExecutor(max_workers=min(threads_cap(), len(cfg.seeds))) as pool:
            per_seed = dict(pool.map(one, cfg.seeds))
    else:
        per_seed = dict(one(s) for s in cfg.seeds)

    summary = summarize(cfg, per_seed)
    if baseline is None and cfg.baseline_summary:
        baseline = json.loads(Path(cfg.baseline_summary).read_text())
    if baseline is not None:
        add_speedup(summary, baseline)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _add_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=["none", "fd", "afd_multi", "afd_single"])
    p.add_argument("--fdr", type=float)
    p.add_argument("--fraction", type=float)
    p.add_argument("--rounds", type=int)
    p.add_argument("--seed", type=int, help="single seed (overrides the config's seeds)")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--out")
    p.add_argument("--run-id")
    p.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override any config field"
    )
    p.add_argument("--parallel", action="store_true", help="run seeds in parallel (FEDAFD_THREADS caps workers)")


def _overrides(args) -> dict:
    values = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(item, "expected KEY=VALUE")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    for name in ("mode", "fdr", "fraction", "rounds", "out", "run_id"):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if args.seeds is not None:
        values["seeds"] = args.seeds
    if args.seed is not None:
        values["seeds"] = [args.seed]
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedafd", description="Federated dropout simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment configuration over its seeds")
    p_run.add_argument("--config")
    p_run.add_argument("--baseline-summary", help="summary.json of a baseline run, for the speedup ratio")
    _add_flags(p_run)

    p_cmp = sub.add_parser("compare", help="run a baseline and a variant and report the speedup")
    p_cmp.add_argument("--baseline-config")
    p_cmp.add_argument("--config")
    _add_flags(p_cmp)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    try:
        overrides = _overrides(args)
        if args.command == "run":
            if args.baseline_summary:
                overrides["baseline_summary"] = args.baseline_summary
            cfg = parse_config(args.config, overrides)
            summary = run(cfg, parallel=args.parallel)
        else:
            base_over = {k: v for k, v in overrides.items() if k != "mode" and k != "run_id"}
            base_cfg = parse_config(args.baseline_config, base_over)
            cfg = parse_config(args.config, overrides)
            if base_cfg.resolved_run_id() == cfg.resolved_run_id():
                raise ConfigError("config", "baseline and variant configurations are identical")
            baseline = run(base_cfg, parallel=args.parallel)
            summary = run(cfg, parallel=args.parallel, baseline=baseline)
    except ConfigError as e:
        print(f"fedafd: config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report and exit nonzero
        print(f"fedafd: error: {e}", file=sys.stderr)
        return 1
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
