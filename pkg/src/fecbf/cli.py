"""Command-line entry point: ``fecbf {trial,bench,delay-sweep,compat}``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .compatibility import (UndecidedError, dump_system, farkas_check, sign_consistency_holds,
                            system_from_fleet)
from .config import ConfigError, RunConfig, load_config
from .controllers import ControllerKind
from .sim import (MetricsTable, SnapshotBuffer, default_jobs, format_table, generate_scenario,
                  monte_carlo, run_trial, write_metrics)

log = logging.getLogger("fecbf")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _out_dir(cfg: RunConfig, override) -> Path:
    out = Path(override or cfg["output.directory"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.ini").write_text(cfg.render())
    return out


def cmd_trial(cfg: RunConfig, out: Path, jobs: int) -> int:
    spec = cfg.scenario()
    params = cfg.safety()
    tables = {}
    for ctl in cfg.controllers():
        res = run_trial(spec, ctl, params, record=cfg["output.trajectory"])
        tables[ctl.name] = MetricsTable.from_results(ctl.name, [res])
        if cfg["output.trajectory"]:
            name = f"trial_{spec.seed}.csv" if len(cfg["controller.kinds"]) == 1 \
                else f"trial_{spec.seed}_{ctl.name}.csv"
            res.write_csv(out / name)
    write_metrics(out / "metrics.json", tables)
    print(format_table(tables), end="")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, out: Path, jobs: int) -> int:
    tables = monte_carlo(cfg.scenario(), cfg.controllers(), cfg["scenario.trials"],
                         cfg.safety(), jobs=jobs)
    write_metrics(out / "metrics.json", tables)
    table = format_table(tables)
    (out / "table.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_delay_sweep(cfg: RunConfig, out: Path, jobs: int) -> int:
    payload = {}
    lines = []
    for tau in cfg["scenario.delays"]:
        tables = monte_carlo(cfg.scenario(delay=tau), cfg.controllers(), cfg["scenario.trials"],
                             cfg.safety(), jobs=jobs)
        payload[f"{tau:g}"] = {name: tb.as_dict() for name, tb in tables.items()}
        lines.append(f"tau = {tau:g} s")
        lines.append(format_table(tables))
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    text = "\n".join(lines)
    (out / "table.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_compat(cfg: RunConfig, out: Path, jobs: int) -> int:
    """Centralised system at ``scenario.snapshot_time`` of the first configured controller's run."""
    spec = cfg.scenario()
    ctl = cfg.controllers()[0]
    params = cfg.safety()
    t_snap = cfg["scenario.snapshot_time"]
    if ctl.kind is ControllerKind.CENTRALIZED or t_snap <= 0:
        fleet = generate_scenario(spec).fleet
    else:
        fleet = _fleet_at(spec, ctl, params, t_snap)
    if len(fleet) < 2:
        raise ValueError("fewer than two UAVs active at the snapshot time")
    system = system_from_fleet(fleet, params)
    outcome = farkas_check(system)
    per_uav, overall = sign_consistency_holds(system)
    path = dump_system(out / "compat_dump.txt", system, outcome)
    summary = {
        "snapshot_time": t_snap,
        "n_uav": len(fleet),
        "verdict": outcome.verdict.value,
        "max_violation": outcome.max_violation,
        "sign_consistent": overall,
        "sign_consistent_uavs": int(per_uav.sum()),
    }
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"verdict: {outcome.verdict.value}  sign-consistent: {overall} "
          f"({per_uav.sum()}/{per_uav.size} UAVs)  dump: {path}")
    return EXIT_OK


def _fleet_at(spec, ctl, params, t_snap):
    """Active fleet at time t_snap of a trial (re-simulated up to that time)."""
    short = replace(spec, t_max=max(t_snap, spec.dt))
    res = run_trial(short, ctl, params, record=True)
    rows = [r for r in res.trajectory if abs(r[0] - res.trajectory[-1][0]) < 1e-9]
    sc = generate_scenario(spec)
    fleet = sc.fleet.subset(np.array([r[1] for r in rows], dtype=int))
    fleet.position = np.array([r[2:5] for r in rows])
    fleet.speed = np.array([r[5] for r in rows])
    fleet.pitch = np.array([r[6] for r in rows])
    fleet.yaw = np.array([r[7] for r in rows])
    return fleet


COMMANDS = {
    "trial": cmd_trial,
    "bench": cmd_bench,
    "delay-sweep": cmd_delay_sweep,
    "compat": cmd_compat,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fecbf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-trial progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", help="INI file; built-in defaults when omitted")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("-o", "--out", help="output directory (overrides output.directory)")
        p.add_argument("-j", "--jobs", type=int, default=None,
                       help="worker processes for Monte-Carlo runs (default: available cores)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    jobs = args.jobs if args.jobs is not None else default_jobs()
    try:
        out = _out_dir(cfg, args.out)
        return COMMANDS[args.command](cfg, out, max(jobs, 1))
    except (OSError, ValueError, RuntimeError, UndecidedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
