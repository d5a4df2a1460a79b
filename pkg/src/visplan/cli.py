"""Command line interface: run scenarios, sweep parameters, verify the suite.

`run` executes one closed-loop simulation and writes the log CSV, the
path-time analysis CSV, a JSON summary and rendered figures. `sweep` repeats
a run over a list of values for one numeric config key and aggregates the
results. `check` executes the acceptance suite. Exit codes: 0 ok,
1 validation error, 2 collision (with --fail-on-collision), 3 acceptance
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import acceptance, report
from .model import ValidationError
from .scenario import apply_overrides, build_world
from .simloop import run as simulate

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_COLLISION = 2
EXIT_ACCEPTANCE = 3


def _load(args, extra_overrides=()):
    data = json.loads(Path(args.scenario).read_text())
    overrides = list(args.override or []) + list(extra_overrides)
    if args.duration is not None:
        overrides.append(f"duration={args.duration}")
    if overrides:
        data = apply_overrides(data, overrides)
    return build_world(data)


def cmd_run(args) -> int:
    world = _load(args)
    log = simulate(world, seed=args.seed)
    files = report.write_run_outputs(log, args.out, plots=not args.no_plots)
    s = log.summary
    print(f"run finished: t={s['duration']}s terminal speed {s['terminal_speed']:.2f} m/s, "
          f"{s['collision_count']} collisions, {s['fallback_count']} fallbacks")
    for k, f in files.items():
        print(f"  {k}: {f}")
    if args.fail_on_collision and s["collision_count"] > 0:
        return EXIT_COLLISION
    return EXIT_OK


def _sweep_member(payload):
    scenario_text, overrides, seed, key, value = payload
    data = json.loads(scenario_text)
    data = apply_overrides(data, overrides + [f"{key}={value}"])
    world = build_world(data)
    return value, simulate(world, seed=seed)


def cmd_sweep(args) -> int:
    key, _, raw = args.sweep.partition("=")
    if not raw:
        print("--sweep expects KEY=v1,v2,...", file=sys.stderr)
        return EXIT_VALIDATION
    values = [float(v) for v in raw.split(",")]
    scenario_text = Path(args.scenario).read_text()
    overrides = list(args.override or [])
    if args.duration is not None:
        overrides.append(f"duration={args.duration}")
    payloads = [(scenario_text, overrides, args.seed, key, v) for v in values]
    jobs = args.jobs if args.jobs > 0 else min(len(values), os.cpu_count() or 1)
    if jobs > 1 and len(values) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_member, payloads))
    else:
        results = [_sweep_member(p) for p in payloads]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    merge_arc = None
    for value, log in results:
        s = log.summary
        speed_at_merge = min(s["speed_at_merge"].values()) if s["speed_at_merge"] else float("nan")
        if log.crossings:
            merge_arc = log.crossings[0]["ego_arc"]
        rows.append({
            "value": value,
            "speed_at_merge": speed_at_merge,
            "min_speed": s["min_speed"],
            "terminal_speed": s["terminal_speed"],
            "collisions": s["collision_count"],
            "min_gap": min(s["min_same_route_gap"], s["min_merge_clearance"]),
            "fallbacks": s["fallback_count"],
        })
        member_dir = out / f"{key.replace('.', '_')}_{value:g}"
        report.write_run_outputs(log, member_dir, plots=False)
    report.write_sweep_csv(rows, out / "sweep.csv")
    if not args.no_plots:
        report.fig_sweep([(v, log) for v, log in results], merge_arc, out / "fig_sweep.png")
    print(f"sweep over {key}: " + ", ".join(f"{r['value']:g}" for r in rows))
    print(f"  results: {out / 'sweep.csv'}")
    total_collisions = sum(r["collisions"] for r in rows)
    if args.fail_on_collision and total_collisions > 0:
        return EXIT_COLLISION
    return EXIT_OK


def cmd_check(args) -> int:
    ok = acceptance.run_all()
    return EXIT_OK if ok else EXIT_ACCEPTANCE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="visplan",
        description="Occlusion-aware longitudinal planning in closed-loop simulation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario_required=True):
        p.add_argument("--scenario", required=scenario_required, help="scenario JSON file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="dotted config override, repeatable")
        p.add_argument("--duration", type=float, default=None,
                       help="simulation length in seconds")
        p.add_argument("--fail-on-collision", action="store_true")
        p.add_argument("--no-plots", action="store_true",
                       help="skip figure rendering")

    p_run = sub.add_parser("run", help="simulate one scenario")
    common(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a scenario over several values of one key")
    common(p_sweep)
    p_sweep.add_argument("--sweep", required=True, metavar="KEY=v1,v2,...",
                         help="numeric config key and comma-separated values")
    p_sweep.add_argument("--jobs", type=int, default=0,
                         help="parallel sweep workers (0 = one per value)")
    p_sweep.set_defaults(fn=cmd_sweep)

    p_check = sub.add_parser("check", help="run the acceptance suite")
    p_check.set_defaults(fn=cmd_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValidationError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
