"""Command-line entry point: learn / race / benchmark workflows.

Exit codes: 0 success, 1 episode failure (collision, off-track, or abort),
2 configuration error (missing or invalid files/flags).  The worker-pool
size for the corridor optimizations comes from the HAIRPIN_WORKERS
environment variable (default: min(4, cpu count)).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import AppConfig, load_config
from .errors import BadSpec, EpisodeAbort, HairpinError
from .lmpc import LearnedData
from .sim import (
    Scenario, ScenarioSpec, generate_scenario, run_episode, run_learn,
    write_debug_jsonl, write_episode_csv, write_summary_json, write_timing_csv,
)

EXIT_OK = 0
EXIT_EPISODE_FAILURE = 1
EXIT_CONFIG_ERROR = 2


def _parse_range(text: str) -> tuple:
    try:
        lo, hi = text.split(":")
        return float(lo), float(hi)
    except ValueError as exc:
        raise BadSpec(f"expected LO:HI, got {text!r}") from exc


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--track", help="track geometry JSON (default: shipped track)")
    p.add_argument("--vehicle", help="vehicle parameter JSON (default: shipped car)")
    p.add_argument("--params", help="planner/controller parameter JSON")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="hairpin",
        description="Lap-time-learning race simulator with homotopic overtaking",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("learn", help="collect laps offline and write the safe-set file")
    _add_common(p)
    p.add_argument("--laps", type=int, default=10,
                   help="total laps; the first 2 bootstrap, the rest learn (default 10)")
    p.add_argument("--noise", action="store_true",
                   help="enable state/input noise (off by default for learning)")

    p = sub.add_parser("race", help="run one seeded episode against opponents")
    _add_common(p)
    p.add_argument("--safe-set", default=None, help="safe-set file from `learn`")
    p.add_argument("--opponents", type=int, default=1)
    p.add_argument("--speed-range", default="0:0.4", help="opponent speeds LO:HI [m/s]")
    p.add_argument("--spawn-range", default="5:15", help="opponent spawn window LO:HI [m]")
    p.add_argument("--laps", type=int, default=1, help="ego lap budget")
    p.add_argument("--no-noise", action="store_true")
    p.add_argument("--debug-dump", action="store_true",
                   help="write per-step planner debug records (JSONL)")

    p = sub.add_parser("benchmark", help="seeded episode matrix with aggregate table")
    _add_common(p)
    p.add_argument("--safe-set", default=None)
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--group", default="0:0.4", help="opponent speed group LO:HI [m/s]")
    p.add_argument("--opponents", type=int, default=1)
    p.add_argument("--spawn-range", default="10:30")
    p.add_argument("--laps", type=int, default=2, help="ego lap budget per episode")
    p.add_argument("--no-noise", action="store_true")
    return ap


def _load_app(args) -> AppConfig:
    return load_config(track_path=args.track, vehicle_path=args.vehicle,
                       params_path=args.params)


def _load_learned(args, out_dir: Path) -> LearnedData:
    path = args.safe_set or (out_dir / "safe_set.npz")
    if not Path(path).exists():
        raise FileNotFoundError(
            f"safe-set file {path} not found; run `hairpin learn` first")
    return LearnedData.load(path)


def cmd_learn(args) -> int:
    config = _load_app(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    total = max(args.laps, 1)
    n_boot = min(config.sim.bootstrap_laps, total)
    n_learn = total - n_boot
    try:
        learned = run_learn(config, seed=args.seed, bootstrap_laps=n_boot,
                            lmpc_laps=n_learn, noise_on=args.noise, verbose=True)
    except EpisodeAbort as exc:
        print(f"learning aborted: {exc}", file=sys.stderr)
        return EXIT_EPISODE_FAILURE
    path = out_dir / "safe_set.npz"
    learned.save(path)
    print(f"safe set written to {path} ({len(learned.laps)} laps, "
          f"best {min(learned.lap_times):.1f} s)")
    return EXIT_OK


def cmd_race(args) -> int:
    config = _load_app(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    learned = _load_learned(args, out_dir)
    spec = ScenarioSpec(
        n_opponents=args.opponents,
        s_range=_parse_range(args.spawn_range),
        speed_range=_parse_range(args.speed_range),
    )
    scenario = generate_scenario(args.seed, spec, config, lap_budget=args.laps)
    world, metrics = run_episode(
        scenario, config, learned, noise_on=not args.no_noise,
        collect_debug=args.debug_dump,
    )
    write_episode_csv(out_dir / "episode.csv", world, config, scenario)
    write_timing_csv(out_dir / "timing.csv", world)
    write_summary_json(out_dir / "summary.json", metrics)
    if args.debug_dump:
        write_debug_jsonl(out_dir / "planner_debug.jsonl", world)
    n_pass = sum(metrics.success_per_opponent)
    print(f"episode: laps={metrics.laps_completed} overtaken={n_pass}/"
          f"{len(metrics.success_per_opponent)} min_barrier={metrics.min_barrier:.3f} "
          f"aborted={metrics.aborted}")
    print(f"logs in {out_dir}/")
    return EXIT_EPISODE_FAILURE if metrics.aborted else EXIT_OK


def cmd_benchmark(args) -> int:
    config = _load_app(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    learned = _load_learned(args, out_dir)
    spec = ScenarioSpec(
        n_opponents=args.opponents,
        s_range=_parse_range(args.spawn_range),
        speed_range=_parse_range(args.group),
    )
    results = []
    for case in range(args.cases):
        seed = args.seed + case
        scenario = generate_scenario(seed, spec, config, lap_budget=args.laps)
        world, metrics = run_episode(scenario, config, learned,
                                     noise_on=not args.no_noise)
        results.append(metrics)
        times = ", ".join(f"{t:.2f}" for t in metrics.overtake_times())
        print(f"  case {case:3d} seed {seed}: success={metrics.success} "
              f"times=[{times}] min_h={metrics.min_barrier:.3f}")

    n = len(results)
    full_success = sum(1 for m in results if m.success)
    all_times = [t for m in results for t in m.overtake_times()]
    report = {
        "cases": n,
        "opponents": args.opponents,
        "speed_group": args.group,
        "spawn_range": args.spawn_range,
        "lap_budget": args.laps,
        "success_rate": full_success / n if n else 0.0,
        "overtake_time_mean": float(np.mean(all_times)) if all_times else None,
        "overtake_time_min": float(np.min(all_times)) if all_times else None,
        "overtake_time_max": float(np.max(all_times)) if all_times else None,
        "planner_ms_mean": float(np.mean([m.planner_ms_mean for m in results
                                          if m.overtake_steps])) if results else None,
        "failures": [m.seed for m in results if not m.success],
        "aborts": [m.seed for m in results if m.aborted],
        "seeds": [m.seed for m in results],
        "config_hash": config.config_hash(),
    }
    with open(out_dir / "benchmark.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"\ngroup {args.group} m/s, {args.opponents} opponent(s), {n} cases:")
    print(f"  success rate     {100.0 * report['success_rate']:.0f}%")
    if all_times:
        print(f"  overtake time    mean {report['overtake_time_mean']:.2f} s  "
              f"min {report['overtake_time_min']:.2f}  max {report['overtake_time_max']:.2f}")
    if report["planner_ms_mean"] is not None:
        print(f"  planner time     {report['planner_ms_mean']:.1f} ms mean")
    print(f"  report           {out_dir / 'benchmark.json'}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "learn":
            return cmd_learn(args)
        if args.command == "race":
            return cmd_race(args)
        if args.command == "benchmark":
            return cmd_benchmark(args)
    except (FileNotFoundError, json.JSONDecodeError, BadSpec, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except HairpinError as exc:
        print(f"episode failure: {exc}", file=sys.stderr)
        return EXIT_EPISODE_FAILURE
    return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
