"""Command-line entry point: ``assistbench <command> [options]``.

Exit codes: 0 success, 1 validation error (bad input, config or usage),
2 runtime failure. Global options (``--seed``, ``--virtual-time``,
``--config``, ``--out``) are accepted before or after the command.

Config files are YAML with a versioned schema::

    format_version: 1
    seed: 0
    dataset: traces.jsonl          # optional default dataset
    profiles: my-profiles.yaml     # optional mock profile book
    window_ms: 3600000
    simulation:                    # used by plan / replay
      developers: 20
      streaming: stream            # stream | no_stream
      trigger: automatic           # automatic | manual
      model_profile: starcoder2-7b
      quantization_tag: none
      max_concurrent_requests: 1000
      gpu_count: 4
    sweep:                         # used by sweep
      axes: {developers: [1, 2, 5], gpu_count: [1, 4]}
      pins: {model_profile: starcoder2-7b}
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import __version__
from .adapters import convert_directory
from .config import ConfigError, SimulationConfig
from .engine import RawRunLog, execute_virtual
from .meters import read_samples_csv, simulated_samples, write_samples_csv
from .metrics import compute_run_metrics, impact_ratios, write_impact_csv, write_metrics_csv
from .mock.profiles import ProfileBook, ProfileError, load_profiles
from .planner import HOUR_MS, PlanError, ReplayPlan, build_plans
from .sweep import ConfigSpace, SweepError, SweepStore, run_round_http, run_sweep, write_metrics_json, write_report
from .synthetic import generate_events
from .trace_model import (
    DeveloperSession,
    EmptyDatasetError,
    MalformedLineError,
    TraceError,
    dump_events,
    lifecycle_stats,
    parse_dataset,
    parse_events,
    parse_files,
    sessions_from_events,
    usage_stats,
    write_lifecycle_csv,
    write_usage_csv,
)

log = logging.getLogger("assistbench")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
CONFIG_FORMAT_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage mistakes are validation errors, not crashes
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- inputs ----------------------------------------------------------------------


def load_config_file(path: Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        obj = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if obj.get("format_version") != CONFIG_FORMAT_VERSION:
        raise ConfigError(f"{path}: format_version must be {CONFIG_FORMAT_VERSION}")
    known = {"format_version", "seed", "dataset", "profiles", "window_ms", "simulation", "sweep"}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    return obj


def load_sessions(path: Path | None, fmt: str = "canonical") -> list[DeveloperSession]:
    if path is None:
        raise ConfigError("no dataset given (positional argument or `dataset:` in --config)")
    if not path.exists():
        raise ConfigError(f"dataset {path} does not exist")
    if fmt == "copilot":
        return sessions_from_events(convert_directory(path))
    if path.is_dir():
        files = sorted(path.glob("*.jsonl"))
        if not files:
            raise EmptyDatasetError(f"no *.jsonl files in {path}")
        return parse_files(files)
    return parse_dataset(path)


def _book(args, cfg: dict) -> ProfileBook:
    path = args.profiles or cfg.get("profiles")
    return load_profiles(Path(path) if path else None)


def _sim_config(args, cfg: dict) -> SimulationConfig:
    base = dict(cfg.get("simulation") or {})
    for key in ("developers", "streaming", "trigger", "model_profile", "quantization_tag",
                "max_concurrent_requests", "gpu_count"):
        v = getattr(args, key, None)
        if v is not None:
            base[key] = v
    return SimulationConfig.from_dict(base)


def _out_dir(args, default: str) -> Path:
    p = Path(args.out or default)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dataset_arg(args, cfg: dict) -> Path | None:
    if getattr(args, "dataset", None):
        return Path(args.dataset)
    return Path(cfg["dataset"]) if cfg.get("dataset") else None


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


# -- commands --------------------------------------------------------------------


def cmd_synth(args, cfg) -> int:
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        dump_events(generate_events(args.seed), f)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_validate(args, cfg) -> int:
    path = _dataset_arg(args, cfg)
    if path is None or not path.exists():
        raise ConfigError(f"dataset {path} does not exist")
    files = sorted(path.glob("*.jsonl")) if path.is_dir() else [path]
    bad = 0
    events = []
    for f in files:
        parsed = parse_events(f)
        events.extend(parsed.events)
        for lineno, why in parsed.malformed:
            print(f"{f}:{lineno}: {why}")
        bad += len(parsed.malformed)
    if not events:
        print("no valid events")
        return EXIT_INVALID
    sessions = sessions_from_events(events)
    n_req = sum(len(s.requests) for s in sessions)
    print(f"{len(events)} events, {len(sessions)} sessions, {n_req} requests, {bad} malformed lines")
    return EXIT_INVALID if bad and args.strict else EXIT_OK


def cmd_stats(args, cfg) -> int:
    sessions = load_sessions(_dataset_arg(args, cfg), args.format)
    stats = lifecycle_stats(sessions)
    out = _out_dir(args, "stats")
    with open(out / "lifecycle.csv", "w", encoding="utf-8", newline="") as f:
        write_lifecycle_csv(stats, f)
    with open(out / "usage.csv", "w", encoding="utf-8", newline="") as f:
        write_usage_csv((usage_stats(s) for s in sessions), f)
    for outcome, pct in stats.percentages.items():
        print(f"{outcome.value:20s} {stats.counts[outcome]:6d} {pct:6.1f}%")
    print(f"{'displayed':20s} {stats.displayed:6d} {100 * stats.fraction('displayed'):6.1f}%")
    print(f"{'accepted':20s} {stats.accepted:6d} {100 * stats.fraction('accepted'):6.1f}%")
    print(f"{'kept':20s} {stats.kept:6d} {100 * stats.fraction('kept'):6.1f}%")
    print(f"wrote {out}/lifecycle.csv and {out}/usage.csv")
    return EXIT_OK


def cmd_plan(args, cfg) -> int:
    sessions = load_sessions(_dataset_arg(args, cfg), args.format)
    sim = _sim_config(args, cfg)
    plans = build_plans(sessions, sim, args.seed, float(cfg.get("window_ms", HOUR_MS)))
    out = _out_dir(args, "plans")
    for p in plans:
        path = out / f"plan-{sim.config_hash}-r{p.round_index}-s{p.seed}.json"
        path.write_text(p.to_json() + "\n", encoding="utf-8")
        a, b = p.overlap_window
        print(f"{path}: {len(p.schedule)} requests, {p.developer_count} developers, "
              f"overlap {a / 60000:.1f}-{b / 60000:.1f} min")
    return EXIT_OK


def cmd_replay(args, cfg) -> int:
    plan = ReplayPlan.from_json(Path(args.plan).read_text(encoding="utf-8"))
    out = _out_dir(args, "replay")
    if args.endpoint:
        log_json, samples, metrics = run_round_http(plan, args.endpoint, time_scale=args.time_scale)
        run = RawRunLog.from_dict(json.loads(log_json), plan)
    else:
        if not args.virtual_time:
            raise UsageError("replay needs --endpoint URL, or --virtual-time to use the simulated server")
        run, server = execute_virtual(plan, _book(args, cfg).server_config(plan.config))
        a, b = plan.overlap_window
        samples = simulated_samples(server.power_at, a, b)
        metrics = compute_run_metrics(run, samples)
        with open(out / "steps.csv", "w", encoding="utf-8", newline="") as f:
            server.dump_step_log(f)
    (out / "log.json").write_text(run.to_json() + "\n", encoding="utf-8")
    with open(out / "samples.csv", "w", encoding="utf-8", newline="") as f:
        write_samples_csv(samples, f)
    _write_json(out / "metrics.json", metrics.to_dict())
    counts = {k.value: v for k, v in run.status_counts().items()}
    print(json.dumps(counts, sort_keys=True))
    lat = "n/a" if metrics.mean_latency is None else f"{metrics.mean_latency:.2f} s"
    print(f"mean latency {lat}, mean power {metrics.mean_power:.1f} W, "
          f"{metrics.energy_per_hour_per_developer:.2f} Wh per developer-hour, saturated={metrics.saturated}")
    return EXIT_OK


def cmd_mock_serve(args, cfg) -> int:
    from .mock.app import serve

    sim = _sim_config(args, cfg)
    server_cfg = _book(args, cfg).server_config(sim)
    print(f"mock server on http://{args.host}:{args.port} ({sim.model_profile}/{sim.quantization_tag}, "
          f"{sim.gpu_count} GPUs, max {sim.max_concurrent_requests} requests)")
    serve(server_cfg, args.host, args.port, args.time_scale)
    return EXIT_OK


def cmd_sweep(args, cfg) -> int:
    sessions = load_sessions(_dataset_arg(args, cfg), args.format)
    space = ConfigSpace.from_dict(cfg.get("sweep") or {})
    if not args.endpoint and not args.virtual_time:
        raise UsageError("sweep needs --endpoint URL, or --virtual-time to use the simulated server")
    store = SweepStore(_out_dir(args, "sweep"))
    print(f"configuration space: {space.size} configs")
    if args.dry_run:
        return EXIT_OK
    result = run_sweep(
        space, sessions, store, args.seed,
        book=_book(args, cfg) if not args.endpoint else None,
        endpoint=args.endpoint, time_scale=args.time_scale,
        window=float(cfg.get("window_ms", HOUR_MS)), force=args.force, parallel=args.parallel,
    )
    states = [e["state"] for e in result.manifest["runs"].values()]
    print(f"executed {result.executed_rounds} rounds; "
          f"{states.count('complete')} complete, {states.count('failed')} failed")
    return EXIT_RUNTIME if result.failed else EXIT_OK


def cmd_analyze(args, cfg) -> int:
    store = SweepStore(Path(args.store))
    if args.recompute:
        _recompute(store)
    results = store.completed()
    if not results:
        raise SweepError(f"no completed runs in {store.root}")
    out = _out_dir(args, str(store.root / "analysis"))
    with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as f:
        write_metrics_csv(results, f)
    with open(out / "metrics.json", "w", encoding="utf-8") as f:
        write_metrics_json(results, f)
    ratios = impact_ratios(results, args.metric)
    with open(out / "impact.csv", "w", encoding="utf-8", newline="") as f:
        write_impact_csv(ratios, f)
    for r in ratios:
        print(f"{r.factor:24s} {str(r.from_option):>14s} -> {str(r.to_option):<14s} x{r.ratio:.3f} ({len(r.ratios)} pairs)")
    if ratios.diagnostic:
        print(ratios.diagnostic)
    print(f"wrote {out}")
    return EXIT_OK


def _recompute(store: SweepStore) -> None:
    """Recompute every round's metrics from its persisted plan, log and samples; fail on mismatch."""
    for run_dir in sorted((store.root / "runs").glob("*")):
        for rd in sorted(run_dir.glob("r*-s*")):
            plan = ReplayPlan.from_json((rd / "plan.json").read_text(encoding="utf-8"))
            run = RawRunLog.from_dict(json.loads((rd / "log.json").read_text(encoding="utf-8")), plan)
            with open(rd / "samples.csv", encoding="utf-8") as f:
                samples = read_samples_csv(f)
            fresh = compute_run_metrics(run, samples).to_dict()
            stored = json.loads((rd / "metrics.json").read_text(encoding="utf-8"))
            if json.loads(json.dumps(fresh)) != stored:
                raise SweepError(f"{rd}: recomputed metrics differ from stored ones")


def cmd_report(args, cfg) -> int:
    store = SweepStore(Path(args.store))
    hashes = args.configs.split(",") if args.configs else None
    labels = args.labels.split(",") if args.labels else None
    out = _out_dir(args, str(store.root / "report"))
    summary = write_report(store, out, args.metric, hashes, labels)
    with open(out / "scenario.csv", encoding="utf-8") as f:
        for row in csv.reader(f):
            print("  ".join(f"{c:>16s}" if i else f"{c:42s}" for i, c in enumerate(row)))
    if summary["diagnostic"]:
        print(summary["diagnostic"])
    print(f"wrote {out}/scenario.csv, impact.csv, curves.csv")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def _globals(parser: argparse.ArgumentParser, top: bool) -> None:
    d = None if top else argparse.SUPPRESS
    g = parser.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=d, help="RNG seed (default 0)")
    g.add_argument("--virtual-time", action="store_true", default=False if top else argparse.SUPPRESS,
                   help="run against the simulated server in virtual time")
    g.add_argument("--config", type=Path, default=d, help="YAML config file")
    g.add_argument("--out", default=d, help="output directory")
    g.add_argument("-v", "--verbose", action="count", default=0 if top else argparse.SUPPRESS)


def _sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--developers", type=int)
    p.add_argument("--streaming", choices=["stream", "no_stream"])
    p.add_argument("--trigger", choices=["automatic", "manual"])
    p.add_argument("--model", dest="model_profile")
    p.add_argument("--quantization", dest="quantization_tag")
    p.add_argument("--max-concurrent", dest="max_concurrent_requests", type=int)
    p.add_argument("--gpus", dest="gpu_count", type=int, choices=[1, 2, 4])


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="assistbench", description="Replay code-assistant traces and measure server energy.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _globals(ap, top=True)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name: str, func, help: str, dataset: bool = False):
        p = sub.add_parser(name, help=help, description=help)
        _globals(p, top=False)
        if dataset:
            p.add_argument("dataset", nargs="?", help="telemetry JSONL file or directory")
            p.add_argument("--format", choices=["canonical", "copilot"], default="canonical")
        p.add_argument("--profiles", type=Path, help="mock profile book (YAML)")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "write a synthetic telemetry dataset")
    p.add_argument("output")
    p = add("validate", cmd_validate, "check a telemetry dataset for malformed lines", dataset=True)
    p.add_argument("--strict", action="store_true", help="exit 1 when any line is malformed")
    add("stats", cmd_stats, "lifecycle and usage statistics", dataset=True)
    p = add("plan", cmd_plan, "build replay plans (one per round)", dataset=True)
    _sim_flags(p)
    p = add("replay", cmd_replay, "execute one plan and compute its metrics")
    p.add_argument("plan")
    p.add_argument("--endpoint", help="base URL of a server speaking /v1/generate")
    p.add_argument("--time-scale", type=float, default=1.0, help="wall seconds per plan second")
    p = add("mock-serve", cmd_mock_serve, "serve the simulated server over HTTP")
    _sim_flags(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--time-scale", type=float, default=1.0, help="wall seconds per simulated second")
    p = add("sweep", cmd_sweep, "run a resumable configuration sweep", dataset=True)
    p.add_argument("--endpoint")
    p.add_argument("--time-scale", type=float, default=1.0)
    p.add_argument("--force", action="store_true", help="re-run completed configs")
    p.add_argument("--parallel", type=int, default=1, help="worker processes (virtual time only)")
    p.add_argument("--dry-run", action="store_true", help="report the space size and stop")
    p = add("analyze", cmd_analyze, "metrics tables and impact ratios of a sweep store")
    p.add_argument("store")
    p.add_argument("--metric", default="energy", choices=["energy", "latency", "power", "energy_per_1000"])
    p.add_argument("--recompute", action="store_true", help="re-derive metrics from persisted logs and samples")
    p = add("report", cmd_report, "scenario table, impact table and energy curves")
    p.add_argument("store")
    p.add_argument("--metric", default="energy", choices=["energy", "latency", "power", "energy_per_1000"])
    p.add_argument("--configs", help="comma-separated config hashes (default: all completed)")
    p.add_argument("--labels", help="comma-separated column labels for --configs")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
        cfg = load_config_file(args.config)
        if args.seed is None:
            args.seed = int(cfg.get("seed", 0))
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except MalformedLineError as exc:
        print(f"invalid dataset: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TraceError, ConfigError, PlanError, ProfileError, json.JSONDecodeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SweepError, OSError, RuntimeError, ValueError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
