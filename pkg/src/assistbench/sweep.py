"""Configuration spaces, resumable sweeps over them and report tables.

Store layout (all JSON is UTF-8, keys sorted)::

    <root>/manifest.json                      sweep state, rewritten atomically
    <root>/runs/<config_hash>/config.json
    <root>/runs/<config_hash>/metrics.json    rounds aggregated
    <root>/runs/<config_hash>/r<round>-s<seed>/plan.json
    <root>/runs/<config_hash>/r<round>-s<seed>/log.json
    <root>/runs/<config_hash>/r<round>-s<seed>/samples.csv
    <root>/runs/<config_hash>/r<round>-s<seed>/metrics.json
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import IO, Any, Callable, Iterable, Mapping, Sequence

from .config import DEVELOPER_COUNTS, FACTORS, GPU_COUNTS, ConfigError, SimulationConfig
from .engine import DEFAULT_TIMEOUT_MS, execute_http, execute_virtual
from .meters import HttpPowerSampler, PeriodicSampler, PowerSample, read_samples_csv, simulated_samples, write_samples_csv
from .metrics import (
    ImpactRatios,
    SimulationMetrics,
    aggregate_rounds,
    compute_run_metrics,
    impact_ratios,
    write_impact_csv,
)
from .mock.profiles import ProfileBook
from .planner import HOUR_MS, ReplayPlan, build_plans
from .trace_model import DeveloperSession

log = logging.getLogger(__name__)

MANIFEST_FORMAT_VERSION = 1

DEFAULT_AXES: dict[str, tuple] = {
    "developers": DEVELOPER_COUNTS,
    "streaming": ("stream", "no_stream"),
    "trigger": ("automatic", "manual"),
    "model_profile": ("starcoder", "starcoder2-7b", "starcoder2-15b"),
    "quantization_tag": ("none", "eetq", "bnb-nf4", "bnb-fp4"),
    "max_concurrent_requests": (128, 1000),
    "gpu_count": GPU_COUNTS,
}


class SweepError(RuntimeError):
    pass


# -- configuration space -------------------------------------------------------


@dataclass(frozen=True)
class ConfigSpace:
    """Per-axis values plus pins; enumeration varies the last axis fastest."""

    axes: Mapping[str, Sequence[Any]] = field(default_factory=lambda: dict(DEFAULT_AXES))
    pins: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        unknown = (set(self.axes) | set(self.pins)) - set(FACTORS)
        if unknown:
            raise ConfigError(f"unknown axes {sorted(unknown)}")
        for name, values in self.axes.items():
            if name not in self.pins and not list(values):
                raise ConfigError(f"axis {name!r} has no values")

    def _resolved(self) -> list[tuple[str, list[Any]]]:
        out = []
        for name in FACTORS:
            if name in self.pins:
                out.append((name, [self.pins[name]]))
            elif name in self.axes:
                out.append((name, list(dict.fromkeys(self.axes[name]))))
        return out

    @property
    def size(self) -> int:
        return math.prod(len(v) for _, v in self._resolved())

    def enumerate(self) -> list[SimulationConfig]:
        names, values = zip(*self._resolved()) if self._resolved() else ((), ())
        configs = [SimulationConfig(**dict(zip(names, combo))) for combo in itertools.product(*values)]
        seen: set[str] = set()
        out = []
        for c in configs:
            if c.config_hash not in seen:
                seen.add(c.config_hash)
                out.append(c)
        return out

    def to_dict(self) -> dict[str, Any]:
        return {"axes": {k: list(v) for k, v in self.axes.items()}, "pins": dict(self.pins)}

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "ConfigSpace":
        axes = obj.get("axes")
        return cls(dict(DEFAULT_AXES) if axes is None else dict(axes), dict(obj.get("pins") or {}))


def replication_count(developers: int, sessions: int = 20) -> int:
    """Rounds needed so every traced session is replayed once: ceil(K / n) for n <= K, else 1."""
    if developers < 1:
        raise ValueError("developers must be >= 1")
    return math.ceil(sessions / developers) if developers <= sessions else 1


# -- persistence ---------------------------------------------------------------


class RunState(str, Enum):
    PENDING = "pending"
    COMPLETE = "complete"
    FAILED = "failed"


def _dump(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False, allow_nan=False) + "\n"


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


class SweepStore:
    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.manifest_path = self.root / "manifest.json"

    def run_dir(self, config: SimulationConfig) -> Path:
        return self.root / "runs" / config.config_hash

    def round_dir(self, config: SimulationConfig, round_index: int, seed: int) -> Path:
        return self.run_dir(config) / f"r{round_index}-s{seed}"

    def load_manifest(self) -> dict[str, Any]:
        if not self.manifest_path.exists():
            return {"format_version": MANIFEST_FORMAT_VERSION, "runs": {}}
        obj = json.loads(self.manifest_path.read_text(encoding="utf-8"))
        if obj.get("format_version") != MANIFEST_FORMAT_VERSION:
            raise SweepError(f"unsupported manifest format {obj.get('format_version')!r}")
        return obj

    def save_manifest(self, manifest: dict[str, Any]) -> None:
        atomic_write(self.manifest_path, _dump(manifest))

    def round_metrics(self, config: SimulationConfig, round_index: int, seed: int) -> SimulationMetrics | None:
        p = self.round_dir(config, round_index, seed) / "metrics.json"
        if not p.exists():
            return None
        return SimulationMetrics.from_dict(json.loads(p.read_text(encoding="utf-8")))

    def write_round(self, plan: ReplayPlan, log_json: str, samples: Sequence[PowerSample],
                    metrics: SimulationMetrics) -> None:
        d = self.round_dir(plan.config, plan.round_index, plan.seed)
        atomic_write(d / "plan.json", plan.to_json() + "\n")
        atomic_write(d / "log.json", log_json + "\n")
        buf = io.StringIO()
        write_samples_csv(samples, buf)
        atomic_write(d / "samples.csv", buf.getvalue())
        atomic_write(d / "metrics.json", _dump(metrics.to_dict()))  # written last: marks the round done

    def write_config(self, metrics: SimulationMetrics) -> None:
        d = self.run_dir(metrics.config)
        atomic_write(d / "config.json", _dump(metrics.config.to_dict()))
        atomic_write(d / "metrics.json", _dump(metrics.to_dict()))

    def config_metrics(self, config_hash: str) -> SimulationMetrics | None:
        p = self.root / "runs" / config_hash / "metrics.json"
        if not p.exists():
            return None
        return SimulationMetrics.from_dict(json.loads(p.read_text(encoding="utf-8")))

    def completed(self) -> list[SimulationMetrics]:
        manifest = self.load_manifest()
        out = []
        for h, entry in manifest["runs"].items():
            if entry["state"] == RunState.COMPLETE.value:
                m = self.config_metrics(h)
                if m is not None:
                    out.append(m)
        return out

    def load_samples(self, config: SimulationConfig, round_index: int, seed: int) -> list[PowerSample]:
        with open(self.round_dir(config, round_index, seed) / "samples.csv", encoding="utf-8") as f:
            return read_samples_csv(f)


# -- execution -------------------------------------------------------------------


def dataset_digest(sessions: Sequence[DeveloperSession]) -> str:
    h = hashlib.sha256()
    for s in sessions:
        h.update(f"{s.developer_id}|{s.session_duration}|{len(s.requests)}\n".encode())
        for r in s.requests:
            h.update(f"{r.request_id}|{r.issue_time}|{r.outcome.value}\n".encode())
    return h.hexdigest()[:16]


def run_round_virtual(plan: ReplayPlan, book: ProfileBook, sample_interval: float = 100.0,
                      timeout_ms: float = DEFAULT_TIMEOUT_MS):
    """Execute one round on the simulated server; returns (log json, samples, metrics)."""
    server_cfg = book.server_config(plan.config)
    run, server = execute_virtual(plan, server_cfg, timeout_ms=timeout_ms)
    a, b = plan.overlap_window
    samples = simulated_samples(server.power_at, a, b, sample_interval)
    metrics = compute_run_metrics(run, samples)
    return run.to_json(), samples, metrics


def run_round_http(plan: ReplayPlan, base_url: str, *, time_scale: float = 1.0,
                   samplers: Callable[[float], Sequence[PeriodicSampler]] | None = None,
                   sample_interval: float = 100.0, timeout_ms: float = DEFAULT_TIMEOUT_MS):
    """Execute one round against a live endpoint while sampling power.

    ``samplers`` builds the meters for a given clock origin; by default the
    endpoint's own ``/v1/power`` is polled.
    """
    t0 = time.monotonic()
    meters = list(samplers(t0)) if samplers else [HttpPowerSampler(base_url, sample_interval * time_scale, t0)]
    for m in meters:
        m.start()
    try:
        run = execute_http(plan, base_url, timeout_ms=timeout_ms, time_scale=time_scale, t0=t0)
    finally:
        samples = [s for m in meters for s in m.stop()]
    if run.aborted is not None:
        raise SweepError(f"endpoint failure: {run.aborted}")
    if not samples:
        # requests can time out before a refused connection is noticed; the silent meter still tells
        source = "configured meters" if samplers else f"endpoint {base_url}"
        raise SweepError(f"endpoint failure: no power samples from the {source}")
    metrics = compute_run_metrics(run, samples, time_scale=time_scale)
    return run.to_json(), samples, metrics


def _virtual_worker(args: tuple[str, dict]) -> tuple[str, str, str]:
    plan_json, book_dict = args
    plan = ReplayPlan.from_json(plan_json)
    log_json, samples, metrics = run_round_virtual(plan, ProfileBook.from_dict(book_dict))
    buf = io.StringIO()
    write_samples_csv(samples, buf)
    return log_json, buf.getvalue(), json.dumps(metrics.to_dict())


@dataclass
class SweepResult:
    manifest: dict[str, Any]
    executed_rounds: int = 0
    failed: list[str] = field(default_factory=list)


def run_sweep(
    space: ConfigSpace | Iterable[SimulationConfig],
    sessions: Sequence[DeveloperSession],
    store: SweepStore,
    seed: int,
    *,
    book: ProfileBook | None = None,
    endpoint: str | None = None,
    time_scale: float = 1.0,
    window: float = HOUR_MS,
    force: bool = False,
    parallel: int = 1,
    after_round: Callable[[SimulationConfig, int], None] | None = None,
) -> SweepResult:
    """Execute every config x round not yet in ``store``.

    With no ``endpoint`` the simulated server runs in virtual time using ``book``.
    Completed rounds are skipped, so an interrupted sweep resumes where it
    stopped. A failing config is marked failed and the sweep moves on.
    ``after_round`` is called after each persisted round (used to inject crashes).
    """
    if endpoint is None and book is None:
        raise SweepError("virtual-time sweeps need a profile book")
    if parallel > 1 and endpoint is not None:
        raise SweepError("--parallel is only allowed for virtual-time mock sweeps")
    configs = space.enumerate() if isinstance(space, ConfigSpace) else list(space)
    manifest = store.load_manifest()
    manifest.setdefault("runs", {})
    manifest["seed"] = seed
    manifest["dataset"] = dataset_digest(sessions)
    manifest["mode"] = "virtual" if endpoint is None else "http"
    manifest["size"] = len(configs)
    store.save_manifest(manifest)
    result = SweepResult(manifest)

    for cfg in configs:
        h = cfg.config_hash
        entry = manifest["runs"].get(h)
        if entry and entry["state"] == RunState.COMPLETE.value and not force:
            continue
        entry = {"config": cfg.to_dict(), "state": RunState.PENDING.value, "rounds": None,
                 "executed_rounds": (entry or {}).get("executed_rounds", 0) if not force else 0}
        manifest["runs"][h] = entry
        try:
            plans = build_plans(sessions, cfg, seed, window)
            entry["rounds"] = len(plans)
            per_round: list[SimulationMetrics | None] = [
                None if force else store.round_metrics(cfg, p.round_index, seed) for p in plans
            ]
            todo = [p for p, m in zip(plans, per_round) if m is None]
            if parallel > 1 and len(todo) > 1:
                args = [(p.to_json(), book.to_dict()) for p in todo]
                with ProcessPoolExecutor(max_workers=parallel) as pool:
                    outputs = list(pool.map(_virtual_worker, args))
                for p, (log_json, samples_csv, metrics_json) in zip(todo, outputs):
                    m = SimulationMetrics.from_dict(json.loads(metrics_json))
                    store.write_round(p, log_json, read_samples_csv(io.StringIO(samples_csv)), m)
                    per_round[p.round_index] = m
                    entry["executed_rounds"] += 1
                    result.executed_rounds += 1
                    store.save_manifest(manifest)
                    if after_round:
                        after_round(cfg, p.round_index)
            else:
                for p in todo:
                    if endpoint is None:
                        log_json, samples, m = run_round_virtual(p, book)
                    else:
                        log_json, samples, m = run_round_http(p, endpoint, time_scale=time_scale)
                    store.write_round(p, log_json, samples, m)
                    per_round[p.round_index] = m
                    entry["executed_rounds"] += 1
                    result.executed_rounds += 1
                    store.save_manifest(manifest)
                    if after_round:
                        after_round(cfg, p.round_index)
            store.write_config(aggregate_rounds(per_round))
            entry["state"] = RunState.COMPLETE.value
            entry.pop("error", None)
        except Exception as exc:
            log.error("config %s failed: %s", h, exc)
            entry["state"] = RunState.FAILED.value
            entry["error"] = f"{type(exc).__name__}: {exc}"
            result.failed.append(h)
        store.save_manifest(manifest)
    return result


# -- reports -------------------------------------------------------------------

SCENARIO_ROWS = [
    "Number of concurrent developers",
    "Model",
    "Quantization method",
    "Number of GPUs",
    "Streaming",
    "Manual trigger emulation",
    "Average latency (s)",
    "Average server power (W)",
    "Energy per 1000 generation requests (Wh)",
    "Energy per hour per developer (Wh)",
    "CO2 emissions per hour per developer (g)",
]


def _fmt(v: float | None, digits: int = 1) -> str:
    return "" if v is None else f"{v:.{digits}f}"


def scenario_column(m: SimulationMetrics) -> list[str]:
    c = m.config
    return [
        str(c.developers),
        c.model_profile,
        "-" if c.quantization_tag == "none" else c.quantization_tag,
        str(c.gpu_count),
        "yes" if c.streaming.value == "stream" else "no",
        "yes" if c.trigger.value == "manual" else "no",
        _fmt(m.mean_latency),
        _fmt(m.mean_power),
        _fmt(m.energy_per_1000_requests),
        _fmt(m.energy_per_hour_per_developer),
        _fmt(m.co2_per_hour_per_developer),
    ]


def scenario_table(results: Sequence[SimulationMetrics], labels: Sequence[str] | None = None) -> list[list[str]]:
    """Rows of the scenario table: a header row, then one row per metric, one column per result."""
    if not results:
        raise SweepError("no completed runs to report")
    labels = list(labels) if labels else [m.config.config_hash for m in results]
    cols = [scenario_column(m) for m in results]
    return [["metric", *labels]] + [[name, *(c[i] for c in cols)] for i, name in enumerate(SCENARIO_ROWS)]


def energy_curves(results: Sequence[SimulationMetrics]) -> list[dict[str, Any]]:
    """Per-developer energy versus developer count, one curve per setting of the other factors."""
    rows = []
    for m in results:
        others = {k: v for k, v in m.config.to_dict().items() if k != "developers"}
        curve = SimulationConfig(**{**others, "developers": 1}).config_hash
        rows.append({
            "curve": curve, **others, "developers": m.config.developers,
            "energy_per_hour_per_developer": m.energy_per_hour_per_developer,
            "mean_power": m.mean_power, "mean_latency": m.mean_latency,
            "rejected_fraction": m.rejected_fraction, "saturated": m.saturated,
        })
    rows.sort(key=lambda r: (r["curve"], r["developers"]))
    return rows


CURVE_COLUMNS = ["curve", *[f for f in FACTORS if f != "developers"], "developers",
                 "energy_per_hour_per_developer", "mean_power", "mean_latency", "rejected_fraction", "saturated"]


def write_report(store: SweepStore, out_dir: Path, metric: str = "energy",
                 hashes: Sequence[str] | None = None, labels: Sequence[str] | None = None) -> dict[str, Any]:
    """Write scenario.csv, impact.csv and curves.csv; returns a summary."""
    results = store.completed()
    if hashes:
        by_hash = {m.config.config_hash: m for m in results}
        missing = [h for h in hashes if h not in by_hash]
        if missing:
            raise SweepError(f"configs not completed in store: {missing}")
        results = [by_hash[h] for h in hashes]
    if not results:
        raise SweepError("no completed runs to report")
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "scenario.csv", "w", encoding="utf-8", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(scenario_table(results, labels))
    ratios: ImpactRatios = impact_ratios(results, metric)
    with open(out_dir / "impact.csv", "w", encoding="utf-8", newline="") as f:
        write_impact_csv(ratios, f)
    with open(out_dir / "curves.csv", "w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, CURVE_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(energy_curves(results))
    return {"results": len(results), "impact_ratios": len(ratios), "diagnostic": ratios.diagnostic}


def write_metrics_json(results: Sequence[SimulationMetrics], out: IO[str]) -> None:
    out.write(_dump([m.to_dict() for m in results]))
