"""Fit mock model profiles to reference scenario measurements.

Each reference scenario is a configuration with a measured mean latency (s) and
mean server power (W). The fit runs full virtual-time replays of the synthetic
trace and adjusts, per model, ``decode_base``, ``decode_slope``,
``power_saturation_batch`` and ``slots_per_gpu`` by a coordinate search on the
summed squared log errors. Usage::

    python -m assistbench.calibrate                 # report errors of the shipped book
    python -m assistbench.calibrate --fit --write   # refit and overwrite the book
"""

from __future__ import annotations

import argparse
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .config import SimulationConfig, StreamingMode, TriggerMode
from .metrics import aggregate_rounds
from .mock.profiles import ModelProfile, ProfileBook, load_profiles, save_profiles
from .planner import build_plans
from .sweep import run_round_virtual
from .synthetic import generate_events
from .trace_model import DeveloperSession, sessions_from_events

log = logging.getLogger(__name__)

TOLERANCE = 0.20


@dataclass(frozen=True)
class Reference:
    name: str
    config: SimulationConfig
    latency: float  # s
    power: float  # W


def _cfg(devs: int, model: str, gpus: int, stream: bool, quant: str = "none") -> SimulationConfig:
    return SimulationConfig(
        developers=devs,
        streaming=StreamingMode.STREAM_WITH_CANCEL if stream else StreamingMode.NO_STREAM,
        trigger=TriggerMode.AUTOMATIC if stream else TriggerMode.MANUAL_EMULATED,
        model_profile=model,
        quantization_tag=quant,
        gpu_count=gpus,
    )


REFERENCES: tuple[Reference, ...] = (
    Reference("small-frugal", _cfg(5, "starcoder2-7b", 1, False), 6.4, 249.3),
    Reference("small-performance", _cfg(5, "starcoder", 4, True), 1.2, 633.1),
    Reference("medium-frugal", _cfg(20, "starcoder2-7b", 1, False), 7.7, 363.2),
    Reference("medium-performance", _cfg(20, "starcoder", 4, True), 1.7, 898.8),
    Reference("distributed-frugal", _cfg(75, "starcoder2-7b", 4, False, "eetq"), 16.5, 858.9),
    Reference("distributed-performance", _cfg(50, "starcoder", 4, True), 2.3, 1038.2),
)


def default_sessions(seed: int = 0) -> list[DeveloperSession]:
    return sessions_from_events(generate_events(seed))


def evaluate(book: ProfileBook, sessions: Sequence[DeveloperSession], refs: Sequence[Reference] = REFERENCES,
             seed: int = 0) -> list[dict]:
    rows = []
    for ref in refs:
        per_round = [run_round_virtual(p, book)[2] for p in build_plans(sessions, ref.config, seed)]
        m = aggregate_rounds(per_round)
        lat = m.mean_latency or 0.0
        rows.append({
            "scenario": ref.name,
            "latency": lat,
            "latency_target": ref.latency,
            "latency_error": lat / ref.latency - 1.0,
            "power": m.mean_power,
            "power_target": ref.power,
            "power_error": m.mean_power / ref.power - 1.0,
        })
    return rows


def _loss(rows: list[dict]) -> float:
    return sum(math.log1p(r["latency_error"]) ** 2 + math.log1p(r["power_error"]) ** 2 for r in rows)


FIT_FIELDS = ("decode_base", "decode_slope", "power_saturation_batch", "slots_per_gpu")


def fit_model(book: ProfileBook, model: str, sessions: Sequence[DeveloperSession], seed: int = 0,
              sweeps: int = 3) -> ProfileBook:
    refs = [r for r in REFERENCES if r.config.model_profile == model]
    if not refs:
        raise ValueError(f"no reference scenario uses {model!r}")

    def with_params(params: dict) -> ProfileBook:
        m = replace(book.models[model], **params)
        return ProfileBook(book.host, {**book.models, model: m}, book.quantization)

    base = book.models[model]
    params = {f: getattr(base, f) for f in FIT_FIELDS}
    if params["power_saturation_batch"] is None:
        params["power_saturation_batch"] = float(params["slots_per_gpu"])
    best = _loss(evaluate(with_params(params), sessions, refs, seed))
    for sweep in range(sweeps):
        step = 0.5 / (sweep + 1)
        for f in FIT_FIELDS:
            for factor in (1 + step, 1 / (1 + step)):
                trial = dict(params)
                v = params[f] * factor
                trial[f] = max(1, round(v)) if f == "slots_per_gpu" else v
                if trial[f] == params[f]:
                    continue
                loss = _loss(evaluate(with_params(trial), sessions, refs, seed))
                if loss < best:
                    best, params = loss, trial
                    log.info("%s %s -> %.4g (loss %.4f)", model, f, trial[f], loss)
    return with_params(params)


def format_rows(rows: list[dict]) -> str:
    lines = [f"{'scenario':26s} {'latency':>8s} {'target':>7s} {'err':>7s} {'power':>8s} {'target':>8s} {'err':>7s}"]
    for r in rows:
        lines.append(
            f"{r['scenario']:26s} {r['latency']:8.2f} {r['latency_target']:7.1f} {r['latency_error']:+7.1%} "
            f"{r['power']:8.1f} {r['power_target']:8.1f} {r['power_error']:+7.1%}"
        )
    ok = all(abs(r["latency_error"]) <= TOLERANCE and abs(r["power_error"]) <= TOLERANCE for r in rows)
    lines.append(f"all within ±{TOLERANCE:.0%}: {ok}")
    return "\n".join(lines)


def main(argv: Sequence[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="python -m assistbench.calibrate", description=__doc__.splitlines()[0])
    ap.add_argument("--profiles", type=Path, help="profile book to start from (default: shipped book)")
    ap.add_argument("--fit", action="store_true", help="refit the models used by the reference scenarios")
    ap.add_argument("--write", type=Path, nargs="?", const=Path(__file__).parent / "data" / "profiles.yaml",
                    help="write the fitted book (default: the shipped book)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    book = load_profiles(args.profiles)
    sessions = default_sessions(args.seed)
    if args.fit:
        for model in sorted({r.config.model_profile for r in REFERENCES}):
            book = fit_model(book, model, sessions, args.seed)
    print(format_rows(evaluate(book, sessions, seed=args.seed)))
    if args.write:
        save_profiles(book, args.write)
        print(f"wrote {args.write}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
