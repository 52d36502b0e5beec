"""Seeded synthetic telemetry shaped like a one-hour code-assistant study.

Used for tests, demos and mock calibration when the real dump is not at hand.
Defaults follow the published shape of the study: 20 developers, sessions of
roughly 30 to 80 minutes, request rates between 1.9 and 14.7 per minute, and
about 30% displayed / 11% accepted / 8.5% kept requests.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Mapping

from .trace_model import EventKind, RequestOutcome, TelemetryEvent

_WORDS = (
    "public private static final int void return if else for while new this "
    "board player column row grid token winner check move display scanner "
    "System.out.println ( ) { } ; = == != + - < > [ ] 0 1 6 7"
).split()


@dataclass
class SyntheticTraceSpec:
    developers: int = 20
    outcome_mix: Mapping[RequestOutcome, float] = field(
        default_factory=lambda: {
            RequestOutcome.CANCELED: 0.555,
            RequestOutcome.EMPTY: 0.14,
            RequestOutcome.DISPLAYED_REJECTED: 0.195,
            RequestOutcome.ACCEPTED: 0.025,
            RequestOutcome.KEPT: 0.085,
        }
    )
    min_rate: float = 1.9
    max_rate: float = 14.7
    max_new_tokens: int = 500
    include_output_tokens: bool = False


def _text(rng: random.Random, lo: int, hi: int) -> str:
    return " ".join(rng.choice(_WORDS) for _ in range(rng.randint(lo, hi)))


def _durations(rng: random.Random, n: int) -> list[float]:
    # about 30% finish within 40 min, 25% run past the hour
    out = []
    for i in range(n):
        bucket = i % 20
        if bucket < 6:
            minutes = rng.uniform(30, 40)
        elif bucket < 11:
            minutes = rng.uniform(62, 80)
        else:
            minutes = rng.uniform(40, 60)
        out.append(minutes * 60_000)
    rng.shuffle(out)
    return out


def _rates(rng: random.Random, n: int, lo: float, hi: float) -> list[float]:
    if n == 1:
        return [(lo + hi) / 2]
    rates = [lo + (hi - lo) * i / (n - 1) for i in range(n)]
    # nudge interior points so the mean lands near 9 req/min without leaving [lo, hi]
    rates = [r if i in (0, n - 1) else min(hi, max(lo, r + rng.uniform(-1.0, 1.0))) for i, r in enumerate(rates)]
    rng.shuffle(rates)
    return rates


def _draw_outcome(rng: random.Random, mix: Mapping[RequestOutcome, float]) -> RequestOutcome:
    u, acc = rng.random() * sum(mix.values()), 0.0
    for k, w in mix.items():
        acc += w
        if u < acc:
            return k
    return list(mix)[-1]


def _mutate(rng: random.Random, text: str, fraction: float) -> str:
    words = text.split()
    k = max(1, round(fraction * len(words)))
    for i in rng.sample(range(len(words)), min(k, len(words))):
        words[i] = "edited_" + words[i]
    return " ".join(words)


def _session_events(
    rng: random.Random,
    dev: str,
    outcomes: list[RequestOutcome],
    duration: float,
    spec: SyntheticTraceSpec,
) -> list[TelemetryEvent]:
    n = len(outcomes)
    events: list[tuple[float, EventKind, dict]] = []
    # gaps: canceled requests are superseded quickly, the rest absorb the remaining time
    latencies = [rng.uniform(250, 900) for _ in range(n)]
    short = [rng.uniform(60, 240) for _ in range(n)]
    n_cancel = sum(o is RequestOutcome.CANCELED for o in outcomes[:-1])
    free = duration - 2_000 - sum(short[i] for i in range(n - 1) if outcomes[i] is RequestOutcome.CANCELED)
    free -= sum(latencies[i] for i in range(n - 1) if outcomes[i] is not RequestOutcome.CANCELED)
    weights = [rng.expovariate(1.0) for _ in range(n - 1 - n_cancel)]
    scale = max(free, 0.0) / sum(weights) if weights else 0.0
    t = rng.uniform(0, 1_000)
    w_iter = iter(weights)
    for i, outcome in enumerate(outcomes):
        rid = f"{dev}-r{i:05d}"
        events.append(
            (t, EventKind.REQUEST_ISSUED,
             {"request_id": rid, "prompt": _text(rng, 40, 160), "max_new_tokens": spec.max_new_tokens})
        )
        last = i == n - 1
        if outcome is RequestOutcome.CANCELED:
            gap = short[i]
            if not last and rng.random() < 0.5:
                events.append((t + gap - 1.0, EventKind.CANCELED, {"request_id": rid}))
        else:
            lat = latencies[i]
            gap = lat + (0.0 if last else next(w_iter) * scale)
            suggestion = "" if outcome is RequestOutcome.EMPTY else _text(rng, 4, 30)
            shown = {"request_id": rid, "suggestion": suggestion}
            if spec.include_output_tokens:
                shown["output_tokens"] = max(1, round(len(suggestion.split()) * 1.6))
            events.append((t + lat, EventKind.GENERATION_SHOWN, shown))
            if outcome is RequestOutcome.DISPLAYED_REJECTED:
                events.append((t + lat + rng.uniform(300, 3_000), EventKind.REJECTED, {"request_id": rid}))
            elif outcome.accepted:
                acc_t = t + lat + rng.uniform(300, 3_000)
                events.append((acc_t, EventKind.ACCEPTED, {"request_id": rid}))
                probe_t = max(min(acc_t + 120_000, duration), acc_t + 1.0)  # never before the accept
                code = suggestion if outcome is RequestOutcome.KEPT else _mutate(rng, suggestion, 0.8)
                events.append((probe_t, EventKind.STILL_IN_CODE, {"request_id": rid, "code": code}))
        t += gap
    events.sort(key=lambda e: e[0])
    return [
        TelemetryEvent(f"{dev}-e{j:06d}", dev, round(ts, 3), kind, payload)
        for j, (ts, kind, payload) in enumerate(events)
    ]


def generate_events(
    seed: int = 0,
    spec: SyntheticTraceSpec | None = None,
    outcome_counts: Mapping[RequestOutcome, int] | None = None,
) -> list[TelemetryEvent]:
    """Generate canonical telemetry events for ``spec.developers`` sessions.

    With ``outcome_counts`` the trace holds exactly those outcomes (spread over
    developers), which makes lifecycle counts known by construction.
    """
    spec = spec or SyntheticTraceSpec()
    rng = random.Random(seed)
    durations = _durations(rng, spec.developers)
    rates = _rates(rng, spec.developers, spec.min_rate, spec.max_rate)
    if outcome_counts is not None:
        pool = [o for o, c in outcome_counts.items() for _ in range(c)]
        rng.shuffle(pool)
        total_rate = sum(r * d for r, d in zip(rates, durations))
        sizes = [int(len(pool) * r * d / total_rate) for r, d in zip(rates, durations)]
        for i in range(len(pool) - sum(sizes)):
            sizes[i % len(sizes)] += 1
        chunks, start = [], 0
        for s in sizes:
            chunks.append(pool[start:start + s])
            start += s
    else:
        chunks = []
        for r, d in zip(rates, durations):
            k = max(1, round(r * d / 60_000))
            chunks.append([_draw_outcome(rng, spec.outcome_mix) for _ in range(k)])

    events: list[TelemetryEvent] = []
    for i, (outcomes, duration) in enumerate(zip(chunks, durations)):
        if not outcomes:
            continue
        events.extend(_session_events(rng, f"dev{i:02d}", outcomes, duration, spec))
    return events
