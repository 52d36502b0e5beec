"""Turn developer sessions into deterministic, time-offset replay schedules."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Any, Sequence

from .config import SimulationConfig, StreamingMode, TriggerMode
from .trace_model import DeveloperSession, GenerationRequest

log = logging.getLogger(__name__)

HOUR_MS = 3_600_000.0
MAX_DUPLICATE_OFFSET_MS = 30_000
PLAN_FORMAT_VERSION = 1


class PlanError(ValueError):
    pass


class EmptyPlanError(PlanError):
    pass


@dataclass(frozen=True)
class AlignedSession:
    """A session placed on the simulation window; request times are window offsets."""

    developer_id: str
    requests: tuple[GenerationRequest, ...]
    start: float
    end: float


@dataclass(frozen=True)
class VirtualSession:
    index: int
    session: AlignedSession
    offset: float = 0.0
    duplicate: bool = False


@dataclass(frozen=True)
class ScheduledRequest:
    virtual_developer_id: int
    source_request_id: str
    fire_offset: float
    cancels_previous: bool
    prompt: str
    max_new_tokens: int
    output_tokens: int | None = None

    @property
    def sort_key(self) -> tuple[float, int, str]:
        return (self.fire_offset, self.virtual_developer_id, self.source_request_id)

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ReplayPlan:
    config: SimulationConfig
    seed: int
    schedule: tuple[ScheduledRequest, ...]
    window: float = HOUR_MS
    overlap_window: tuple[float, float] = (0.0, HOUR_MS)
    round_index: int = 0
    round_count: int = 1
    developers: tuple[dict[str, Any], ...] = field(default=())

    @property
    def developer_count(self) -> int:
        return len(self.developers) or len({r.virtual_developer_id for r in self.schedule})

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": PLAN_FORMAT_VERSION,
            "config": self.config.to_dict(),
            "seed": self.seed,
            "round_index": self.round_index,
            "round_count": self.round_count,
            "window": self.window,
            "overlap_window": list(self.overlap_window),
            "developers": list(self.developers),
            "schedule": [r.to_dict() for r in self.schedule],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "ReplayPlan":
        if obj.get("format_version") != PLAN_FORMAT_VERSION:
            raise PlanError(f"unsupported plan format {obj.get('format_version')!r}")
        return cls(
            config=SimulationConfig.from_dict(obj["config"]),
            seed=int(obj["seed"]),
            schedule=tuple(ScheduledRequest(**r) for r in obj["schedule"]),
            window=float(obj["window"]),
            overlap_window=tuple(obj["overlap_window"]),
            round_index=int(obj["round_index"]),
            round_count=int(obj["round_count"]),
            developers=tuple(obj["developers"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "ReplayPlan":
        return cls.from_dict(json.loads(text))


def align_sessions(sessions: Sequence[DeveloperSession], window: float = HOUR_MS) -> list[AlignedSession]:
    """Place sessions on a common window with their midpoints at ``window / 2``.

    Sessions at least as long as the window are cut to it and start at 0. Shorter
    ones are delayed by ``(window - duration) / 2``. Sessions left without requests
    are dropped.
    """
    if window <= 0:
        raise PlanError("window must be positive")
    out = []
    for s in sessions:
        if s.session_duration >= window:
            shift, end = 0.0, window
            reqs = tuple(r for r in s.requests if r.issue_time < window)
        else:
            shift = (window - s.session_duration) / 2.0
            end = shift + s.session_duration
            reqs = tuple(_shifted(r, shift) for r in s.requests)
        if not reqs:
            log.warning("session %s has no requests inside the window, dropped", s.developer_id)
            continue
        out.append(AlignedSession(s.developer_id, reqs, shift, end))
    return out


def _shifted(r: GenerationRequest, by: float) -> GenerationRequest:
    if by == 0:
        return r
    return GenerationRequest(
        r.request_id, r.developer_id, r.issue_time + by, r.prompt, r.max_new_tokens,
        r.outcome, r.latency_observed, r.suggestion, r.output_tokens,
    )


def filter_trigger(sessions: Sequence[DeveloperSession], mode: TriggerMode) -> list[DeveloperSession]:
    """Under manual-trigger emulation keep only requests that were displayed; times unchanged."""
    mode = TriggerMode(mode)
    if mode is TriggerMode.AUTOMATIC:
        return list(sessions)
    return [
        DeveloperSession(s.developer_id, tuple(r for r in s.requests if r.outcome.displayed), s.session_duration)
        for s in sessions
    ]


def _offset_fits(session: AlignedSession, offset: float, window: float) -> bool:
    return session.requests[0].issue_time + offset < window


def expand_developers(
    sessions: Sequence[AlignedSession], n: int, seed: int, window: float = HOUR_MS
) -> list[list[VirtualSession]]:
    """Assign ``n`` virtual developers per round.

    With ``n <= K`` sessions the shuffled sessions are split into ``ceil(K / n)``
    disjoint rounds; a short final round is padded with offset duplicates of
    sessions from other rounds. With ``n > K`` there is a single round holding
    every session once plus ``n - K`` duplicates drawn with replacement, each
    delayed by a random 0 to 30 s.
    """
    k = len(sessions)
    if k < 1 or n < 1:
        raise PlanError("need at least one session and one developer")
    rng = random.Random(seed)

    def duplicate_of(pool: Sequence[int]) -> tuple[int, float]:
        for _ in range(1000):
            src = rng.choice(pool)
            off = float(rng.randint(0, MAX_DUPLICATE_OFFSET_MS))
            if _offset_fits(sessions[src], off, window):
                return src, off
        raise PlanError("could not place a duplicate session inside the window")

    if n > k:
        members = [(i, 0.0, False) for i in range(k)]
        for _ in range(n - k):
            src, off = duplicate_of(range(k))
            members.append((src, off, True))
        rounds = [members]
    else:
        order = list(range(k))
        rng.shuffle(order)
        rounds = []
        for start in range(0, k, n):
            chunk = sorted(order[start:start + n])
            members = [(i, 0.0, False) for i in chunk]
            if len(chunk) < n:
                outside = [i for i in range(k) if i not in chunk]
                for src in rng.sample(outside, n - len(chunk)):
                    off = float(rng.randint(0, MAX_DUPLICATE_OFFSET_MS))
                    if not _offset_fits(sessions[src], off, window):
                        off = 0.0
                    members.append((src, off, True))
            rounds.append(members)

    return [
        [VirtualSession(v, sessions[src], off, dup) for v, (src, off, dup) in enumerate(members)]
        for members in rounds
    ]


def round_count(sessions: int, developers: int) -> int:
    return math.ceil(sessions / developers) if developers <= sessions else 1


def _schedule_for(vs: VirtualSession, streaming: StreamingMode, window: float) -> list[ScheduledRequest]:
    out = []
    for r in vs.session.requests:
        t = r.issue_time + vs.offset
        if t >= window:
            continue
        out.append(
            ScheduledRequest(
                virtual_developer_id=vs.index,
                source_request_id=r.request_id,
                fire_offset=t,
                cancels_previous=streaming is StreamingMode.STREAM_WITH_CANCEL and bool(out),
                prompt=r.prompt,
                max_new_tokens=r.max_new_tokens,
                output_tokens=r.output_tokens,
            )
        )
    return out


def build_plans(
    sessions: Sequence[DeveloperSession],
    config: SimulationConfig,
    seed: int,
    window: float = HOUR_MS,
) -> list[ReplayPlan]:
    """Build one plan per replication round (trigger filter, alignment, expansion)."""
    aligned = align_sessions(filter_trigger(sessions, config.trigger), window)
    if not aligned:
        raise EmptyPlanError("no session has requests left to replay")
    rounds = expand_developers(aligned, config.developers, seed, window)
    plans = []
    for idx, members in enumerate(rounds):
        schedule: list[ScheduledRequest] = []
        devs = []
        for vs in members:
            schedule.extend(_schedule_for(vs, config.streaming, window))
            devs.append({
                "index": vs.index,
                "source": vs.session.developer_id,
                "offset": vs.offset,
                "duplicate": vs.duplicate,
                "span": [vs.session.start + vs.offset, min(vs.session.end + vs.offset, window)],
            })
        if not schedule:
            raise EmptyPlanError(f"round {idx} has an empty schedule")
        schedule.sort(key=lambda r: r.sort_key)
        overlap = (max(d["span"][0] for d in devs), min(d["span"][1] for d in devs))
        plans.append(
            ReplayPlan(config, seed, tuple(schedule), window, overlap, idx, len(rounds), tuple(devs))
        )
    return plans


def build_plan(
    sessions: Sequence[DeveloperSession],
    config: SimulationConfig,
    seed: int,
    window: float = HOUR_MS,
    round_index: int = 0,
) -> ReplayPlan:
    plans = build_plans(sessions, config, seed, window)
    if not 0 <= round_index < len(plans):
        raise PlanError(f"round {round_index} out of range (plan has {len(plans)} rounds)")
    return plans[round_index]
