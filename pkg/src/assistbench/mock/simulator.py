"""Discrete-event model of a continuous-batching generation server.

Time is in milliseconds and only moves when the owner calls :meth:`advance_to`,
so the same object serves virtual-time replays and, driven by a wall clock,
the HTTP mock.

Step rule: every step emits one token per running sequence and lasts
``latency_multiplier * (decode_base + decode_slope * batch)`` plus the prefill
cost of sequences that joined at its start. Arrivals wait for the next step
boundary; an idle server starts a step on arrival.
"""

from __future__ import annotations

import bisect
import csv
import hashlib
import math
import random
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import IO, Iterator

from .profiles import ServerConfig


class SeqState(str, Enum):
    QUEUED = "queued"
    RUNNING = "running"
    FINISHED = "finished"
    CANCELED = "canceled"


@dataclass
class Sequence:
    seq_id: str
    arrival: float
    prompt_tokens: int
    target_tokens: int
    state: SeqState = SeqState.QUEUED
    generated: int = 0
    joined_at: float | None = None
    finished_at: float | None = None
    canceled_at: float | None = None
    cancel_requested: bool = False

    @property
    def active(self) -> bool:
        return self.state in (SeqState.QUEUED, SeqState.RUNNING)


@dataclass
class StepSegment:
    """Consecutive identical steps; ``steps`` boundaries between ``start`` and ``end``."""

    start: float
    end: float
    steps: int
    duration: float
    batch_size: int
    queue_depth: int
    watts: float


STEP_LOG_COLUMNS = ["start_ms", "end_ms", "steps", "step_ms", "batch_size", "queue_depth", "watts"]


def estimate_prompt_tokens(prompt: str) -> int:
    return math.ceil(len(prompt) / 4)


def draw_output_tokens(key: str, mean_tokens: float, cap: int) -> int:
    """Seeded generation length around ``mean_tokens``; the same key always gives the same length."""
    rng = random.Random(int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "big"))
    n = round(rng.gammavariate(2.0, mean_tokens / 2.0))
    return max(1, min(int(n), cap))


class BatchingServer:
    def __init__(self, config: ServerConfig):
        self.config = config
        self.now = 0.0
        self.queue: deque[Sequence] = deque()
        self.running: list[Sequence] = []
        self.sequences: dict[str, Sequence] = {}
        self.step_log: list[StepSegment] = []
        self.rejected = 0
        self.peak_admitted = 0
        self._step_end: float | None = None
        self._step_prefill = False
        self._seg_starts: list[float] = []

    # -- admission -------------------------------------------------------
    @property
    def admitted(self) -> int:
        return len(self.queue) + len(self.running)

    def submit(self, seq_id: str, t: float, prompt_tokens: int, target_tokens: int) -> Sequence | None:
        """Offer a request at time ``t``; returns None when admission is refused (overload)."""
        self.advance_to(t)
        if seq_id in self.sequences:
            raise ValueError(f"duplicate sequence id {seq_id!r}")
        if self.admitted >= self.config.max_concurrent_requests:
            self.rejected += 1
            return None
        seq = Sequence(seq_id, t, prompt_tokens, max(1, int(target_tokens)))
        self.sequences[seq_id] = seq
        self.queue.append(seq)
        self.peak_admitted = max(self.peak_admitted, self.admitted)
        if self._step_end is None:
            self._start_step(t)
        elif self._step_starts_at(t):
            # a step that begins at this very instant can still take the newcomer
            self._restart_step(t)
        return seq

    def cancel(self, seq_id: str, t: float) -> bool:
        """Withdraw a sequence. Queued ones leave at once, running ones at the next boundary."""
        self.advance_to(t)
        seq = self.sequences.get(seq_id)
        if seq is None or not seq.active or seq.cancel_requested:
            return False
        seq.cancel_requested = True
        seq.canceled_at = t
        if seq.state is SeqState.QUEUED:
            self.queue.remove(seq)
            seq.state = SeqState.CANCELED
        elif self._step_starts_at(t):
            # nor does a step that begins at this instant keep a withdrawn sequence
            self.running.remove(seq)
            seq.state = SeqState.CANCELED
            self._restart_step(t)
        return True

    def _step_starts_at(self, t: float) -> bool:
        return self._step_end is not None and self._step_end - self.step_log[-1].duration == t

    def _restart_step(self, t: float) -> None:
        seg = self.step_log[-1]
        if seg.steps == 1:
            self.step_log.pop()
            del self._seg_starts[len(self.step_log):]
        else:
            seg.steps -= 1
            seg.end = t
        self._start_step(t)

    def cancel_all(self, t: float) -> int:
        return sum(self.cancel(s.seq_id, t) for s in list(self.queue) + list(self.running))

    # -- stepping --------------------------------------------------------
    def _step_duration(self, batch: int, prefill_tokens: int) -> float:
        p = self.config.model_profile
        d = p.latency_multiplier * (p.decode_base + p.decode_slope * batch + p.prefill_cost * prefill_tokens / 1000.0)
        return max(d, self.config.step_quantum)

    def _start_step(self, t: float) -> None:
        cap = self.config.running_capacity
        while self.queue and len(self.running) < cap:
            seq = self.queue.popleft()
            seq.state = SeqState.RUNNING
            seq.joined_at = t
            self.running.append(seq)
        prefill = sum(s.prompt_tokens for s in self.running if s.joined_at == t)
        if not self.running:
            self._step_end = None
            return
        d = self._step_duration(len(self.running), prefill)
        self._step_end = t + d
        self._step_prefill = prefill > 0
        self.step_log.append(
            StepSegment(t, t + d, 1, d, len(self.running), len(self.queue), self.watts_for(len(self.running)))
        )

    def _boundary(self) -> None:
        t = self._step_end
        assert t is not None
        keep = []
        for seq in self.running:
            if seq.cancel_requested:
                seq.state = SeqState.CANCELED
                continue
            seq.generated += 1
            if seq.generated >= seq.target_tokens:
                seq.state = SeqState.FINISHED
                seq.finished_at = t
            else:
                keep.append(seq)
        self.running = keep
        self.now = t
        self._start_step(t)

    def _fast_forward(self, t: float) -> None:
        """Process several identical steps at once when nothing can change between them."""
        if self._step_prefill or self._step_end is None:
            return
        if self.queue and len(self.running) < self.config.running_capacity:
            return
        if any(s.cancel_requested for s in self.running):
            return
        seg = self.step_log[-1]
        d = seg.duration
        headroom = min(s.target_tokens - s.generated for s in self.running) - 1
        if math.isinf(t):
            k = headroom
        else:
            k = min(headroom, int((t - self._step_end) // d) + 1 if t >= self._step_end else 0)
        if k < 1:
            return
        for s in self.running:
            s.generated += k
        self._step_end += k * d
        seg.end = self._step_end
        seg.steps += k
        self.now = self._step_end - d

    def advance_to(self, t: float) -> None:
        """Process every step boundary at or before ``t``."""
        if t < self.now:
            raise ValueError(f"time moves forward only ({t} < {self.now})")
        while self._step_end is not None and self._step_end <= t:
            self._fast_forward(t)
            if self._step_end is not None and self._step_end <= t:
                self._boundary()
        self.now = t

    @property
    def next_boundary(self) -> float | None:
        return self._step_end

    def run_until_idle(self, limit: float = math.inf) -> float:
        """Run steps until nothing is queued or running (or ``limit`` is reached)."""
        while self._step_end is not None and self._step_end <= limit:
            self._fast_forward(limit)
            if self._step_end is not None and self._step_end <= limit:
                self._boundary()
        return self.now

    # -- power -----------------------------------------------------------
    def watts_for(self, batch: int) -> float:
        cfg = self.config
        util = min(1.0, max(0.0, batch / cfg.power_saturation_batch))
        return cfg.idle_power + cfg.per_gpu_active_power * cfg.gpu_count * util

    def power_now(self) -> float:
        return self.watts_for(len(self.running) if self._step_end is not None else 0)

    def power_at(self, t: float) -> float:
        log = self.step_log
        i = bisect.bisect_right(self._starts(), t) - 1
        if i >= 0 and t < log[i].end:
            return log[i].watts
        return self.config.idle_power

    def _starts(self) -> list[float]:
        cache = self._seg_starts
        if len(cache) != len(self.step_log):
            cache.extend(s.start for s in self.step_log[len(cache):])
        return cache

    def energy_joules(self, start: float, end: float) -> float:
        """Exact integral of the power model over [start, end] (ms in, joules out)."""
        busy = 0.0
        total = 0.0
        for seg in self.step_log:
            a, b = max(seg.start, start), min(seg.end, end)
            if b > a:
                total += seg.watts * (b - a)
                busy += b - a
        total += self.config.idle_power * ((end - start) - busy)
        return total / 1000.0

    def iter_steps(self) -> Iterator[tuple[float, int, int, float]]:
        """Expand segments into (time, batch, queue_depth, watts) per step."""
        for seg in self.step_log:
            for i in range(seg.steps):
                yield seg.start + i * seg.duration, seg.batch_size, seg.queue_depth, seg.watts

    def dump_step_log(self, out: IO[str], expand: bool = False) -> None:
        w = csv.writer(out, lineterminator="\n")
        if expand:
            w.writerow(["time_ms", "batch_size", "queue_depth", "watts"])
            w.writerows(self.iter_steps())
            return
        w.writerow(STEP_LOG_COLUMNS)
        for s in self.step_log:
            w.writerow([s.start, s.end, s.steps, s.duration, s.batch_size, s.queue_depth, s.watts])
