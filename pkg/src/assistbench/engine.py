"""Execute replay plans against the simulated server (virtual time) or over HTTP (real time)."""

from __future__ import annotations

import asyncio
import heapq
import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Sequence

import httpx

from .config import StreamingMode
from .mock.profiles import ServerConfig
from .mock.simulator import BatchingServer, SeqState, draw_output_tokens, estimate_prompt_tokens
from .planner import ReplayPlan, ScheduledRequest

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_MS = 300_000.0
JITTER_TARGET_MS = 10.0


class RequestStatus(str, Enum):
    COMPLETED = "completed"
    CANCELED = "canceled"
    REJECTED = "rejected_by_server"
    TIMED_OUT = "timed_out"
    FAILED = "failed"  # transport error


class ClockMode(str, Enum):
    REAL = "real"
    VIRTUAL = "virtual"


@dataclass
class RequestRecord:
    virtual_developer_id: int
    source_request_id: str
    fire_offset: float
    send_time: float | None
    status: RequestStatus
    completion_time: float | None = None
    end_time: float | None = None
    tokens_generated: int = 0
    round_index: int = 0
    jitter: float = 0.0
    error: str | None = None

    @property
    def latency(self) -> float | None:
        if self.status is RequestStatus.COMPLETED and self.completion_time is not None and self.send_time is not None:
            return self.completion_time - self.send_time
        return None

    @property
    def in_flight_interval(self) -> tuple[float, float] | None:
        """Time the request occupied the server connection, None if never sent or refused."""
        if self.send_time is None or self.status in (RequestStatus.REJECTED, RequestStatus.FAILED):
            return None
        return (self.send_time, self.end_time if self.end_time is not None else self.send_time)

    def to_dict(self) -> dict[str, Any]:
        d = dict(self.__dict__)
        d["status"] = self.status.value
        return d

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "RequestRecord":
        return cls(**{**obj, "status": RequestStatus(obj["status"])})


@dataclass
class RawRunLog:
    plan: ReplayPlan
    records: list[RequestRecord]
    started: float
    finished: float
    clock: ClockMode
    aborted: str | None = None
    peak_admitted: int | None = None

    @property
    def config(self):
        return self.plan.config

    @property
    def seed(self) -> int:
        return self.plan.seed

    def status_counts(self) -> dict[RequestStatus, int]:
        out = {s: 0 for s in RequestStatus}
        for r in self.records:
            out[r.status] += 1
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.plan.config.to_dict(),
            "config_hash": self.plan.config.config_hash,
            "seed": self.plan.seed,
            "round_index": self.plan.round_index,
            "clock": self.clock.value,
            "started": self.started,
            "finished": self.finished,
            "aborted": self.aborted,
            "peak_admitted": self.peak_admitted,
            "records": [r.to_dict() for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, obj: dict[str, Any], plan: ReplayPlan) -> "RawRunLog":
        return cls(
            plan=plan,
            records=[RequestRecord.from_dict(r) for r in obj["records"]],
            started=obj["started"],
            finished=obj["finished"],
            clock=ClockMode(obj["clock"]),
            aborted=obj.get("aborted"),
            peak_admitted=obj.get("peak_admitted"),
        )


def max_in_flight_per_developer(records: Sequence[RequestRecord]) -> int:
    """Largest number of simultaneously open requests of any single developer."""
    events: dict[int, list[tuple[float, int]]] = {}
    for r in records:
        iv = r.in_flight_interval
        if iv is None:
            continue
        start, end = iv
        ev = events.setdefault(r.virtual_developer_id, [])
        if end > start:
            # ends sort before starts at equal times: a handover is not an overlap
            ev.append((start, 1))
            ev.append((end, -1))
    worst = 0
    for ev in events.values():
        ev.sort(key=lambda e: (e[0], e[1]))
        cur = 0
        for _, d in ev:
            cur += d
            worst = max(worst, cur)
    return worst


def output_tokens_for(req: ScheduledRequest, mean_tokens: float, seed: int) -> int:
    """Generation length: the traced value if known, else a seeded draw around ``mean_tokens``.

    The draw depends only on (seed, developer, request) so a request gets the same
    length under every configuration.
    """
    if req.output_tokens is not None:
        return max(1, min(int(req.output_tokens), req.max_new_tokens))
    return draw_output_tokens(f"{seed}:{req.virtual_developer_id}:{req.source_request_id}",
                              mean_tokens, req.max_new_tokens)


def execute_virtual(
    plan: ReplayPlan,
    server_config: ServerConfig,
    *,
    timeout_ms: float = DEFAULT_TIMEOUT_MS,
) -> tuple[RawRunLog, BatchingServer]:
    """Replay ``plan`` on a fresh simulated server in virtual time.

    Requests fire exactly at their offsets. A request that cancels its
    predecessor withdraws the developer's in-flight request at that instant.
    """
    server = BatchingServer(server_config)
    mean = server_config.model_profile.mean_output_tokens
    records: list[RequestRecord] = []
    seqs: dict[int, Any] = {}
    in_flight: dict[int, int] = {}  # developer -> record index

    # events: (time, priority, seq, action, payload); timeouts before fires at equal times
    heap: list[tuple[float, int, int, str, int]] = []
    for i, req in enumerate(plan.schedule):
        heapq.heappush(heap, (req.fire_offset, 1, i, "fire", i))
    counter = len(plan.schedule)

    def settle(idx: int) -> None:
        rec, seq = records[idx], seqs[idx]
        if rec.status is not RequestStatus.COMPLETED or rec.completion_time is not None:
            return
        if seq.state is SeqState.FINISHED:
            rec.completion_time = rec.end_time = seq.finished_at
            rec.tokens_generated = seq.generated

    while heap:
        t, _, _, action, payload = heapq.heappop(heap)
        server.advance_to(t)
        if action == "timeout":
            seq = seqs[payload]
            rec = records[payload]
            if seq.active and rec.end_time is None:
                server.cancel(seq.seq_id, t)
                rec.status, rec.end_time = RequestStatus.TIMED_OUT, t
                rec.tokens_generated = seq.generated
            continue

        req = plan.schedule[payload]
        dev = req.virtual_developer_id
        prev = in_flight.get(dev)
        if req.cancels_previous and prev is not None and records[prev].end_time is None:
            pseq = seqs[prev]
            if pseq.active:
                server.cancel(pseq.seq_id, t)
                records[prev].status, records[prev].end_time = RequestStatus.CANCELED, t
                records[prev].tokens_generated = pseq.generated
        seq_id = f"{plan.round_index}:{dev}:{payload}"
        target = output_tokens_for(req, mean, plan.seed)
        seq = server.submit(seq_id, t, estimate_prompt_tokens(req.prompt), target)
        idx = len(records)
        if seq is None:
            records.append(RequestRecord(dev, req.source_request_id, req.fire_offset, t,
                                         RequestStatus.REJECTED, end_time=t, round_index=plan.round_index))
            continue
        records.append(RequestRecord(dev, req.source_request_id, req.fire_offset, t,
                                     RequestStatus.COMPLETED, round_index=plan.round_index))
        seqs[idx] = seq
        in_flight[dev] = idx
        counter += 1
        heapq.heappush(heap, (t + timeout_ms, 0, counter, "timeout", idx))
        # settle requests that may already be done so timeouts see final states
        if prev is not None:
            settle(prev)

    server.run_until_idle()
    for idx in seqs:
        settle(idx)
    for idx, rec in enumerate(records):
        if rec.status is RequestStatus.COMPLETED and rec.completion_time is None:
            raise RuntimeError(f"record {idx} never reached a terminal state")  # pragma: no cover
    run = RawRunLog(plan, records, 0.0, server.now, ClockMode.VIRTUAL, peak_admitted=server.peak_admitted)
    return run, server


# -- real clock -----------------------------------------------------------


class RequestHandle:
    """Client-side handle of one scheduled request in a real-clock run."""

    def __init__(self, record: RequestRecord, clock):
        self.record = record
        self._clock = clock
        self.task: asyncio.Task | None = None
        self._canceled_before_send = False

    @property
    def terminal(self) -> bool:
        return self.record.end_time is not None

    def cancel(self) -> bool:
        """Abort the request by closing its connection; no-op once terminal."""
        if self.terminal:
            return False
        now = self._clock()
        self.record.status = RequestStatus.CANCELED
        self.record.end_time = now
        if self.task is None:
            self._canceled_before_send = True
            self.record.send_time = None
        else:
            self.task.cancel()
        return True


def _sse_payloads(lines):
    """Yield decoded JSON frames from an async iterator of SSE lines."""

    async def gen():
        async for line in lines:
            if line.startswith("data:"):
                data = line[5:].strip()
                if data:
                    yield json.loads(data)

    return gen()


async def _send(client: httpx.AsyncClient, url: str, req: ScheduledRequest, handle: RequestHandle,
                stream: bool, timeout_s: float, clock) -> None:
    rec = handle.record
    body = {"prompt": req.prompt, "max_new_tokens": req.max_new_tokens, "stream": stream}
    if req.output_tokens is not None:
        body["output_tokens"] = req.output_tokens
    try:
        async with asyncio.timeout(timeout_s) if hasattr(asyncio, "timeout") else _Deadline(timeout_s):
            if stream:
                async with client.stream("POST", url, json=body) as resp:
                    if resp.status_code == 429:
                        rec.status, rec.end_time = RequestStatus.REJECTED, clock()
                        return
                    resp.raise_for_status()
                    async for frame in _sse_payloads(resp.aiter_lines()):
                        if frame.get("done"):
                            rec.tokens_generated = int(frame.get("tokens", rec.tokens_generated))
                            break
                        rec.tokens_generated += 1
            else:
                resp = await client.post(url, json=body)
                if resp.status_code == 429:
                    rec.status, rec.end_time = RequestStatus.REJECTED, clock()
                    return
                resp.raise_for_status()
                rec.tokens_generated = int(resp.json().get("tokens", 0))
        rec.status = RequestStatus.COMPLETED
        rec.completion_time = rec.end_time = clock()
    except (asyncio.TimeoutError, TimeoutError):
        rec.status, rec.end_time = RequestStatus.TIMED_OUT, clock()
    except httpx.ConnectError as exc:
        rec.status, rec.end_time, rec.error = RequestStatus.FAILED, clock(), f"connect: {exc}"
        raise
    except httpx.HTTPError as exc:
        rec.status, rec.end_time, rec.error = RequestStatus.FAILED, clock(), str(exc)


class _Deadline:
    """asyncio.timeout stand-in for Python < 3.11."""

    def __init__(self, seconds: float):
        self.seconds = seconds
        self._handle = None
        self._task = None
        self.expired = False

    async def __aenter__(self):
        self._task = asyncio.current_task()
        loop = asyncio.get_running_loop()
        self._handle = loop.call_later(self.seconds, self._expire)
        return self

    def _expire(self):
        self.expired = True
        self._task.cancel()

    async def __aexit__(self, exc_type, exc, tb):
        self._handle.cancel()
        if exc_type is asyncio.CancelledError and self.expired:
            raise asyncio.TimeoutError
        return False


async def execute_http_async(
    plan: ReplayPlan,
    base_url: str,
    *,
    timeout_ms: float = DEFAULT_TIMEOUT_MS,
    time_scale: float = 1.0,
    headers: dict[str, str] | None = None,
    transport: httpx.AsyncBaseTransport | None = None,
    t0: float | None = None,
) -> RawRunLog:
    """Replay ``plan`` against a live server speaking the /v1/generate protocol.

    One task per virtual developer fires its requests at ``fire_offset * time_scale``
    and records the firing jitter; ``timeout_ms`` is scaled the same way. An unreachable endpoint aborts the run and the
    partial log is returned. ``t0`` (a ``time.monotonic()`` reading) pins the run
    clock origin so power samplers can share it.
    """
    loop = asyncio.get_running_loop()
    if t0 is None:
        t0 = loop.time()

    def clock() -> float:
        return (loop.time() - t0) * 1000.0

    url = base_url.rstrip("/") + "/v1/generate"
    stream = plan.config.streaming is StreamingMode.STREAM_WITH_CANCEL
    handles: list[RequestHandle] = []
    abort: list[str] = []
    by_dev: dict[int, list[ScheduledRequest]] = {}
    for req in plan.schedule:
        by_dev.setdefault(req.virtual_developer_id, []).append(req)

    limits = httpx.Limits(max_connections=None, max_keepalive_connections=100)
    async with httpx.AsyncClient(timeout=httpx.Timeout(None), limits=limits, headers=headers,
                                 transport=transport) as client:

        async def developer(reqs: list[ScheduledRequest]) -> None:
            prev: RequestHandle | None = None
            tasks = []
            for req in reqs:
                due = req.fire_offset * time_scale
                delay = due / 1000.0 - (loop.time() - t0)
                if delay > 0:
                    await asyncio.sleep(delay)
                if abort:
                    return
                if req.cancels_previous and prev is not None:
                    prev.cancel()
                rec = RequestRecord(req.virtual_developer_id, req.source_request_id, req.fire_offset,
                                    clock(), RequestStatus.COMPLETED, round_index=plan.round_index)
                rec.jitter = rec.send_time - due
                if rec.jitter > JITTER_TARGET_MS:
                    log.debug("request %s fired %.1f ms late", req.source_request_id, rec.jitter)
                h = RequestHandle(rec, clock)
                handles.append(h)
                h.task = asyncio.create_task(_guard(client, url, req, h, stream, timeout_ms * time_scale / 1000.0, clock))
                tasks.append(h.task)
                prev = h
            await asyncio.gather(*tasks, return_exceptions=True)

        async def _guard(client, url, req, h, stream, timeout_s, clock):
            try:
                await _send(client, url, req, h, stream, timeout_s, clock)
            except asyncio.CancelledError:
                pass  # status already set by RequestHandle.cancel
            except httpx.ConnectError as exc:
                abort.append(f"{type(exc).__name__}: {exc}")
                for other in handles:
                    if other.task is not None and other is not h:
                        other.task.cancel()

        await asyncio.gather(*(developer(r) for r in by_dev.values()))

    for h in handles:
        rec = h.record
        if rec.end_time is None:
            # tasks torn down by an abort
            rec.status, rec.end_time, rec.error = RequestStatus.FAILED, clock(), rec.error or "aborted"
    records = sorted((h.record for h in handles), key=lambda r: (r.fire_offset, r.virtual_developer_id, r.source_request_id))
    return RawRunLog(plan, records, 0.0, clock(), ClockMode.REAL, aborted=abort[0] if abort else None)


def execute_http(plan: ReplayPlan, base_url: str, **kwargs) -> RawRunLog:
    return asyncio.run(execute_http_async(plan, base_url, **kwargs))


def execute(plan: ReplayPlan, endpoint: ServerConfig | str, clock: ClockMode | str = ClockMode.VIRTUAL, **kwargs):
    """Run a plan: a ServerConfig runs in virtual time, a URL string over HTTP in real time."""
    clock = ClockMode(clock)
    if clock is ClockMode.VIRTUAL:
        if not isinstance(endpoint, ServerConfig):
            raise TypeError("virtual-clock runs need a mock ServerConfig")
        return execute_virtual(plan, endpoint, **kwargs)[0]
    if not isinstance(endpoint, str):
        raise TypeError("real-clock runs need an endpoint URL")
    return execute_http(plan, endpoint, **kwargs)
