"""Telemetry parsing, request lifecycle reconstruction and usage statistics.

Canonical JSON-lines schema, one event per line::

    {"event_id": "e000017", "developer_id": "dev03", "timestamp": 81234.5,
     "kind": "generation_shown", "payload": {"request_id": "r12", "suggestion": "..."}}

``timestamp`` is milliseconds since the start of the developer's session.
``kind`` is one of :class:`EventKind`. Recognised payload keys:

=================  ==================  =========================================
key                kinds               meaning
=================  ==================  =========================================
request_id         all                 links follow-up events to their request;
                                       defaults to the latest issued request
prompt             request_issued      prompt text sent to the model
max_new_tokens     request_issued      generation budget (default 500)
suggestion         generation_shown,   completion text; empty text marks an
                   accepted            empty completion
output_tokens      generation_shown    tokens the model actually produced
retained           still_in_code       probe verdict, bool
code               still_in_code       current code region, used to compute
                                       the verdict when ``retained`` is absent
=================  ==================  =========================================

See :mod:`assistbench.adapters` for mapping raw Copilot telemetry to this schema.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import IO, Any, Iterable, Iterator, Sequence

log = logging.getLogger(__name__)

DEFAULT_MAX_NEW_TOKENS = 500
RETENTION_THRESHOLD = 0.5


class EventKind(str, Enum):
    REQUEST_ISSUED = "request_issued"
    GENERATION_SHOWN = "generation_shown"
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    CANCELED = "canceled"
    STILL_IN_CODE = "still_in_code"


class RequestOutcome(str, Enum):
    CANCELED = "canceled"
    EMPTY = "empty"
    DISPLAYED_REJECTED = "displayed_rejected"
    ACCEPTED = "accepted"
    KEPT = "kept"

    @property
    def displayed(self) -> bool:
        return self in _DISPLAYED

    @property
    def accepted(self) -> bool:
        return self in (RequestOutcome.ACCEPTED, RequestOutcome.KEPT)


_DISPLAYED = frozenset(
    {RequestOutcome.DISPLAYED_REJECTED, RequestOutcome.ACCEPTED, RequestOutcome.KEPT}
)


class TraceError(ValueError):
    """Base class for trace content problems."""


class EmptyDatasetError(TraceError):
    pass


class MalformedLineError(TraceError):
    def __init__(self, problems: Sequence[tuple[int, str]]):
        self.problems = list(problems)
        first = ", ".join(f"line {n}: {why}" for n, why in self.problems[:5])
        super().__init__(f"{len(self.problems)} malformed line(s): {first}")


class UndefinedRetentionError(ValueError):
    pass


@dataclass(frozen=True)
class TelemetryEvent:
    event_id: str
    developer_id: str
    timestamp: float
    kind: EventKind
    payload: dict[str, Any] = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self) -> None:
        if not (self.timestamp >= 0 and math.isfinite(self.timestamp)):
            raise TraceError(f"event {self.event_id}: timestamp must be a finite value >= 0")

    @property
    def sort_key(self) -> tuple[float, str]:
        return (self.timestamp, self.event_id)

    @property
    def request_id(self) -> str | None:
        rid = self.payload.get("request_id")
        return None if rid is None else str(rid)

    def to_dict(self) -> dict[str, Any]:
        return {
            "event_id": self.event_id,
            "developer_id": self.developer_id,
            "timestamp": self.timestamp,
            "kind": self.kind.value,
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "TelemetryEvent":
        if not isinstance(obj, dict):
            raise TraceError("line is not a JSON object")
        missing = [k for k in ("event_id", "developer_id", "timestamp", "kind") if k not in obj]
        if missing:
            raise TraceError(f"missing field(s): {', '.join(missing)}")
        try:
            kind = EventKind(obj["kind"])
        except ValueError:
            raise TraceError(f"unknown event kind {obj['kind']!r}") from None
        ts = obj["timestamp"]
        if isinstance(ts, bool) or not isinstance(ts, (int, float)):
            raise TraceError("timestamp must be a number")
        payload = obj.get("payload")
        payload = {} if payload is None else payload
        if not isinstance(payload, dict):
            raise TraceError("payload must be an object")
        return cls(str(obj["event_id"]), str(obj["developer_id"]), float(ts), kind, payload)


@dataclass(frozen=True)
class GenerationRequest:
    request_id: str
    developer_id: str
    issue_time: float
    prompt: str
    max_new_tokens: int
    outcome: RequestOutcome
    latency_observed: float | None = None
    suggestion: str | None = None
    output_tokens: int | None = None

    def __post_init__(self) -> None:
        if (self.suggestion is not None) != self.outcome.displayed:
            raise TraceError(
                f"request {self.request_id}: suggestion must be present iff the outcome is displayed"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "request_id": self.request_id,
            "developer_id": self.developer_id,
            "issue_time": self.issue_time,
            "prompt": self.prompt,
            "max_new_tokens": self.max_new_tokens,
            "outcome": self.outcome.value,
            "latency_observed": self.latency_observed,
            "suggestion": self.suggestion,
            "output_tokens": self.output_tokens,
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "GenerationRequest":
        return cls(
            request_id=str(obj["request_id"]),
            developer_id=str(obj["developer_id"]),
            issue_time=float(obj["issue_time"]),
            prompt=obj.get("prompt", ""),
            max_new_tokens=int(obj.get("max_new_tokens", DEFAULT_MAX_NEW_TOKENS)),
            outcome=RequestOutcome(obj["outcome"]),
            latency_observed=obj.get("latency_observed"),
            suggestion=obj.get("suggestion"),
            output_tokens=obj.get("output_tokens"),
        )


@dataclass(frozen=True)
class DeveloperSession:
    developer_id: str
    requests: tuple[GenerationRequest, ...]
    session_duration: float

    def __post_init__(self) -> None:
        times = [r.issue_time for r in self.requests]
        if times != sorted(times):
            raise TraceError(f"session {self.developer_id}: requests must be sorted by issue_time")
        if times and times[-1] >= self.session_duration:
            raise TraceError(f"session {self.developer_id}: issue_time beyond session_duration")

    def to_dict(self) -> dict[str, Any]:
        return {
            "developer_id": self.developer_id,
            "session_duration": self.session_duration,
            "requests": [r.to_dict() for r in self.requests],
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "DeveloperSession":
        return cls(
            developer_id=str(obj["developer_id"]),
            requests=tuple(GenerationRequest.from_dict(r) for r in obj["requests"]),
            session_duration=float(obj["session_duration"]),
        )


@dataclass(frozen=True)
class ParsedEvents:
    events: list[TelemetryEvent]
    malformed: list[tuple[int, str]]


def _lines(raw: IO[bytes] | IO[str] | bytes | str | Path) -> Iterator[str]:
    if isinstance(raw, Path):
        with raw.open("rb") as fh:
            yield from _lines(fh)
        return
    if isinstance(raw, bytes):
        raw = io.BytesIO(raw)
    elif isinstance(raw, str):
        raw = io.StringIO(raw)
    for line in raw:
        yield line.decode("utf-8") if isinstance(line, bytes) else line


def parse_events(raw: IO[bytes] | IO[str] | bytes | str | Path) -> ParsedEvents:
    """Read canonical JSON-lines telemetry, collecting malformed lines instead of failing."""
    events: list[TelemetryEvent] = []
    malformed: list[tuple[int, str]] = []
    for lineno, line in enumerate(_lines(raw), start=1):
        if not line.strip():
            continue
        try:
            events.append(TelemetryEvent.from_dict(json.loads(line)))
        except json.JSONDecodeError as exc:
            malformed.append((lineno, f"invalid JSON ({exc.msg})"))
        except TraceError as exc:
            malformed.append((lineno, str(exc)))
    return ParsedEvents(events, malformed)


def dump_events(events: Iterable[TelemetryEvent], out: IO[str]) -> None:
    for ev in events:
        out.write(json.dumps(ev.to_dict(), ensure_ascii=False, sort_keys=True))
        out.write("\n")


def group_events(events: Iterable[TelemetryEvent]) -> dict[str, list[TelemetryEvent]]:
    by_dev: dict[str, list[TelemetryEvent]] = defaultdict(list)
    for ev in events:
        by_dev[ev.developer_id].append(ev)
    return {dev: sorted(evs, key=lambda e: e.sort_key) for dev, evs in sorted(by_dev.items())}


def parse_dataset(
    raw: IO[bytes] | IO[str] | bytes | str | Path, *, strict: bool = False
) -> list[DeveloperSession]:
    """Parse a telemetry dump into per-developer sessions.

    Malformed lines are logged with their line numbers; with ``strict`` they raise
    :class:`MalformedLineError` instead. A dump with no valid events raises
    :class:`EmptyDatasetError`.
    """
    parsed = parse_events(raw)
    for lineno, why in parsed.malformed:
        log.warning("line %d skipped: %s", lineno, why)
    if strict and parsed.malformed:
        raise MalformedLineError(parsed.malformed)
    if not parsed.events:
        raise EmptyDatasetError("no valid telemetry events in input")
    return sessions_from_events(parsed.events)


def parse_files(paths: Sequence[Path], max_workers: int | None = None) -> list[DeveloperSession]:
    """Parse independent dump files concurrently and merge their sessions."""
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        batches = list(pool.map(parse_events, paths))
    events = [ev for batch in batches for ev in batch.events]
    if not events:
        raise EmptyDatasetError("no valid telemetry events in input files")
    return sessions_from_events(events)


def sessions_from_events(events: Iterable[TelemetryEvent]) -> list[DeveloperSession]:
    sessions = []
    for dev, evs in group_events(events).items():
        requests = reconstruct_requests(evs)
        last_event = evs[-1].timestamp
        last_issue = requests[-1].issue_time if requests else -1.0
        duration = last_event if last_event > last_issue else last_issue + 1.0
        sessions.append(DeveloperSession(dev, tuple(requests), duration))
    return sessions


@dataclass
class _Pending:
    request_id: str
    issue: TelemetryEvent
    state: RequestOutcome | None = None  # None until a terminal event arrives
    suggestion: str | None = None
    shown_at: float | None = None
    output_tokens: int | None = None
    superseded: bool = False


def _classify_retained(pending: _Pending, probe: TelemetryEvent) -> bool | None:
    if "retained" in probe.payload:
        return bool(probe.payload["retained"])
    code = probe.payload.get("code")
    if code is not None and pending.suggestion:
        return retention_check(pending.suggestion, str(code))
    return None


def reconstruct_requests(events: Sequence[TelemetryEvent]) -> list[GenerationRequest]:
    """Rebuild one developer's generation requests from their ordered events.

    A request still waiting for its first terminal event (shown or canceled) when a
    newer request is issued is classified as canceled, as is one that never gets a
    terminal event. Follow-up events with no matching request are logged and skipped.
    """
    pending: dict[str, _Pending] = {}
    order: list[str] = []
    latest: _Pending | None = None
    for ev in sorted(events, key=lambda e: e.sort_key):
        if ev.kind is EventKind.REQUEST_ISSUED:
            rid = ev.request_id or ev.event_id
            if rid in pending:
                log.warning("duplicate request_issued for %s (event %s) ignored", rid, ev.event_id)
                continue
            if latest is not None and latest.state is None:
                latest.superseded = True
            latest = pending[rid] = _Pending(rid, ev)
            order.append(rid)
            continue

        rid = ev.request_id
        target = pending.get(rid) if rid is not None else latest
        if target is None:
            log.warning("orphan %s event %s (request %s)", ev.kind.value, ev.event_id, rid)
            continue
        if target.superseded and target.state is None:
            log.warning("late %s event %s for superseded request %s", ev.kind.value, ev.event_id, target.request_id)
            continue
        _apply(target, ev)

    out = []
    for rid in order:
        p = pending[rid]
        outcome = p.state or RequestOutcome.CANCELED
        issue = p.issue.payload
        out.append(
            GenerationRequest(
                request_id=rid,
                developer_id=p.issue.developer_id,
                issue_time=p.issue.timestamp,
                prompt=str(issue.get("prompt", "")),
                max_new_tokens=int(issue.get("max_new_tokens", DEFAULT_MAX_NEW_TOKENS)),
                outcome=outcome,
                latency_observed=None if p.shown_at is None else p.shown_at - p.issue.timestamp,
                suggestion=p.suggestion if outcome.displayed else None,
                output_tokens=p.output_tokens,
            )
        )
    return out


def _apply(p: _Pending, ev: TelemetryEvent) -> None:
    kind, state = ev.kind, p.state
    if kind is EventKind.GENERATION_SHOWN:
        if state not in (None, RequestOutcome.CANCELED):
            return
        text = str(ev.payload.get("suggestion", ""))
        p.shown_at = ev.timestamp
        tokens = ev.payload.get("output_tokens")
        p.output_tokens = None if tokens is None else int(tokens)
        if text.strip():
            p.state, p.suggestion = RequestOutcome.DISPLAYED_REJECTED, text
        else:
            p.state = RequestOutcome.EMPTY
    elif kind is EventKind.CANCELED:
        if state is None:
            p.state = RequestOutcome.CANCELED
    elif kind is EventKind.ACCEPTED:
        if state in (None, RequestOutcome.DISPLAYED_REJECTED):
            if p.suggestion is None:
                p.suggestion = str(ev.payload.get("suggestion", "")) or None
                if p.suggestion is None:
                    p.state = RequestOutcome.EMPTY
                    return
                p.shown_at = ev.timestamp
            p.state = RequestOutcome.ACCEPTED
    elif kind is EventKind.REJECTED:
        # a rejection without a shown event implies the suggestion was displayed
        text = str(ev.payload.get("suggestion", ""))
        if state is None and text.strip():
            p.state, p.suggestion, p.shown_at = RequestOutcome.DISPLAYED_REJECTED, text, ev.timestamp
    elif kind is EventKind.STILL_IN_CODE:
        if state in (RequestOutcome.ACCEPTED, RequestOutcome.KEPT):
            retained = _classify_retained(p, ev)
            if retained is not None:
                p.state = RequestOutcome.KEPT if retained else RequestOutcome.ACCEPTED


@dataclass(frozen=True)
class LifecycleBreakdown:
    counts: dict[RequestOutcome, int]
    total: int

    @property
    def percentages(self) -> dict[RequestOutcome, float]:
        return {k: 100.0 * v / self.total for k, v in self.counts.items()}

    @property
    def displayed(self) -> int:
        return sum(v for k, v in self.counts.items() if k.displayed)

    @property
    def accepted(self) -> int:
        return sum(v for k, v in self.counts.items() if k.accepted)

    @property
    def kept(self) -> int:
        return self.counts[RequestOutcome.KEPT]

    def fraction(self, which: str) -> float:
        return getattr(self, which) / self.total

    def to_dict(self) -> dict[str, Any]:
        pct = self.percentages
        return {
            "total": self.total,
            "counts": {k.value: v for k, v in self.counts.items()},
            "percentages": {k.value: pct[k] for k in self.counts},
            "displayed": self.displayed,
            "accepted": self.accepted,
            "kept": self.kept,
        }


def lifecycle_stats(sessions: Iterable[DeveloperSession]) -> LifecycleBreakdown:
    counts = {o: 0 for o in RequestOutcome}
    for s in sessions:
        for r in s.requests:
            counts[r.outcome] += 1
    total = sum(counts.values())
    if total == 0:
        raise EmptyDatasetError("lifecycle statistics need at least one request")
    return LifecycleBreakdown(counts, total)


def _words(text: str) -> list[str]:
    return text.split()


def word_edit_distance(a: str, b: str) -> int:
    """Levenshtein distance between the whitespace-separated word sequences of a and b."""
    x, y = _words(a), _words(b)
    if len(x) < len(y):
        x, y = y, x
    prev = list(range(len(y) + 1))
    for i, wx in enumerate(x, start=1):
        cur = [i]
        for j, wy in enumerate(y, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (wx != wy)))
        prev = cur
    return prev[-1]


def retention_check(suggestion: str, current_code_region: str) -> bool:
    """True while the suggestion is still in the code.

    The generation counts as removed once the word edit distance reaches half the
    suggestion's word count.
    """
    n = len(_words(suggestion))
    if n == 0:
        raise UndefinedRetentionError("retention is undefined for an empty suggestion")
    return word_edit_distance(suggestion, current_code_region) / max(1, n) < RETENTION_THRESHOLD


@dataclass(frozen=True)
class UsageStats:
    developer_id: str
    total_requests: int
    session_minutes: float
    requests_per_minute: float
    shown: int
    accepted: int
    rejected: int
    accepted_per_shown: float | None
    accepted_per_total: float | None
    accepted_per_rejected: float | None

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def usage_stats(session: DeveloperSession) -> UsageStats:
    if session.session_duration <= 0:
        raise TraceError(f"session {session.developer_id} has zero duration")
    total = len(session.requests)
    shown = sum(r.outcome.displayed for r in session.requests)
    accepted = sum(r.outcome.accepted for r in session.requests)
    rejected = shown - accepted
    minutes = session.session_duration / 60_000.0
    return UsageStats(
        developer_id=session.developer_id,
        total_requests=total,
        session_minutes=minutes,
        requests_per_minute=total / minutes,
        shown=shown,
        accepted=accepted,
        rejected=rejected,
        accepted_per_shown=accepted / shown if shown else None,
        accepted_per_total=accepted / total if total else None,
        accepted_per_rejected=accepted / rejected if rejected else None,
    )


USAGE_COLUMNS = list(UsageStats.__dataclass_fields__)


def write_usage_csv(rows: Iterable[UsageStats], out: IO[str]) -> None:
    w = csv.DictWriter(out, fieldnames=USAGE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r.to_dict())


def write_lifecycle_csv(stats: LifecycleBreakdown, out: IO[str]) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["outcome", "count", "percent"])
    pct = stats.percentages
    for k, v in stats.counts.items():
        w.writerow([k.value, v, f"{pct[k]:.4f}"])
    w.writerow(["total", stats.total, "100.0000"])
