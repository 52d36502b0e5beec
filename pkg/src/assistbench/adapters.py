"""Map raw Copilot extension telemetry onto the canonical event schema.

The raw dump stores one telemetry message per line with an event name such as
``copilot/ghostText.shown``, a wall-clock time and ``properties`` /
``measurements`` maps. Field names are configurable through
:class:`CopilotFieldMap` because the extension's telemetry shape drifts between
versions; only the mapping has to change, not the harness.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import IO, Any, Iterable, Iterator

from .trace_model import EventKind, TelemetryEvent

log = logging.getLogger(__name__)

DEFAULT_EVENT_KINDS = {
    "ghostText.issued": EventKind.REQUEST_ISSUED,
    "ghostText.shown": EventKind.GENERATION_SHOWN,
    "ghostText.empty": EventKind.GENERATION_SHOWN,
    "ghostText.accepted": EventKind.ACCEPTED,
    "ghostText.rejected": EventKind.REJECTED,
    "ghostText.canceled": EventKind.CANCELED,
    "ghostText.stillInCode": EventKind.STILL_IN_CODE,
}


@dataclass
class CopilotFieldMap:
    event_name: str = "event"
    time: str = "time"
    developer: str = "participant"
    properties: str = "properties"
    measurements: str = "measurements"
    request_id: tuple[str, ...] = ("headerRequestId", "requestId")
    prompt: tuple[str, ...] = ("prompt",)
    suggestion: tuple[str, ...] = ("completionText", "suggestion")
    output_tokens: tuple[str, ...] = ("numTokens", "completionTokens")
    max_tokens: tuple[str, ...] = ("max_tokens", "maxTokens")
    retained: tuple[str, ...] = ("stillInCode", "retained")
    event_kinds: dict[str, EventKind] = field(default_factory=lambda: dict(DEFAULT_EVENT_KINDS))


def _first(maps: Iterable[dict[str, Any]], keys: tuple[str, ...]) -> Any:
    for m in maps:
        for k in keys:
            if k in m and m[k] is not None:
                return m[k]
    return None


def _to_ms(value: Any) -> float:
    if isinstance(value, (int, float)):
        # seconds vs milliseconds since epoch
        return float(value) * (1000.0 if value < 1e11 else 1.0)
    return datetime.fromisoformat(str(value).replace("Z", "+00:00")).timestamp() * 1000.0


def _kind_for(name: str, fmap: CopilotFieldMap) -> EventKind | None:
    short = name.rsplit("/", 1)[-1]
    return fmap.event_kinds.get(short)


def convert_records(
    records: Iterable[dict[str, Any]],
    developer_id: str | None = None,
    fmap: CopilotFieldMap | None = None,
) -> Iterator[TelemetryEvent]:
    """Translate raw telemetry records into canonical events.

    Timestamps are rebased per developer so the first message is at 0 ms.
    Records whose event name is not mapped are dropped.
    """
    fmap = fmap or CopilotFieldMap()
    rows = []
    for i, rec in enumerate(records):
        kind = _kind_for(str(rec.get(fmap.event_name, "")), fmap)
        dev = str(rec.get(fmap.developer) or developer_id or "unknown")
        try:
            t = _to_ms(rec[fmap.time])
        except (KeyError, ValueError, TypeError):
            log.warning("record %d has no usable time, skipped", i)
            continue
        rows.append((dev, t, i, kind, rec))

    origin: dict[str, float] = {}
    for dev, t, _, _, _ in rows:
        origin[dev] = min(t, origin.get(dev, t))

    for dev, t, i, kind, rec in rows:
        if kind is None:
            continue
        props = rec.get(fmap.properties) or {}
        meas = rec.get(fmap.measurements) or {}
        maps = (props, meas, rec)
        payload: dict[str, Any] = {}
        rid = _first(maps, fmap.request_id)
        if rid is not None:
            payload["request_id"] = str(rid)
        short = str(rec.get(fmap.event_name)).rsplit("/", 1)[-1]
        if kind is EventKind.REQUEST_ISSUED:
            prompt = _first(maps, fmap.prompt)
            if prompt is not None:
                payload["prompt"] = prompt if isinstance(prompt, str) else json.dumps(prompt)
            mt = _first(maps, fmap.max_tokens)
            if mt is not None:
                payload["max_new_tokens"] = int(mt)
        elif kind in (EventKind.GENERATION_SHOWN, EventKind.ACCEPTED, EventKind.REJECTED):
            text = "" if short == "ghostText.empty" else _first(maps, fmap.suggestion)
            payload["suggestion"] = "" if text is None else str(text)
            ntok = _first(maps, fmap.output_tokens)
            if ntok is not None:
                payload["output_tokens"] = int(ntok)
        elif kind is EventKind.STILL_IN_CODE:
            flag = _first(maps, fmap.retained)
            payload["retained"] = True if flag is None else bool(flag)
        yield TelemetryEvent(f"{i:08d}", dev, t - origin[dev], kind, payload)


def read_raw(raw: IO[str] | Path) -> Iterator[dict[str, Any]]:
    if isinstance(raw, Path):
        with raw.open(encoding="utf-8") as fh:
            yield from read_raw(fh)
        return
    text = raw.read()
    stripped = text.lstrip()
    if stripped.startswith("["):
        yield from json.loads(text)
        return
    for n, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            try:
                yield json.loads(line)
            except json.JSONDecodeError:
                log.warning("raw line %d is not JSON, skipped", n)


def convert_directory(root: Path, fmap: CopilotFieldMap | None = None) -> list[TelemetryEvent]:
    """Convert a directory holding one raw telemetry file per participant."""
    events: list[TelemetryEvent] = []
    for path in sorted(p for p in root.rglob("*") if p.suffix in (".json", ".jsonl")):
        events.extend(convert_records(read_raw(path), developer_id=path.stem, fmap=fmap))
    return events
