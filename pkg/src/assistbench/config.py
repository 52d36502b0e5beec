"""Simulation configuration: one point of the studied factor space."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from enum import Enum
from typing import Any

DEVELOPER_COUNTS = (1, 2, 5, 10, 20, 30, 50, 75, 100, 150, 200, 300, 400, 500)
GPU_COUNTS = (1, 2, 4)


class StreamingMode(str, Enum):
    STREAM_WITH_CANCEL = "stream"
    NO_STREAM = "no_stream"


class TriggerMode(str, Enum):
    AUTOMATIC = "automatic"
    MANUAL_EMULATED = "manual"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    developers: int = 20
    streaming: StreamingMode = StreamingMode.STREAM_WITH_CANCEL
    trigger: TriggerMode = TriggerMode.AUTOMATIC
    model_profile: str = "starcoder2-7b"
    quantization_tag: str = "none"
    max_concurrent_requests: int = 1000
    gpu_count: int = 4

    def __post_init__(self) -> None:
        object.__setattr__(self, "streaming", StreamingMode(self.streaming))
        object.__setattr__(self, "trigger", TriggerMode(self.trigger))
        if self.developers < 1:
            raise ConfigError("developers must be >= 1")
        if self.max_concurrent_requests < 1:
            raise ConfigError("max_concurrent_requests must be >= 1")
        if self.gpu_count not in GPU_COUNTS:
            raise ConfigError(f"gpu_count must be one of {GPU_COUNTS}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["streaming"] = self.streaming.value
        d["trigger"] = self.trigger.value
        return d

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "SimulationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_(self, **changes: Any) -> "SimulationConfig":
        return replace(self, **changes)

    def label(self) -> str:
        return (
            f"{self.model_profile}; {self.quantization_tag}; {self.streaming.value}; "
            f"{self.trigger.value}; max {self.max_concurrent_requests}; "
            f"{self.gpu_count} GPUs; {self.developers} devs"
        )


FACTORS = tuple(f.name for f in fields(SimulationConfig))
