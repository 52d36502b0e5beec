"""Model profiles, quantization multipliers and host power parameters.

Profiles live in a YAML book (``data/profiles.yaml`` by default)::

    format_version: 1
    host:
      cpu_idle_power: 200.0       # W, always on
      gpu_idle_power: 17.5        # W per GPU in use
      gpu_active_power: 190.0     # W per GPU at full utilization
      step_quantum_ms: 1.0        # minimum batching step
    models:
      starcoder2-7b:
        prefill_cost: 30.0        # ms per 1k prompt tokens
        decode_base: 25.0         # ms per step
        decode_slope: 0.8         # ms per step per running sequence
        mean_output_tokens: 230
        slots_per_gpu: 24         # running batch capacity per GPU
        power_saturation_batch: 4 # running sequences at which GPUs draw full power
        power_multiplier: 1.0
    quantization:
      none: {latency: 1.0, power: 1.0}
      bnb-nf4: {latency: 2.386, power: 1.05}

``power_saturation_batch`` is optional and defaults to the running capacity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from ..config import SimulationConfig

PROFILE_FORMAT_VERSION = 1


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class QuantizationEffect:
    latency: float = 1.0
    power: float = 1.0

    def __post_init__(self) -> None:
        if self.latency <= 0 or self.power <= 0:
            raise ProfileError("quantization multipliers must be > 0")


@dataclass(frozen=True)
class ModelProfile:
    name: str
    prefill_cost: float
    decode_base: float
    decode_slope: float
    mean_output_tokens: float
    slots_per_gpu: int = 24
    power_saturation_batch: float | None = None
    power_multiplier: float = 1.0
    quantization_tag: str = "none"
    latency_multiplier: float = 1.0

    def __post_init__(self) -> None:
        costs = (self.prefill_cost, self.decode_base, self.decode_slope, self.mean_output_tokens)
        if min(costs) <= 0:
            raise ProfileError(f"profile {self.name}: all costs must be > 0")
        if self.slots_per_gpu < 1:
            raise ProfileError(f"profile {self.name}: slots_per_gpu must be >= 1")
        if self.power_multiplier <= 0 or self.latency_multiplier <= 0:
            raise ProfileError(f"profile {self.name}: multipliers must be > 0")
        if self.power_saturation_batch is not None and self.power_saturation_batch <= 0:
            raise ProfileError(f"profile {self.name}: power_saturation_batch must be > 0")

    def quantized(self, tag: str, effect: QuantizationEffect) -> "ModelProfile":
        return replace(
            self,
            quantization_tag=tag,
            latency_multiplier=self.latency_multiplier * effect.latency,
            power_multiplier=self.power_multiplier * effect.power,
        )


@dataclass(frozen=True)
class ServerConfig:
    model_profile: ModelProfile
    max_concurrent_requests: int = 1000
    gpu_count: int = 4
    idle_power: float = 270.0
    per_gpu_active_power: float = 190.0
    step_quantum: float = 1.0

    def __post_init__(self) -> None:
        if self.max_concurrent_requests < 1:
            raise ProfileError("max_concurrent_requests must be >= 1")
        if self.gpu_count not in (1, 2, 4):
            raise ProfileError("gpu_count must be 1, 2 or 4")
        if self.idle_power < 0 or self.per_gpu_active_power < 0:
            raise ProfileError("powers must be >= 0")

    @property
    def running_capacity(self) -> int:
        return self.model_profile.slots_per_gpu * self.gpu_count

    @property
    def power_saturation_batch(self) -> float:
        per_gpu = self.model_profile.power_saturation_batch
        return self.running_capacity if per_gpu is None else per_gpu * self.gpu_count


@dataclass(frozen=True)
class HostPower:
    cpu_idle_power: float = 200.0
    gpu_idle_power: float = 17.5
    gpu_active_power: float = 190.0
    step_quantum_ms: float = 1.0

    def idle_for(self, gpu_count: int) -> float:
        # unused GPUs are treated as absent
        return self.cpu_idle_power + self.gpu_idle_power * gpu_count


@dataclass(frozen=True)
class ProfileBook:
    host: HostPower
    models: dict[str, ModelProfile]
    quantization: dict[str, QuantizationEffect] = field(default_factory=lambda: {"none": QuantizationEffect()})

    def model(self, name: str, quantization_tag: str = "none") -> ModelProfile:
        try:
            base = self.models[name]
        except KeyError:
            raise ProfileError(f"unknown model profile {name!r}; known: {sorted(self.models)}") from None
        try:
            effect = self.quantization[quantization_tag]
        except KeyError:
            raise ProfileError(
                f"unknown quantization tag {quantization_tag!r}; known: {sorted(self.quantization)}"
            ) from None
        return base.quantized(quantization_tag, effect)

    def server_config(self, sim: SimulationConfig) -> ServerConfig:
        profile = self.model(sim.model_profile, sim.quantization_tag)
        return ServerConfig(
            model_profile=profile,
            max_concurrent_requests=sim.max_concurrent_requests,
            gpu_count=sim.gpu_count,
            idle_power=self.host.idle_for(sim.gpu_count),
            per_gpu_active_power=self.host.gpu_active_power * profile.power_multiplier,
            step_quantum=self.host.step_quantum_ms,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": PROFILE_FORMAT_VERSION,
            "host": dict(self.host.__dict__),
            "models": {
                k: {f: v for f, v in m.__dict__.items() if f not in ("name", "quantization_tag", "latency_multiplier")}
                for k, m in self.models.items()
            },
            "quantization": {k: dict(q.__dict__) for k, q in self.quantization.items()},
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "ProfileBook":
        if obj.get("format_version") != PROFILE_FORMAT_VERSION:
            raise ProfileError(f"unsupported profile format {obj.get('format_version')!r}")
        try:
            host = HostPower(**obj.get("host", {}))
            models = {name: ModelProfile(name=name, **spec) for name, spec in obj["models"].items()}
            quant = {tag: QuantizationEffect(**q) for tag, q in obj.get("quantization", {}).items()}
        except TypeError as exc:
            raise ProfileError(f"bad profile book: {exc}") from None
        quant.setdefault("none", QuantizationEffect())
        return cls(host, models, quant)


def load_profiles(path: Path | str | None = None) -> ProfileBook:
    if path is None:
        text = resources.files("assistbench").joinpath("data/profiles.yaml").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return ProfileBook.from_dict(yaml.safe_load(text))


def save_profiles(book: ProfileBook, path: Path) -> None:
    path.write_text(yaml.safe_dump(book.to_dict(), sort_keys=False), encoding="utf-8")
