"""Power samples, meter adapters and energy integration.

All timestamps are milliseconds on the run clock (0 = replay start) and power is
in watts. Every adapter returns :class:`PowerSample` lists, so a run may combine
sources (CPU package counters plus GPU polling); :func:`integrate` sums them.
"""

from __future__ import annotations

import csv
import logging
import math
import subprocess
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import IO, Callable, Iterable, Sequence

import httpx

log = logging.getLogger(__name__)

DEFAULT_INTERVAL_MS = 100.0
MS_PER_HOUR = 3_600_000.0


class PowerSource(str, Enum):
    CPU_ENERGY_COUNTER = "cpu-energy-counter"
    GPU_MANAGEMENT_POLL = "gpu-management-poll"
    SIMULATED = "simulated"


class EmptyWindowError(ValueError):
    pass


@dataclass(frozen=True)
class PowerSample:
    timestamp: float
    watts: float
    source: PowerSource = PowerSource.SIMULATED

    def __post_init__(self) -> None:
        if self.watts < 0 or not math.isfinite(self.watts):
            raise ValueError(f"invalid power reading {self.watts!r}")


@dataclass(frozen=True)
class EnergyReport:
    window: tuple[float, float]
    mean_power: float
    energy: float  # Wh
    developer_count: int = 1

    @property
    def hours(self) -> float:
        return (self.window[1] - self.window[0]) / MS_PER_HOUR

    @property
    def per_developer_energy(self) -> float:
        return self.energy / self.developer_count


def integrate(
    samples: Iterable[PowerSample], window: tuple[float, float], developer_count: int = 1
) -> EnergyReport:
    """Left-rectangle integration of each source over ``window``, summed across sources.

    A reading holds until the next one from the same source. When a source has no
    reading at or before the window start, the window is trimmed to begin at the
    latest first reading so that every source covers the whole reported window.
    """
    start, end = window
    if end <= start:
        raise EmptyWindowError(f"window {window} is empty")
    by_source: dict[PowerSource, list[PowerSample]] = {}
    for s in samples:
        by_source.setdefault(s.source, []).append(s)
    series = []
    for src, ss in sorted(by_source.items(), key=lambda kv: kv[0].value):
        ss = sorted(ss, key=lambda s: s.timestamp)
        if ss[0].timestamp >= end:
            continue
        series.append(ss)
    if not series:
        raise EmptyWindowError(f"no power samples inside window {window}")
    eff_start = max(start, max(ss[0].timestamp for ss in series))
    if eff_start >= end:
        raise EmptyWindowError(f"sources do not overlap inside window {window}")

    joules = 0.0
    for ss in series:
        for i, s in enumerate(ss):
            a = s.timestamp
            b = ss[i + 1].timestamp if i + 1 < len(ss) else math.inf
            lo, hi = max(a, eff_start), min(b, end)
            if hi > lo:
                joules += s.watts * (hi - lo) / 1000.0
    length_ms = end - eff_start
    mean_power = joules * 1000.0 / length_ms
    return EnergyReport((eff_start, end), mean_power, joules / 3600.0, developer_count)


def simulated_samples(
    power_at: Callable[[float], float], start: float, end: float, interval: float = DEFAULT_INTERVAL_MS
) -> list[PowerSample]:
    """Poll a simulated server's power model on a fixed grid."""
    n = int(math.floor((end - start) / interval)) + 1
    return [PowerSample(start + i * interval, power_at(start + i * interval)) for i in range(n)]


def write_samples_csv(samples: Iterable[PowerSample], out: IO[str]) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["timestamp_ms", "watts", "source"])
    for s in samples:
        w.writerow([repr(s.timestamp), repr(s.watts), s.source.value])


def read_samples_csv(src: IO[str]) -> list[PowerSample]:
    return [
        PowerSample(float(row["timestamp_ms"]), float(row["watts"]), PowerSource(row["source"]))
        for row in csv.DictReader(src)
    ]


class PeriodicSampler:
    """Background thread polling ``read()`` every ``interval`` ms into an append-only buffer."""

    source = PowerSource.SIMULATED

    def __init__(self, interval: float = DEFAULT_INTERVAL_MS, t0: float | None = None):
        self.interval = interval
        self.t0 = time.monotonic() if t0 is None else t0
        self.samples: list[PowerSample] = []
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def now_ms(self) -> float:
        return (time.monotonic() - self.t0) * 1000.0

    def read(self) -> float | None:
        raise NotImplementedError

    def _loop(self) -> None:
        next_tick = time.monotonic()
        while not self._stop.is_set():
            try:
                watts = self.read()
            except Exception as exc:  # a flaky meter must not kill the run
                log.warning("%s read failed: %s", type(self).__name__, exc)
                watts = None
            if watts is not None:
                self.samples.append(PowerSample(self.now_ms(), watts, self.source))
            next_tick += self.interval / 1000.0
            self._stop.wait(max(0.0, next_tick - time.monotonic()))

    def start(self) -> "PeriodicSampler":
        self._thread = threading.Thread(target=self._loop, name=type(self).__name__, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> list[PowerSample]:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        return list(self.samples)

    def __enter__(self) -> "PeriodicSampler":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


class HttpPowerSampler(PeriodicSampler):
    """Polls the mock server's ``GET /v1/power``."""

    source = PowerSource.SIMULATED

    def __init__(self, base_url: str, interval: float = DEFAULT_INTERVAL_MS, t0: float | None = None,
                 transport: httpx.BaseTransport | None = None):
        super().__init__(interval, t0)
        self._client = httpx.Client(base_url=base_url.rstrip("/"), timeout=2.0, transport=transport)

    def read(self) -> float | None:
        resp = self._client.get("/v1/power")
        resp.raise_for_status()
        return float(resp.json()["watts"])

    def stop(self) -> list[PowerSample]:
        out = super().stop()
        self._client.close()
        return out


RAPL_ROOT = Path("/sys/class/powercap")


class RaplSampler(PeriodicSampler):
    """Differences cumulative CPU package energy counters (microjoules) into watts.

    Each reading is stamped with the start of the interval it covers so that
    left-rectangle integration reproduces the counter's energy exactly.
    """

    source = PowerSource.CPU_ENERGY_COUNTER

    def __init__(self, zones: Sequence[Path] | None = None, interval: float = DEFAULT_INTERVAL_MS,
                 t0: float | None = None):
        super().__init__(interval, t0)
        if zones is None:
            zones = sorted(p for p in RAPL_ROOT.glob("intel-rapl:*") if p.name.count(":") == 1)
        if not zones:
            raise FileNotFoundError("no RAPL package zones found")
        self.zones = list(zones)
        self._ranges = [self._read_int(z / "max_energy_range_uj", default=2**63) for z in self.zones]
        self._last: tuple[float, list[int]] | None = None

    @staticmethod
    def _read_int(path: Path, default: int | None = None) -> int:
        try:
            return int(path.read_text().strip())
        except FileNotFoundError:
            if default is None:
                raise
            return default

    def poll(self) -> PowerSample | None:
        """Take one counter reading; returns the power over the interval since the last one."""
        now = self.now_ms()
        counts = [self._read_int(z / "energy_uj") for z in self.zones]
        prev, self._last = self._last, (now, counts)
        if prev is None or now <= prev[0]:
            return None
        delta = 0
        for c, p, rng in zip(counts, prev[1], self._ranges):
            delta += c - p if c >= p else c + rng - p  # counter wrapped
        watts = (delta / 1e6) / ((now - prev[0]) / 1000.0)
        return PowerSample(prev[0], watts, self.source)

    def _loop(self) -> None:
        next_tick = time.monotonic()
        while not self._stop.is_set():
            try:
                s = self.poll()
                if s is not None:
                    self.samples.append(s)
            except OSError as exc:
                log.warning("RAPL read failed: %s", exc)
            next_tick += self.interval / 1000.0
            self._stop.wait(max(0.0, next_tick - time.monotonic()))


class NvidiaSmiSampler(PeriodicSampler):
    """Polls ``nvidia-smi`` for the summed draw of the GPUs in use."""

    source = PowerSource.GPU_MANAGEMENT_POLL

    def __init__(self, gpu_ids: Sequence[int] = (0,), interval: float = DEFAULT_INTERVAL_MS,
                 t0: float | None = None, runner: Callable[[list[str]], str] | None = None):
        super().__init__(interval, t0)
        self.gpu_ids = list(gpu_ids)
        self._runner = runner or (lambda cmd: subprocess.run(cmd, capture_output=True, text=True, check=True).stdout)

    def command(self) -> list[str]:
        return [
            "nvidia-smi",
            "--query-gpu=power.draw",
            "--format=csv,noheader,nounits",
            "--id=" + ",".join(str(i) for i in self.gpu_ids),
        ]

    def read(self) -> float | None:
        out = self._runner(self.command())
        values = [float(x) for x in out.split() if x.strip() and x.strip() != "[N/A]"]
        return sum(values) if values else None
