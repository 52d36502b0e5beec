"""Per-run metrics, saturation, CO2, impact ratios and stability."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field
from typing import IO, Any, Callable, Iterable, Sequence

from .config import FACTORS, SimulationConfig
from .engine import RawRunLog, RequestStatus
from .meters import EnergyReport, PowerSample, integrate

log = logging.getLogger(__name__)

DEFAULT_CARBON_INTENSITY = 56.0  # g CO2 per kWh
MAX_REJECTED_FRACTION = 0.10
MAX_MEAN_LATENCY_S = 20.0


class EmptyOverlapError(ValueError):
    pass


def co2(energy_wh: float, intensity: float = DEFAULT_CARBON_INTENSITY) -> float:
    """Grams of CO2 for ``energy_wh`` at ``intensity`` g/kWh."""
    if intensity < 0:
        raise ValueError("carbon intensity must be >= 0")
    if energy_wh < 0:
        raise ValueError("energy must be >= 0")
    return energy_wh / 1000.0 * intensity


@dataclass(frozen=True)
class SimulationMetrics:
    config: SimulationConfig
    mean_latency: float | None  # s, completed requests only
    p95_latency: float | None
    rejected_fraction: float
    completed: int
    mean_power: float  # W
    energy: float  # Wh over the window
    energy_per_hour_per_developer: float
    energy_per_1000_requests: float | None
    co2_per_hour_per_developer: float
    saturated: bool
    round_count: int = 1
    sent: int = 0
    rejected: int = 0
    canceled: int = 0
    timed_out: int = 0
    failed: int = 0
    window: tuple[float, float] = (0.0, 0.0)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["config"] = self.config.to_dict()
        d["config_hash"] = self.config.config_hash
        d["window"] = list(self.window)
        return d

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "SimulationMetrics":
        obj = dict(obj)
        obj.pop("config_hash", None)
        obj["config"] = SimulationConfig.from_dict(obj["config"])
        obj["window"] = tuple(obj.get("window", (0.0, 0.0)))
        return cls(**obj)


def is_saturated(
    metrics: Any, max_rejected: float = MAX_REJECTED_FRACTION, max_latency_s: float = MAX_MEAN_LATENCY_S
) -> bool:
    """True when more than ``max_rejected`` of requests were refused or mean latency exceeds ``max_latency_s``."""
    latency = metrics.mean_latency
    return metrics.rejected_fraction > max_rejected or (latency is not None and latency > max_latency_s)


def _p95(values: Sequence[float]) -> float | None:
    if not values:
        return None
    if len(values) == 1:
        return values[0]
    return statistics.quantiles(values, n=20, method="inclusive")[-1]


def restrict_to_overlap(run: RawRunLog, samples: Iterable[PowerSample], time_scale: float = 1.0):
    """Records fired inside the plan's overlap window, and the window in run-clock ms."""
    a, b = run.plan.overlap_window
    if b <= a:
        raise EmptyOverlapError(
            f"developer sessions never overlap (window {a:.0f}..{b:.0f} ms); inspect the schedule with `assistbench plan`"
        )
    records = [r for r in run.records if a <= r.fire_offset < b]
    return records, (a * time_scale, b * time_scale), list(samples)


def compute_run_metrics(
    run: RawRunLog,
    samples: Iterable[PowerSample],
    *,
    time_scale: float = 1.0,
    intensity: float = DEFAULT_CARBON_INTENSITY,
    max_rejected: float = MAX_REJECTED_FRACTION,
    max_latency_s: float = MAX_MEAN_LATENCY_S,
) -> SimulationMetrics:
    """Metrics of one round, computed only inside the window where every developer is active.

    ``time_scale`` converts plan offsets to the run clock for compressed real-time replays.
    """
    records, window, samples = restrict_to_overlap(run, samples, time_scale)
    n_dev = run.plan.developer_count
    report: EnergyReport = integrate(samples, window, n_dev)
    counts = {s: 0 for s in RequestStatus}
    for r in records:
        counts[r.status] += 1
    latencies = sorted(r.latency / 1000.0 for r in records if r.latency is not None)
    sent = len(records)
    per_dev_hour = report.mean_power / n_dev
    partial = SimulationMetrics(
        config=run.config,
        mean_latency=statistics.fmean(latencies) if latencies else None,
        p95_latency=_p95(latencies),
        rejected_fraction=counts[RequestStatus.REJECTED] / sent if sent else 0.0,
        completed=counts[RequestStatus.COMPLETED],
        mean_power=report.mean_power,
        energy=report.energy,
        energy_per_hour_per_developer=per_dev_hour,
        energy_per_1000_requests=report.energy / sent * 1000.0 if sent else None,
        co2_per_hour_per_developer=co2(per_dev_hour, intensity),
        saturated=False,
        round_count=1,
        sent=sent,
        rejected=counts[RequestStatus.REJECTED],
        canceled=counts[RequestStatus.CANCELED],
        timed_out=counts[RequestStatus.TIMED_OUT],
        failed=counts[RequestStatus.FAILED],
        window=report.window,
    )
    return _with_saturation(partial, max_rejected, max_latency_s)


def _with_saturation(m: SimulationMetrics, max_rejected: float, max_latency_s: float) -> SimulationMetrics:
    d = {**m.__dict__, "saturated": is_saturated(m, max_rejected, max_latency_s)}
    return SimulationMetrics(**d)


def aggregate_rounds(
    rounds: Sequence[SimulationMetrics],
    max_rejected: float = MAX_REJECTED_FRACTION,
    max_latency_s: float = MAX_MEAN_LATENCY_S,
) -> SimulationMetrics:
    """Combine replication rounds of one config: counts are summed, rates averaged.

    Latency is pooled over all completed requests; rejected fraction is the pooled
    ratio; power, energy and derived per-hour figures are round means.
    """
    if not rounds:
        raise ValueError("no rounds to aggregate")
    cfg = rounds[0].config
    if any(r.config != cfg for r in rounds):
        raise ValueError("rounds belong to different configurations")
    if len(rounds) == 1:
        return rounds[0]
    completed = sum(r.completed for r in rounds)
    sent = sum(r.sent for r in rounds)
    rejected = sum(r.rejected for r in rounds)
    lat_total = sum(r.mean_latency * r.completed for r in rounds if r.mean_latency is not None)
    p95s = [r.p95_latency for r in rounds if r.p95_latency is not None]
    per_1000 = [r.energy_per_1000_requests for r in rounds if r.energy_per_1000_requests is not None]
    per_dev_hour = statistics.fmean(r.energy_per_hour_per_developer for r in rounds)
    m = SimulationMetrics(
        config=cfg,
        mean_latency=lat_total / completed if completed else None,
        p95_latency=statistics.fmean(p95s) if p95s else None,
        rejected_fraction=rejected / sent if sent else 0.0,
        completed=completed,
        mean_power=statistics.fmean(r.mean_power for r in rounds),
        energy=statistics.fmean(r.energy for r in rounds),
        energy_per_hour_per_developer=per_dev_hour,
        energy_per_1000_requests=statistics.fmean(per_1000) if per_1000 else None,
        co2_per_hour_per_developer=statistics.fmean(r.co2_per_hour_per_developer for r in rounds),
        saturated=False,
        round_count=len(rounds),
        sent=sent,
        rejected=rejected,
        canceled=sum(r.canceled for r in rounds),
        timed_out=sum(r.timed_out for r in rounds),
        failed=sum(r.failed for r in rounds),
        window=(min(r.window[0] for r in rounds), max(r.window[1] for r in rounds)),
    )
    return _with_saturation(m, max_rejected, max_latency_s)


def stability(replicates: Sequence[float | SimulationMetrics]) -> float:
    """Population standard deviation of mean power divided by its mean."""
    values = [r.mean_power if isinstance(r, SimulationMetrics) else float(r) for r in replicates]
    if len(values) < 2:
        raise ValueError("stability needs at least two replicates")
    mean = statistics.fmean(values)
    if mean == 0:
        raise ValueError("stability undefined for zero mean power")
    return statistics.pstdev(values) / mean


# -- impact ratios -----------------------------------------------------------

METRICS: dict[str, Callable[[SimulationMetrics], float | None]] = {
    "energy": lambda m: m.energy_per_hour_per_developer,
    "latency": lambda m: m.mean_latency,
    "power": lambda m: m.mean_power,
    "energy_per_1000": lambda m: m.energy_per_1000_requests,
}


@dataclass(frozen=True)
class ImpactRatio:
    factor: str
    from_option: Any
    to_option: Any
    metric: str
    ratio: float  # geometric mean over contributing pairs
    ratios: tuple[float, ...] = ()
    pairs: tuple[tuple[str, str], ...] = field(default=())  # (from hash, to hash)

    def __post_init__(self) -> None:
        if not self.ratio > 0:
            raise ValueError("impact ratio must be > 0")


class ImpactRatios(list):
    """List of :class:`ImpactRatio` carrying a diagnostic when nothing could be paired."""

    diagnostic: str | None = None


def _option(cfg: SimulationConfig, factor: str) -> Any:
    v = getattr(cfg, factor)
    return v.value if hasattr(v, "value") else v


def differing_factors(a: SimulationConfig, b: SimulationConfig) -> list[str]:
    return [f for f in FACTORS if _option(a, f) != _option(b, f)]


def impact_ratios(
    results: Iterable[SimulationMetrics],
    metric: str = "energy",
    factors: Sequence[str] | None = None,
) -> ImpactRatios:
    """Ratios ``metric(to) / metric(from)`` over config pairs that differ in exactly one factor.

    Both directions of each unordered pair are emitted and aggregated per
    (factor, from option, to option) by geometric mean.
    """
    try:
        get = METRICS[metric]
    except KeyError:
        raise ValueError(f"unknown metric {metric!r}; choose from {sorted(METRICS)}") from None
    factors = list(factors or FACTORS)
    unknown = set(factors) - set(FACTORS)
    if unknown:
        raise ValueError(f"unknown factors {sorted(unknown)}")
    results = list(results)
    groups: dict[tuple[str, Any, Any], list[tuple[float, str, str]]] = {}
    for a, b in itertools.combinations(results, 2):
        diff = differing_factors(a.config, b.config)
        if len(diff) != 1 or diff[0] not in factors:
            continue
        va, vb = get(a), get(b)
        if va is None or vb is None or va <= 0 or vb <= 0:
            log.debug("skipping pair with non-positive %s", metric)
            continue
        f = diff[0]
        ha, hb = a.config.config_hash, b.config.config_hash
        groups.setdefault((f, _option(a.config, f), _option(b.config, f)), []).append((vb / va, ha, hb))
        groups.setdefault((f, _option(b.config, f), _option(a.config, f)), []).append((va / vb, hb, ha))

    out = ImpactRatios()
    for (f, src, dst), items in sorted(groups.items(), key=lambda kv: (kv[0][0], str(kv[0][1]), str(kv[0][2]))):
        items = sorted(items, key=lambda it: (it[1], it[2]))  # independent of input order
        ratios = tuple(r for r, _, _ in items)
        out.append(ImpactRatio(f, src, dst, metric, geometric_mean(ratios), ratios,
                               tuple((x, y) for _, x, y in items)))
    if not out:
        out.diagnostic = (
            f"no pair of results differs in exactly one of {factors}; add neighbouring configurations"
        )
        log.warning(out.diagnostic)
    return out


def geometric_mean(values: Sequence[float]) -> float:
    return math.exp(math.fsum(math.log(v) for v in values) / len(values))


# -- export ------------------------------------------------------------------

METRIC_COLUMNS = [
    "config_hash", *FACTORS, "round_count", "sent", "completed", "rejected", "canceled", "timed_out", "failed",
    "rejected_fraction", "mean_latency", "p95_latency", "mean_power", "energy",
    "energy_per_hour_per_developer", "energy_per_1000_requests", "co2_per_hour_per_developer", "saturated",
]

IMPACT_COLUMNS = ["factor", "from_option", "to_option", "metric", "ratio", "geometric_mean", "from_hash", "to_hash"]


def write_metrics_csv(rows: Iterable[SimulationMetrics], out: IO[str]) -> None:
    w = csv.DictWriter(out, METRIC_COLUMNS, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for m in rows:
        d = m.to_dict()
        d.update(d.pop("config"))
        w.writerow(d)


def write_impact_csv(ratios: Iterable[ImpactRatio], out: IO[str]) -> None:
    """Long format: one row per contributing pair."""
    w = csv.writer(out, lineterminator="\n")
    w.writerow(IMPACT_COLUMNS)
    for ir in ratios:
        for r, (ha, hb) in zip(ir.ratios, ir.pairs):
            w.writerow([ir.factor, ir.from_option, ir.to_option, ir.metric, repr(r), repr(ir.ratio), ha, hb])
