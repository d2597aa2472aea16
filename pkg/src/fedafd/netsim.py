"""Simulated wall clock for synchronous rounds over LTE-like links."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

PER_ROUND = "per_round"
PER_EXPERIMENT = "per_experiment"


@dataclass(frozen=True)
class NetworkModel:
    down_mbps_range: tuple[float, float] = (5.0, 12.0)
    up_mbps_range: tuple[float, float] = (2.0, 5.0)
    sampling: str = PER_ROUND
    compute_seconds_per_round: float = 0.0

    def __post_init__(self):
        for name, (lo, hi) in (("down_mbps_range", self.down_mbps_range), ("up_mbps_range", self.up_mbps_range)):
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < low <= high, got ({lo}, {hi})")
        if self.sampling not in (PER_ROUND, PER_EXPERIMENT):
            raise ValueError(f"sampling must be {PER_ROUND!r} or {PER_EXPERIMENT!r}")
        if self.compute_seconds_per_round < 0:
            raise ValueError("compute_seconds_per_round must be nonnegative")

    def sample_rates(self, rng: np.random.Generator) -> tuple[float, float]:
        """One (down, up) Mbps pair shared by every client."""
        down = float(rng.uniform(*self.down_mbps_range))
        up = float(rng.uniform(*self.up_mbps_range))
        return down, up


class LinkSampler:
    """Hands out link rates per round according to the model's sampling mode."""

    def __init__(self, model: NetworkModel, rng: np.random.Generator):
        self.model = model
        self.rng = rng
        self._fixed = model.sample_rates(rng) if model.sampling == PER_EXPERIMENT else None

    def next(self) -> tuple[float, float]:
        return self._fixed if self._fixed is not None else self.model.sample_rates(self.rng)


def transfer_seconds(n_bytes: int, rate_mbps: float) -> float:
    if rate_mbps <= 0:
        raise ValueError(f"rate must be positive, got {rate_mbps}")
    return n_bytes * 8 / (rate_mbps * 1e6)


@dataclass(frozen=True)
class RoundTiming:
    down_s: float
    up_s: float
    total_s: float


def round_time(
    client_bytes: Sequence[tuple[int, int]], rates: tuple[float, float], compute_s: float = 0.0
) -> RoundTiming:
    """Synchronous barrier: the round lasts as long as its slowest client."""
    if not client_bytes:
        raise ValueError("a round needs at least one client")
    down_rate, up_rate = rates
    worst = None
    for down_b, up_b in client_bytes:
        d = transfer_seconds(down_b, down_rate)
        u = transfer_seconds(up_b, up_rate)
        total = d + compute_s + u
        if worst is None or total > worst.total_s:
            worst = RoundTiming(d, u, total)
    return worst


@dataclass
class ClockLedger:
    entries: list[RoundTiming] = field(default_factory=list)
    cumulative_seconds: float = 0.0

    def add(self, timing: RoundTiming) -> float:
        self.entries.append(timing)
        self.cumulative_seconds += timing.total_s
        return self.cumulative_seconds


def convergence_time(rows: Iterable[Mapping], target_accuracy: float) -> Optional[float]:
    """Cumulative minutes at the first row whose accuracy reaches the target."""
    for row in rows:
        if float(row["test_accuracy"]) >= target_accuracy:
            return float(row["cum_seconds"]) / 60.0
    return None


def speedup_ratio(baseline_minutes: Optional[float], variant_minutes: Optional[float]) -> float:
    if baseline_minutes is None or variant_minutes is None:
        raise ValueError("speedup needs both runs to reach the target accuracy")
    if variant_minutes <= 0:
        raise ValueError("variant convergence time must be positive")
    return baseline_minutes / variant_minutes


def format_speedup(ratio: float) -> str:
    return f"{ratio:.0f}x"
