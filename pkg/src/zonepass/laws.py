"""Duration distributions shared by the demand and zone models.

Three closed-form families cover the deterministic, memoryless and
bounded-jitter cases: point mass, exponential, uniform.  Each law knows
its mean, can sample itself, and exposes the survival function
``P(X > x)`` plus its integral, which the occupancy projection needs in
closed form.

All durations are seconds.  JSON blocks may state parameters either in
seconds (``*_s``) or minutes (``*_min``); minutes are converted on load.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np


@dataclass(frozen=True)
class PointMass:
    """Degenerate duration: always exactly ``value`` seconds."""

    value: float

    def mean(self) -> float:
        return self.value

    def sample(self, rng: np.random.Generator, size: int | None = None):
        if size is None:
            return self.value
        return np.full(size, self.value)

    def survival(self, x: float) -> float:
        return 1.0 if x < self.value else 0.0

    def survival_integral(self, x1: float, x2: float) -> float:
        # integral of P(X > x) over [x1, x2]
        return max(0.0, min(x2, self.value) - min(x1, self.value))


@dataclass(frozen=True)
class Exponential:
    """Memoryless duration with the given mean, seconds."""

    mean_s: float

    def mean(self) -> float:
        return self.mean_s

    def sample(self, rng: np.random.Generator, size: int | None = None):
        return rng.exponential(self.mean_s, size)

    def survival(self, x: float) -> float:
        if x <= 0.0:
            return 1.0
        return math.exp(-x / self.mean_s)

    def survival_integral(self, x1: float, x2: float) -> float:
        if x2 <= 0.0:
            return x2 - x1
        below = -x1 if x1 < 0.0 else 0.0
        x1 = max(x1, 0.0)
        return below + self.mean_s * (math.exp(-x1 / self.mean_s) - math.exp(-x2 / self.mean_s))


@dataclass(frozen=True)
class Uniform:
    """Duration uniform on [lo, hi), seconds."""

    lo: float
    hi: float

    def mean(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def sample(self, rng: np.random.Generator, size: int | None = None):
        return rng.uniform(self.lo, self.hi, size)

    def survival(self, x: float) -> float:
        if x < self.lo:
            return 1.0
        if x >= self.hi:
            return 0.0
        return (self.hi - x) / (self.hi - self.lo)

    def survival_integral(self, x1: float, x2: float) -> float:
        if x1 >= x2:
            return 0.0
        # piecewise: S = 1 below lo, linear on [lo, hi), 0 above
        total = max(0.0, min(x2, self.lo) - min(x1, self.lo))
        a, b = max(x1, self.lo), min(x2, self.hi)
        if b > a:
            width = self.hi - self.lo
            total += ((self.hi - a) ** 2 - (self.hi - b) ** 2) / (2.0 * width)
        return total


DurationLaw = Union[PointMass, Exponential, Uniform]

# Entry-jitter menu: the entry instant within a granted slot is either the
# slot start exactly or uniform over the slot.
ENTRY_AT_START = "start"
ENTRY_UNIFORM = "uniform"
ENTRY_JITTERS = (ENTRY_AT_START, ENTRY_UNIFORM)


def _seconds(obj: dict, base: str, *, required: bool = True) -> float | None:
    if f"{base}_s" in obj:
        return float(obj[f"{base}_s"])
    if f"{base}_min" in obj:
        return float(obj[f"{base}_min"]) * 60.0
    if required:
        raise ValueError(f"duration law needs '{base}_s' or '{base}_min'")
    return None


def law_from_json(obj: dict) -> DurationLaw:
    """Parse a duration-law block, converting minutes to seconds."""
    kind = obj.get("kind")
    if kind == "point":
        return PointMass(_seconds(obj, "value"))
    if kind == "exponential":
        return Exponential(_seconds(obj, "mean"))
    if kind == "uniform":
        return Uniform(_seconds(obj, "lo"), _seconds(obj, "hi"))
    raise ValueError(f"unknown duration law kind: {kind!r}")


def law_to_json(law: DurationLaw) -> dict:
    if isinstance(law, PointMass):
        return {"kind": "point", "value_s": law.value}
    if isinstance(law, Exponential):
        return {"kind": "exponential", "mean_s": law.mean_s}
    if isinstance(law, Uniform):
        return {"kind": "uniform", "lo_s": law.lo, "hi_s": law.hi}
    raise TypeError(f"not a duration law: {law!r}")
