"""Shared value types: model constants, time grids and Monte Carlo estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Z95 = 1.959963984540054


@dataclass(frozen=True)
class ModelParams:
    """Market and model constants of the jump-to-ruin setup.

    ``lam`` is both the ruin intensity and the drift of the auxiliary
    Black-Scholes spot, so the fair-model spot is a martingale.
    """

    s0: float = 1.0
    strike: float = 1.0
    maturity: float = 10.0
    sigma: float = 0.3
    lam: float = 0.01

    def __post_init__(self):
        for name in ("s0", "strike", "maturity", "sigma", "lam"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise ValueError(f"ModelParams.{name} must be finite and > 0, got {value!r}")

    def replace(self, **changes) -> "ModelParams":
        fields = dict(s0=self.s0, strike=self.strike, maturity=self.maturity,
                      sigma=self.sigma, lam=self.lam)
        fields.update(changes)
        return ModelParams(**fields)


class TimeGrid:
    """Ascending instants ``0 = t_0 < ... < t_n = T``; steps may be uneven."""

    __slots__ = ("times",)

    def __init__(self, times):
        times = np.asarray(times, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("a time grid needs at least two instants")
        if times[0] != 0.0:
            raise ValueError("a time grid must start at 0")
        if not np.all(np.diff(times) > 0.0):
            raise ValueError("time grid must be strictly increasing")
        times.setflags(write=False)
        self.times = times

    @classmethod
    def uniform(cls, maturity: float, steps: int) -> "TimeGrid":
        if steps < 1:
            raise ValueError("steps must be >= 1")
        times = maturity * np.arange(steps + 1) / steps
        times[-1] = maturity
        return cls(times)

    @property
    def maturity(self) -> float:
        return float(self.times[-1])

    @property
    def steps(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def check_maturity(self, params: ModelParams) -> None:
        if not math.isclose(self.maturity, params.maturity, rel_tol=0.0, abs_tol=1e-12):
            raise ValueError(f"grid ends at {self.maturity}, expected maturity {params.maturity}")

    def coarsen(self, factor: int) -> "TimeGrid":
        """Every ``factor``-th node; the step count must be divisible."""
        if factor < 1 or self.steps % factor:
            raise ValueError(f"cannot coarsen {self.steps} steps by {factor}")
        return TimeGrid(self.times[::factor])

    def index_of(self, other: "TimeGrid") -> np.ndarray:
        """Positions of ``other``'s nodes inside this grid (must be a subgrid)."""
        idx = np.searchsorted(self.times, other.times)
        idx = np.clip(idx, 0, self.steps)
        if not np.allclose(self.times[idx], other.times, rtol=0.0, atol=1e-12):
            raise ValueError("grid is not a subgrid of this grid")
        return idx

    def __len__(self):
        return self.times.size

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.times, other.times)

    def __repr__(self):
        return f"TimeGrid(steps={self.steps}, maturity={self.maturity:g})"


def hedge_grid(params: ModelParams, steps: int = 120) -> TimeGrid:
    return TimeGrid.uniform(params.maturity, steps)


def capital_grid(params: ModelParams, steps: int = 10) -> TimeGrid:
    return TimeGrid.uniform(params.maturity, steps)


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo point value with standard error and 95% interval.

    ``stderr`` is ``None`` for closed-form (exact) values.
    """

    value: float
    stderr: float | None = None
    ci_lo: float | None = None
    ci_hi: float | None = None
    n: int | None = None

    @classmethod
    def exact(cls, value: float) -> "Estimate":
        return cls(float(value))

    @classmethod
    def from_samples(cls, samples) -> "Estimate":
        x = np.asarray(samples, dtype=float).ravel()
        if x.size < 2:
            raise ValueError("need at least two samples")
        mean = float(x.mean())
        se = float(x.std(ddof=1) / math.sqrt(x.size))
        return cls(mean, se, mean - Z95 * se, mean + Z95 * se, int(x.size))

    @property
    def is_exact(self) -> bool:
        return self.stderr is None

    @property
    def rel_error95(self) -> float:
        if self.stderr is None or self.value == 0.0:
            return 0.0
        return Z95 * self.stderr / abs(self.value)

    def row(self) -> tuple:
        if self.is_exact:
            return (self.value, "exact", "exact", "exact")
        return (self.value, self.stderr, self.ci_lo, self.ci_hi)
