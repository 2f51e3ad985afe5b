"""Exact simulation of the jump-to-ruin model and its auxiliary Black-Scholes spot.

Every path owns two counter-based substreams (Brownian, ruin) keyed by the
master seed and the path index, so results do not depend on batching,
chunking or the number of worker threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import analytics
from .core import ModelParams, TimeGrid

_TAGS = {"brownian": 0x42, "ruin": 0x52}
_MASK64 = (1 << 64) - 1


class RngPolicy:
    """Maps (master_seed, path_index, tag) to an independent Philox substream."""

    __slots__ = ("master_seed",)

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed) & _MASK64

    def generator(self, path_index: int, tag: str) -> np.random.Generator:
        try:
            tag_id = _TAGS[tag]
        except KeyError:
            raise ValueError(f"unknown stream tag {tag!r}") from None
        if path_index < 0:
            raise ValueError("path_index must be >= 0")
        bitgen = np.random.Philox(key=[self.master_seed, tag_id],
                                  counter=[0, 0, int(path_index), 0])
        return np.random.Generator(bitgen)

    def normals(self, path_index: int, count: int) -> np.ndarray:
        return self.generator(path_index, "brownian").standard_normal(count)

    def exponentials(self, path_index: int, count: int) -> np.ndarray:
        """Unit-rate exponentials; the first one drives the genuine ruin time."""
        return self.generator(path_index, "ruin").standard_exponential(count)

    def __repr__(self):
        return f"RngPolicy(master_seed={self.master_seed})"


def _log_increments(params: ModelParams, grid: TimeGrid, z):
    dt = grid.dt
    return (params.lam - 0.5 * params.sigma ** 2) * dt + params.sigma * np.sqrt(dt) * z


def simulate_bs_spot(params: ModelParams, grid: TimeGrid, path_index: int, rng: RngPolicy) -> np.ndarray:
    """Auxiliary lognormal spot on ``grid``, sampled exactly (no Euler bias)."""
    grid.check_maturity(params)
    z = rng.normals(path_index, grid.steps)
    log_s = np.concatenate(([0.0], np.cumsum(_log_increments(params, grid, z))))
    return params.s0 * np.exp(log_s)


def simulate_ruin_time(params: ModelParams, path_index: int, rng: RngPolicy) -> float:
    return float(rng.exponentials(path_index, 1)[0] / params.lam)


def restart_ruin_delays(params: ModelParams, path_index: int, rng: RngPolicy, count: int) -> np.ndarray:
    """Ruin delays for paths restarted alive at later dates.

    Entry 0 is the genuine ruin time; entry i >= 1 is an independent
    exponential delay used when the spot is restarted from its auxiliary value
    at the i-th date of a coarser grid.
    """
    return rng.exponentials(path_index, count) / params.lam


@dataclass(frozen=True)
class SimulatedPath:
    grid: TimeGrid
    bs_spot: np.ndarray
    ruin_time: float
    spot: np.ndarray
    implied_vol: np.ndarray

    @property
    def alive(self) -> np.ndarray:
        return self.grid.times < self.ruin_time


def _vol_surface(params, times, bs_spot, path_label=None):
    """Implied vol of the live auxiliary spot at every node before T (0 at T).

    Solved column by column, each warm-started from the previous date.
    """
    m, cols = bs_spot.shape
    vol = np.zeros((m, cols))
    guess = None
    for i in range(cols):
        if times[i] >= times[-1]:
            break
        try:
            vol[:, i] = analytics.implied_vol(times[i], bs_spot[:, i], params, guess=guess)
        except analytics.NoBracket as exc:
            where = "" if path_label is None else f" ({path_label})"
            raise analytics.NoBracket(f"node {i}{where}: {exc}") from exc
        guess = vol[:, i]
    return vol


def assemble_path(bs_spot, ruin_time, grid: TimeGrid, params: ModelParams) -> SimulatedPath:
    bs_spot = np.asarray(bs_spot, dtype=float)
    if bs_spot.shape != (len(grid),):
        raise ValueError("bs_spot must have one value per grid node")
    if not ruin_time > 0.0:
        raise ValueError("ruin_time must be > 0")
    alive = grid.times < ruin_time
    vol = _vol_surface(params, grid.times, bs_spot[None, :])[0]
    spot = np.where(alive, bs_spot, 0.0)
    return SimulatedPath(grid, bs_spot, float(ruin_time), spot, np.where(alive, vol, 0.0))


@dataclass(frozen=True)
class PathBatch:
    """Many paths on one grid, stored row-wise.

    ``bs_vol`` is the implied vol of the auxiliary (never ruined) spot. The
    fair-model arrays ``spot``/``implied_vol`` mask it with the ruin time.
    ``delays`` holds the restart ruin delays (column 0 equals ``ruin_time``).
    """

    grid: TimeGrid
    path_index: np.ndarray
    bs_spot: np.ndarray
    ruin_time: np.ndarray
    bs_vol: np.ndarray | None
    delays: np.ndarray

    def __len__(self):
        return self.path_index.size

    @property
    def alive(self) -> np.ndarray:
        return self.grid.times[None, :] < self.ruin_time[:, None]

    @property
    def spot(self) -> np.ndarray:
        return np.where(self.alive, self.bs_spot, 0.0)

    @property
    def implied_vol(self) -> np.ndarray:
        if self.bs_vol is None:
            raise ValueError("batch simulated without implied vols")
        return np.where(self.alive, self.bs_vol, 0.0)

    def path(self, row: int) -> SimulatedPath:
        alive = self.alive[row]
        vol = self.implied_vol[row] if self.bs_vol is not None else np.zeros(len(self.grid))
        return SimulatedPath(self.grid, self.bs_spot[row].copy(), float(self.ruin_time[row]),
                             np.where(alive, self.bs_spot[row], 0.0), vol)

    def coarsen(self, factor: int) -> "PathBatch":
        cols = np.arange(0, self.grid.steps + 1, factor)
        return PathBatch(self.grid.coarsen(factor), self.path_index, self.bs_spot[:, cols],
                         self.ruin_time, None if self.bs_vol is None else self.bs_vol[:, cols],
                         self.delays)

    @staticmethod
    def concat(parts) -> "PathBatch":
        parts = list(parts)
        vols = None if parts[0].bs_vol is None else np.concatenate([p.bs_vol for p in parts])
        return PathBatch(parts[0].grid,
                         np.concatenate([p.path_index for p in parts]),
                         np.concatenate([p.bs_spot for p in parts]),
                         np.concatenate([p.ruin_time for p in parts]),
                         vols,
                         np.concatenate([p.delays for p in parts]))


def _simulate_chunk(params, grid, rng, indices, restarts, with_vol):
    steps = grid.steps
    z = np.empty((indices.size, steps))
    delays = np.empty((indices.size, restarts + 1))
    for row, m in enumerate(indices):
        z[row] = rng.normals(int(m), steps)
        delays[row] = restart_ruin_delays(params, int(m), rng, restarts + 1)
    log_s = np.cumsum(_log_increments(params, grid, z), axis=1)
    bs_spot = np.empty((indices.size, steps + 1))
    bs_spot[:, 0] = params.s0
    bs_spot[:, 1:] = params.s0 * np.exp(log_s)
    label = f"paths {indices[0]}..{indices[-1]}"
    vol = _vol_surface(params, grid.times, bs_spot, label) if with_vol else None
    return PathBatch(grid, indices.copy(), bs_spot, delays[:, 0].copy(), vol, delays)


def simulate_paths(params: ModelParams, grid: TimeGrid, rng: RngPolicy, paths, *,
                   restarts: int = 0, with_vol: bool = True, workers: int = 1,
                   chunk: int = 10_000) -> PathBatch:
    """Simulate paths with indices ``paths`` (an int M means ``range(M)``).

    Row m of the result is bitwise identical to ``simulate_bs_spot`` /
    ``simulate_ruin_time`` for the same index, whatever ``workers``/``chunk``.
    """
    grid.check_maturity(params)
    indices = np.arange(paths) if isinstance(paths, (int, np.integer)) else np.asarray(paths, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("no paths requested")
    pieces = [indices[i:i + chunk] for i in range(0, indices.size, chunk)]

    def job(idx):
        return _simulate_chunk(params, grid, rng, idx, restarts, with_vol)

    if workers > 1 and len(pieces) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, pieces))
    else:
        parts = [job(p) for p in pieces]
    return parts[0] if len(parts) == 1 else PathBatch.concat(parts)


def lognormal_mean(params: ModelParams, t: float) -> float:
    """E of the auxiliary spot at t, used as a simulation oracle."""
    return params.s0 * math.exp(params.lam * t)
