"""Time grids, Brownian ensembles and the elementary path perturbations.

Paths are stored as node values. A single path is a 1-D array of length
``N + 1``; an ensemble stacks paths along the first axis, shape ``(M, N + 1)``.
All perturbation helpers act on the last axis, so they work on either shape.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration or precondition violation."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = i * dt`` on ``[0, T]`` with ``N`` steps."""

    T: float
    N: int

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.N + 1) * self.dt
        t[-1] = self.T
        return t

    def node(self, t: float) -> int:
        """Index of the node nearest to time ``t`` (ties to the lower node)."""
        x = t / self.dt
        i = int(np.floor(x + 0.5))
        if abs(x - (i - 0.5)) < 1e-9:
            i -= 1
        if not 0 <= i <= self.N:
            raise ConfigError(f"time {t} outside [0, {self.T}]")
        return i


def make_grid(T: float, N: int) -> TimeGrid:
    if not np.isfinite(T) or T <= 0:
        raise ConfigError(f"horizon must be positive, got T={T}")
    if int(N) != N or N < 2:
        raise ConfigError(f"need at least 2 steps, got N={N}")
    return TimeGrid(float(T), int(N))


@dataclass(frozen=True)
class SamplePath:
    grid: TimeGrid
    values: np.ndarray
    kind: str = "continuous"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape[-1] != self.grid.N + 1:
            raise ConfigError("path length does not match grid")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class BrownianEnsemble:
    """``M`` Brownian paths on a shared grid.

    ``deterministic`` marks a degenerate ensemble (one frozen path) for which
    conditional expectations are the identity.
    """

    grid: TimeGrid
    paths: np.ndarray
    master_seed: int | None = None
    deterministic: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def M(self) -> int:
        return self.paths.shape[0]

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.paths, axis=1)

    def subset(self, rows) -> "BrownianEnsemble":
        return BrownianEnsemble(self.grid, self.paths[rows], self.master_seed,
                                self.deterministic)


def path_generator(seed: int, j: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for path ``j``; independent of evaluation order."""
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, int(j)], dtype=np.uint64)
    counter = np.array([0, 0, 0, int(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def _fill_increments(out, seed, start, stop, sd, stream):
    n = out.shape[1]
    for j in range(start, stop):
        out[j] = path_generator(seed, j, stream).standard_normal(n) * sd


def _normals(seed, M, n, sd, threads, stream=0):
    out = np.empty((M, n))
    threads = max(1, int(threads))
    if threads == 1 or M < 2 * threads:
        _fill_increments(out, seed, 0, M, sd, stream)
        return out
    bounds = np.linspace(0, M, threads + 1).astype(int)
    with ThreadPoolExecutor(threads) as pool:
        jobs = [pool.submit(_fill_increments, out, seed, a, b, sd, stream)
                for a, b in zip(bounds[:-1], bounds[1:])]
        for job in jobs:
            job.result()
    return out


def sample_brownian(grid: TimeGrid, M: int, seed: int, threads: int = 1) -> BrownianEnsemble:
    """Simulate ``M`` Brownian paths; path ``j`` depends only on ``(seed, j)``."""
    if int(M) != M or M < 1:
        raise ConfigError(f"need at least one path, got M={M}")
    dw = _normals(seed, int(M), grid.N, np.sqrt(grid.dt), threads)
    paths = np.zeros((int(M), grid.N + 1))
    np.cumsum(dw, axis=1, out=paths[:, 1:])
    return BrownianEnsemble(grid, paths, int(seed))


def deterministic_ensemble(grid: TimeGrid, values) -> BrownianEnsemble:
    """Single frozen path treated as a degenerate ensemble."""
    v = np.broadcast_to(np.asarray(values, dtype=float), (grid.N + 1,))
    return BrownianEnsemble(grid, v[None, :].copy(), None, deterministic=True)


def exact_time_integral(ensemble: BrownianEnsemble, threads: int = 1) -> np.ndarray:
    """Exact draw of ``int_0^T w ds`` given the node values.

    Between nodes the path is a Brownian bridge, so each step contributes the
    trapezoid value plus an independent N(0, dt^3/12) term.
    """
    grid = ensemble.grid
    w = ensemble.paths
    trap = 0.5 * grid.dt * (w[:, :-1] + w[:, 1:]).sum(axis=1)
    seed = 0 if ensemble.master_seed is None else ensemble.master_seed
    noise = _normals(seed, ensemble.M, grid.N, np.sqrt(grid.dt ** 3 / 12.0), threads, stream=1)
    return trap + noise.sum(axis=1)


def _check_node(values, i):
    n = np.shape(values)[-1]
    if not 0 <= i < n:
        raise ConfigError(f"node index {i} outside 0..{n - 1}")


def bump(values: np.ndarray, i: int, eps) -> np.ndarray:
    """Copy of ``values`` with node ``i`` shifted by ``eps`` (array level)."""
    _check_node(values, i)
    out = np.array(values, dtype=float, copy=True)
    out[..., i] += eps
    return out


def bump_path(path: SamplePath, i: int, eps: float) -> SamplePath:
    return SamplePath(path.grid, bump(path.values, i, eps), "cadlag-bumped")


def flat_extend_values(prefix: np.ndarray, k: int, N: int | None = None) -> np.ndarray:
    """Append ``k`` copies of the last prefix value (array level)."""
    prefix = np.asarray(prefix, dtype=float)
    i = prefix.shape[-1] - 1
    if k < 0 or (N is not None and i + k > N):
        raise ConfigError(f"cannot extend node {i} by {k} steps")
    tail = np.repeat(prefix[..., -1:], k, axis=-1)
    return np.concatenate([prefix, tail], axis=-1)


def flat_extend(path: SamplePath, i: int, k: int) -> SamplePath:
    """Freeze the path after node ``i``; nodes ``i+1 .. i+k`` carry ``v_i``.

    The returned path keeps full length, so nodes past ``i + k`` are frozen
    too; adapted functionals evaluated at ``i + k`` never look at them.
    """
    N = path.grid.N
    if not 0 <= i <= N or k < 0 or i + k > N:
        raise ConfigError(f"cannot extend node {i} by {k} steps on N={N}")
    v = np.array(path.values, copy=True)
    v[..., i + 1:] = v[..., i:i + 1]
    return SamplePath(path.grid, v, path.kind)


def ramp(dt: float, z: np.ndarray) -> np.ndarray:
    """Left-endpoint running integral ``sum_{j<i} z_j dt`` for every node."""
    z = np.asarray(z, dtype=float)
    out = np.zeros(z.shape)
    np.cumsum(z[..., :-1] * dt, axis=-1, out=out[..., 1:])
    return out


def perturb_direction(path: SamplePath, z, eps: float) -> SamplePath:
    """Cameron-Martin shift ``v_i + eps * sum_{j<i} z_j dt``."""
    if isinstance(z, SamplePath):
        if z.grid != path.grid:
            raise ConfigError("direction lives on a different grid")
        z = z.values
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != path.grid.N + 1:
        raise ConfigError("direction length does not match grid")
    return SamplePath(path.grid, path.values + eps * ramp(path.grid.dt, z), path.kind)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_ensemble_csv(ensemble: BrownianEnsemble, filename) -> None:
    """Header carries the node times; one row per path."""
    with open(filename, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([_fmt(t) for t in ensemble.grid.times])
        for row in ensemble.paths:
            writer.writerow([_fmt(x) for x in row])


def load_ensemble_csv(filename) -> BrownianEnsemble:
    with open(filename, newline="") as fh:
        rows = list(csv.reader(fh))
    times = np.array([float(x) for x in rows[0]])
    grid = make_grid(times[-1], len(times) - 1)
    if not np.allclose(times, grid.times, rtol=0, atol=1e-12 * max(1.0, grid.T)):
        raise ConfigError("CSV header is not a uniform grid")
    paths = np.array([[float(x) for x in r] for r in rows[1:]])
    return BrownianEnsemble(grid, paths.reshape(-1, grid.N + 1))
