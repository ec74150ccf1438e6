"""Seeded Brownian paths on a uniform time grid.

Paths are generated with numpy's PCG64 bit generator seeded from an explicit
``SeedSequence`` so that ``(seed, N, T, dt)`` fixes every value.  Refinement
fills in intermediate times by Brownian-bridge sampling; dyadic refinements
are generated one halving at a time with their own per-level stream, so
refining twice by 2 gives exactly the same path as refining once by 4.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["BrownianPath", "sample_path", "zero_path", "refine_path", "write_path_csv", "read_path_csv"]


def _steps(T: float, dt: float) -> int:
    if not (T > 0 and dt > 0):
        raise ValueError("T and dt must be positive")
    k = round(T / dt)
    if k < 1 or abs(k * dt - T) > 1e-9 * T:
        raise ValueError(f"T/dt must be integral, got T={T!r}, dt={dt!r}")
    return int(k)


@dataclass(frozen=True, eq=False)
class BrownianPath:
    """``N`` independent Brownian motions sampled at ``t_k = k dt``.

    ``level`` counts dyadic refinements applied since sampling and selects the
    random stream used for the next one.
    """

    seed: int | None
    dt: float
    T: float
    values: np.ndarray = field(repr=False)
    level: int = 0

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim != 2:
            raise ValueError("values must be an N x (K+1) array")
        K = _steps(self.T, self.dt)
        if v.shape[1] != K + 1:
            raise ValueError(f"expected {K + 1} time points, got {v.shape[1]}")
        if np.any(v[:, 0] != 0.0):
            raise ValueError("Brownian paths start at 0")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1] - 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=1)

    def at(self, k: int) -> np.ndarray:
        return self.values[:, k]

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)


def sample_path(seed: int, N: int, T: float, dt: float) -> BrownianPath:
    if N < 1:
        raise ValueError("need at least one Brownian motion")
    K = _steps(T, dt)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    inc = rng.standard_normal((N, K)) * np.sqrt(dt)
    values = np.zeros((N, K + 1))
    np.cumsum(inc, axis=1, out=values[:, 1:])
    return BrownianPath(int(seed), float(dt), float(T), values)


def zero_path(N: int, T: float, dt: float) -> BrownianPath:
    """The deterministic path ``beta = 0`` (no noise)."""
    K = _steps(T, dt)
    return BrownianPath(None, float(dt), float(T), np.zeros((N, K + 1)))


def _stream(path: BrownianPath, tag: int) -> np.random.Generator:
    entropy = [0 if path.seed is None else path.seed, path.level, tag]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def _halve(path: BrownianPath) -> BrownianPath:
    v = path.values
    K = path.n_steps
    new = np.empty((path.N, 2 * K + 1))
    new[:, 0::2] = v
    if path.seed is None:
        new[:, 1::2] = 0.5 * (v[:, :-1] + v[:, 1:])
    else:
        z = _stream(path, 2).standard_normal((path.N, K))
        new[:, 1::2] = 0.5 * (v[:, :-1] + v[:, 1:]) + 0.5 * np.sqrt(path.dt) * z
    return BrownianPath(path.seed, path.dt / 2, path.T, new, path.level + 1)


def refine_path(path: BrownianPath, factor: int) -> BrownianPath:
    """Refine the time step by ``factor`` with Brownian-bridge interpolation.

    Existing values are kept exactly.  Powers of two are built from repeated
    halvings; other factors use sequential bridge sampling.
    """
    factor = int(factor)
    if factor < 2:
        raise ValueError("refinement factor must be an integer >= 2")
    if factor & (factor - 1) == 0:
        while factor > 1:
            path = _halve(path)
            factor //= 2
        return path
    v = path.values
    K, N = path.n_steps, path.N
    fine_dt = path.dt / factor
    new = np.empty((N, K * factor + 1))
    new[:, ::factor] = v
    z = None if path.seed is None else _stream(path, factor).standard_normal((N, K, factor - 1))
    prev, end = v[:, :-1], v[:, 1:]
    for j in range(1, factor):
        remaining = factor - j + 1  # fine steps from prev to the interval end
        cur = prev + (end - prev) / remaining
        if z is not None:
            cur = cur + np.sqrt(fine_dt * (remaining - 1) / remaining) * z[:, :, j - 1]
        new[:, j::factor] = cur
        prev = cur
    return BrownianPath(path.seed, fine_dt, path.T, new, path.level + 1)


def write_path_csv(path: BrownianPath, target) -> None:
    """Columns ``t, beta_1 .. beta_N``; floats written with ``repr`` so reads are exact."""
    target = Path(target)
    with target.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["t"] + [f"beta_{i + 1}" for i in range(path.N)])
        for k, t in enumerate(path.times):
            w.writerow([repr(float(t))] + [repr(float(b)) for b in path.values[:, k]])


def read_path_csv(source, seed: int | None = None) -> BrownianPath:
    with Path(source).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[0] != "t" or len(body) < 2:
        raise ValueError("not a Brownian path CSV")
    data = np.array([[float(x) for x in r] for r in body])
    t = data[:, 0]
    dt = float(t[1] - t[0])
    T = float(t[-1])
    return BrownianPath(seed, dt, T, data[:, 1:].T)
