"""Masked disc grid and the discrete differential operators on it.

Fields live on the cells of a uniform ``n x n`` grid covering ``[-R, R]^2``.
Only cells whose centres fall strictly inside the disc of radius ``R`` carry
unknowns; everything else is held at zero (homogeneous Dirichlet data by
zero extension).

The gradient uses forward differences of the zero-extended field.  Because a
cell just left of (or below) the disc has a forward neighbour inside it, the
gradient is stored on an ``(n + 1) x (n + 1)`` lattice of cells whose padded
index ``p`` corresponds to grid index ``p - 1``.  The divergence is defined as
the exact negative adjoint of that gradient, so

    <div p, u> = -<p, grad u>

holds to rounding error and ``divergence(gradient(u))`` is the usual 5-point
Dirichlet Laplacian.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .errors import ConvergenceError, GridMismatchError

__all__ = [
    "GridSpec",
    "ScalarField",
    "VectorField2",
    "build_grid",
    "gradient",
    "divergence",
    "laplacian",
    "resolvent",
    "conjugate_gradient",
    "inner",
    "inner_vector",
    "l2_norm",
]


@dataclass(frozen=True)
class GridSpec:
    """Uniform cell grid over ``[-radius, radius]^2`` with a disc mask."""

    radius: float
    n: int

    def __post_init__(self):
        if not np.isfinite(self.radius) or self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius!r}")
        if int(self.n) != self.n or self.n < 8 or self.n % 2:
            raise ValueError(f"n must be an even integer >= 8, got {self.n!r}")

    @property
    def h(self) -> float:
        return 2.0 * self.radius / self.n

    @cached_property
    def centers(self) -> np.ndarray:
        """1-D array of cell-centre coordinates along either axis."""
        return -self.radius + (np.arange(self.n) + 0.5) * self.h

    @cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """``(xi1, xi2)`` arrays of shape ``(n, n)``, ``ij`` indexing."""
        return tuple(np.meshgrid(self.centers, self.centers, indexing="ij"))

    @cached_property
    def mask(self) -> np.ndarray:
        # integer test avoids rounding at the rim: (2i+1-n)^2 + (2j+1-n)^2 < n^2
        k = 2 * np.arange(self.n) + 1 - self.n
        m = k[:, None] ** 2 + k[None, :] ** 2 < self.n**2
        m.setflags(write=False)
        return m

    @property
    def n_interior(self) -> int:
        return int(self.mask.sum())

    @property
    def area(self) -> float:
        """Discrete area of the domain, ``|mask| h^2``."""
        return self.n_interior * self.h**2

    @cached_property
    def gradient_support(self) -> np.ndarray:
        """Gradient-lattice cells whose stencil touches an interior cell.

        This is the mask plus a one-cell rim on the low side of each axis.
        """
        n = self.n
        M = np.zeros((n + 2, n + 2), dtype=bool)
        M[1:-1, 1:-1] = self.mask
        s = M[:-1, :-1] | M[1:, :-1] | M[:-1, 1:]
        s.setflags(write=False)
        return s

    @property
    def gradient_area(self) -> float:
        """Measure of :attr:`gradient_support`; tends to :attr:`area` as h -> 0."""
        return int(self.gradient_support.sum()) * self.h**2

    @cached_property
    def index(self) -> tuple[np.ndarray, np.ndarray]:
        """Grid indices of the interior cells in vector order."""
        return np.nonzero(self.mask)

    def to_vector(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values)[self.mask]

    def from_vector(self, vec: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        out[self.mask] = vec
        return out

    @cached_property
    def gradient_matrices(self) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        """Sparse ``(Gx, Gy)`` mapping interior vectors to gradient cells.

        Rows are the flattened ``(n + 1) x (n + 1)`` gradient lattice.
        Assembled independently of :func:`gradient` so the two can be
        checked against each other.
        """
        n, h = self.n, self.h
        i, j = self.index
        k = np.arange(i.size)
        a, b = i + 1, j + 1  # padded indices
        w = n + 1
        # gx[p, q] = (U[p+1, q] - U[p, q]) / h, gy[p, q] = (U[p, q+1] - U[p, q]) / h
        gx_rows = np.concatenate([(a - 1) * w + b, a * w + b])
        gy_rows = np.concatenate([a * w + (b - 1), a * w + b])
        cols = np.concatenate([k, k])
        vals = np.concatenate([np.full(k.size, 1.0 / h), np.full(k.size, -1.0 / h)])
        gx = sp.csr_matrix((vals, (gx_rows, cols)), shape=(w * w, k.size))
        gy = sp.csr_matrix((vals, (gy_rows, cols)), shape=(w * w, k.size))
        return gx, gy

    @cached_property
    def laplacian_matrix(self) -> sp.csr_matrix:
        """Negative semi-definite Dirichlet Laplacian on interior vectors."""
        gx, gy = self.gradient_matrices
        return -(gx.T @ gx + gy.T @ gy).tocsr()

    def is_connected(self) -> bool:
        _, count = ndimage.label(self.mask)  # default structure is 4-connected
        return count == 1


def build_grid(radius: float, n: int) -> GridSpec:
    """Build the disc grid; rejects ``n < 8``, odd ``n`` or ``radius <= 0``."""
    grid = GridSpec(float(radius), int(n) if int(n) == n else n)
    if grid.n_interior == 0 or not grid.is_connected():
        raise ValueError("disc mask is empty or not 4-connected")
    return grid


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Cell values on a grid, zero outside the disc mask.

    Values are copied, masked and frozen on construction so a field can be
    shared between concurrent solvers.
    """

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        if v.shape != (self.grid.n, self.grid.n):
            raise ValueError(f"expected shape {(self.grid.n,) * 2}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v[~self.grid.mask] = 0.0
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: GridSpec) -> ScalarField:
        return cls(grid, np.zeros((grid.n, grid.n)))

    @classmethod
    def from_function(cls, grid: GridSpec, func) -> ScalarField:
        """Sample ``func(xi1, xi2)`` at cell centres."""
        x, y = grid.coords
        return cls(grid, np.broadcast_to(func(x, y), x.shape))

    @classmethod
    def from_vector(cls, grid: GridSpec, vec: np.ndarray) -> ScalarField:
        return cls(grid, grid.from_vector(vec))

    @property
    def vector(self) -> np.ndarray:
        return self.values[self.grid.mask]

    def _check(self, other: ScalarField):
        if other.grid != self.grid:
            raise GridMismatchError(f"{self.grid} vs {other.grid}")

    def __add__(self, other):
        if isinstance(other, ScalarField):
            self._check(other)
            return ScalarField(self.grid, self.values + other.values)
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, ScalarField):
            self._check(other)
            return ScalarField(self.grid, self.values - other.values)
        return NotImplemented

    def __mul__(self, scalar):
        if np.isscalar(scalar):
            return ScalarField(self.grid, self.values * scalar)
        return NotImplemented

    __rmul__ = __mul__

    def __neg__(self):
        return ScalarField(self.grid, -self.values)

    def __truediv__(self, scalar):
        if np.isscalar(scalar):
            return ScalarField(self.grid, self.values / scalar)
        return NotImplemented

    def positive_part(self) -> ScalarField:
        return ScalarField(self.grid, np.maximum(self.values, 0.0))

    def min(self) -> float:
        return float(self.vector.min())

    def max(self) -> float:
        return float(self.vector.max())


@dataclass(frozen=True, eq=False)
class VectorField2:
    """Two components on the ``(n + 1) x (n + 1)`` gradient lattice."""

    grid: GridSpec
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)

    def __post_init__(self):
        shape = (self.grid.n + 1, self.grid.n + 1)
        for name in ("x", "y"):
            c = np.array(getattr(self, name), dtype=float, copy=True)
            if c.shape != shape:
                raise ValueError(f"component {name}: expected {shape}, got {c.shape}")
            if not np.all(np.isfinite(c)):
                raise ValueError("vector field components must be finite")
            c.setflags(write=False)
            object.__setattr__(self, name, c)

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.x, self.y)


def _padded(u: ScalarField) -> np.ndarray:
    n = u.grid.n
    U = np.zeros((n + 2, n + 2))
    U[1:-1, 1:-1] = u.values
    return U


def gradient(u: ScalarField) -> VectorField2:
    """Forward-difference gradient of the zero-extended field."""
    U = _padded(u)
    h = u.grid.h
    gx = (U[1:, :-1] - U[:-1, :-1]) / h
    gy = (U[:-1, 1:] - U[:-1, :-1]) / h
    return VectorField2(u.grid, gx, gy)


def divergence(p: VectorField2) -> ScalarField:
    """Backward-difference divergence, the negative adjoint of :func:`gradient`."""
    g = p.grid
    n, h = g.n, g.h
    d = (
        p.x[1 : n + 1, 1 : n + 1]
        - p.x[0:n, 1 : n + 1]
        + p.y[1 : n + 1, 1 : n + 1]
        - p.y[1 : n + 1, 0:n]
    ) / h
    return ScalarField(g, d)


def laplacian(u: ScalarField) -> ScalarField:
    return divergence(gradient(u))


def inner(u: ScalarField, v: ScalarField) -> float:
    """``h^2``-weighted L2 inner product."""
    if u.grid != v.grid:
        raise GridMismatchError(f"{u.grid} vs {v.grid}")
    return float(u.grid.h**2 * np.sum(u.values * v.values))


def inner_vector(p: VectorField2, q: VectorField2) -> float:
    if p.grid != q.grid:
        raise GridMismatchError(f"{p.grid} vs {q.grid}")
    return float(p.grid.h**2 * (np.sum(p.x * q.x) + np.sum(p.y * q.y)))


def l2_norm(u: ScalarField) -> float:
    return float(u.grid.h * np.linalg.norm(u.values))


def conjugate_gradient(matvec, b, x0=None, rtol=1e-10, maxiter=None, precond=None):
    """Preconditioned CG for a symmetric positive-definite operator.

    Returns ``(x, history)`` where ``history`` holds relative residuals.
    Raises :class:`ConvergenceError` if ``rtol`` is not met in ``maxiter``
    iterations.
    """
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), [0.0]
    maxiter = 10 * b.size if maxiter is None else maxiter
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - matvec(x)
    history = [np.linalg.norm(r) / bnorm]
    if history[-1] <= rtol:
        return x, history
    z = r if precond is None else precond * r
    p = z.copy()
    rz = r @ z
    for _ in range(maxiter):
        Ap = matvec(p)
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        history.append(np.linalg.norm(r) / bnorm)
        if history[-1] <= rtol:
            return x, history
        z = r if precond is None else precond * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError("conjugate gradient did not converge", history[-1], history)


def resolvent(u: ScalarField, eps: float, rtol: float = 1e-10) -> ScalarField:
    """``J_eps u = (I - eps * laplacian)^{-1} u`` by conjugate gradients."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps!r}")
    grid = u.grid
    L = grid.laplacian_matrix
    diag = 1.0 - eps * L.diagonal()
    x, _ = conjugate_gradient(
        lambda v: v - eps * (L @ v),
        u.vector,
        rtol=rtol,
        maxiter=10 * grid.n_interior,
        precond=1.0 / diag,
    )
    return ScalarField.from_vector(grid, x)
