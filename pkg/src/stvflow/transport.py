"""Rigid-rotation transport fields and the groups they generate.

Each field is ``b(xi) = L xi`` with ``L = omega * [[0, 1], [-1, 0]]``.  Its flow
is the rotation ``exp(s L)``, which maps the disc onto itself, so the group
acts on grid fields by semi-Lagrangian lookup: the value at a cell centre is
the bilinear interpolant of the zero-extended field at the rotated point.
Bilinear weights are non-negative, hence the discrete group preserves sign.

The generator ``B u = b . grad u`` is discretized as
``0.5 * (b . grad u + div(b u))`` with the adjoint pair of :mod:`stvflow.grid`.
That form is exactly skew-adjoint on masked fields for any ``b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .grid import GridSpec, ScalarField, VectorField2, divergence, gradient, l2_norm, resolvent

__all__ = [
    "J",
    "TransportFieldSpec",
    "TransportSystem",
    "flow_matrix",
    "flow_map",
    "apply_linear_map",
    "group_apply",
    "group_apply_multi",
    "b_operator",
    "b_squared",
    "b_matrix",
    "check_commutation_with_laplacian",
]

J = np.array([[0.0, 1.0], [-1.0, 0.0]])


@dataclass(frozen=True, eq=False)
class TransportFieldSpec:
    """A skew-symmetric 2x2 matrix generating ``b(xi) = matrix @ xi``."""

    matrix: np.ndarray
    label: str = ""

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (2, 2):
            raise ValueError(f"transport matrix must be 2x2, got {m.shape}")
        if not np.array_equal(m.T, -m):
            raise ValueError("transport matrix must be skew-symmetric")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_omega(cls, omega: float, label: str = "") -> TransportFieldSpec:
        return cls(float(omega) * J, label or f"omega={omega:g}")

    @property
    def omega(self) -> float:
        return float(self.matrix[0, 1])

    def velocity(self, x, y):
        m = self.matrix
        return m[0, 0] * x + m[0, 1] * y, m[1, 0] * x + m[1, 1] * y


@dataclass(frozen=True, eq=False)
class TransportSystem:
    """Ordered, mutually commuting transport fields driven by ``N`` Brownian motions."""

    fields: tuple = ()
    commutes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        fs = tuple(self.fields)
        object.__setattr__(self, "fields", fs)
        c = np.array(
            [[np.allclose(a.matrix @ b.matrix, b.matrix @ a.matrix, atol=0) for b in fs] for a in fs],
            dtype=bool,
        ).reshape(len(fs), len(fs))
        if not c.all():
            raise ValueError("transport matrices must commute pairwise")
        c.setflags(write=False)
        object.__setattr__(self, "commutes", c)

    @classmethod
    def from_omegas(cls, omegas: Sequence[float]) -> TransportSystem:
        return cls(tuple(TransportFieldSpec.from_omega(w, f"b{i + 1}") for i, w in enumerate(omegas)))

    def __len__(self):
        return len(self.fields)

    @property
    def omegas(self) -> np.ndarray:
        return np.array([f.omega for f in self.fields])


def flow_matrix(spec: TransportFieldSpec, s: float) -> np.ndarray:
    """``exp(s L)`` in closed form: the rotation ``[[c, s], [-s, c]]`` by ``omega * s``."""
    a = spec.omega * float(s)
    c, sn = np.cos(a), np.sin(a)
    return np.array([[c, sn], [-sn, c]])


def flow_map(spec: TransportFieldSpec, s: float, xi) -> np.ndarray:
    """Image of point(s) ``xi`` (last axis of length 2) under the flow at time ``s``."""
    xi = np.asarray(xi, dtype=float)
    return xi @ flow_matrix(spec, s).T


def _bilinear(grid: GridSpec, values: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    n, h, R = grid.n, grid.h, grid.radius
    U = np.zeros((n + 2, n + 2))
    U[1:-1, 1:-1] = values
    fx = (px + R) / h - 0.5
    fy = (py + R) / h - 0.5
    # points outside the lattice read zeros from the padding
    fx = np.clip(fx, -1.0, n)
    fy = np.clip(fy, -1.0, n)
    i0 = np.floor(fx).astype(int)
    j0 = np.floor(fy).astype(int)
    tx = fx - i0
    ty = fy - j0
    i0 = np.minimum(i0, n - 1) + 1
    j0 = np.minimum(j0, n - 1) + 1
    tx = np.where(fx >= n, 1.0, tx)
    ty = np.where(fy >= n, 1.0, ty)
    return (
        (1 - tx) * (1 - ty) * U[i0, j0]
        + tx * (1 - ty) * U[i0 + 1, j0]
        + (1 - tx) * ty * U[i0, j0 + 1]
        + tx * ty * U[i0 + 1, j0 + 1]
    )


def apply_linear_map(u: ScalarField, A: np.ndarray) -> ScalarField:
    """``out(xi) = u(A xi)`` by bilinear interpolation of the zero-extended field.

    Works for any 2x2 ``A``; the group action only uses rotations.
    """
    A = np.asarray(A, dtype=float)
    grid = u.grid
    if np.array_equal(A, np.eye(2)):
        return u
    i, j = grid.index
    x, y = grid.centers[i], grid.centers[j]
    px = A[0, 0] * x + A[0, 1] * y
    py = A[1, 0] * x + A[1, 1] * y
    out = np.zeros((grid.n, grid.n))
    out[i, j] = _bilinear(grid, u.values, px, py)
    return ScalarField(grid, out)


def group_apply(u: ScalarField, spec: TransportFieldSpec, s: float) -> ScalarField:
    """``(e^{sB} u)(xi) = u(zeta(s, xi))``."""
    return apply_linear_map(u, flow_matrix(spec, s))


def composed_flow_matrix(system: TransportSystem, s: Sequence[float]) -> np.ndarray:
    s = np.asarray(s, dtype=float).reshape(-1)
    if s.size != len(system):
        raise ValueError(f"expected {len(system)} group parameters, got {s.size}")
    A = np.eye(2)
    for spec, si in zip(system.fields, s):
        if si != 0.0:
            A = A @ flow_matrix(spec, si)
    return A


def group_apply_multi(u: ScalarField, system: TransportSystem, s: Sequence[float]) -> ScalarField:
    """Apply ``e^{s_1 B_1} ... e^{s_N B_N}`` with a single interpolation."""
    return apply_linear_map(u, composed_flow_matrix(system, s))


def _edge_velocity(grid: GridSpec, matrix: np.ndarray):
    """``b_x`` at x-edge midpoints and ``b_y`` at y-edge midpoints of the gradient lattice."""
    n, h, R = grid.n, grid.h, grid.radius
    p = np.arange(n + 1)
    mid = -R + p * h  # x-edge midpoint abscissa of lattice cell p
    ctr = -R + (p - 0.5) * h  # centre of padded cell p
    X_e, Y_c = np.meshgrid(mid, ctr, indexing="ij")
    X_c, Y_e = np.meshgrid(ctr, mid, indexing="ij")
    bx = matrix[0, 0] * X_e + matrix[0, 1] * Y_c
    by = matrix[1, 0] * X_c + matrix[1, 1] * Y_e
    return bx, by


def b_operator(u: ScalarField, spec) -> ScalarField:
    """Skew-adjoint discretization of ``B u = b . grad u``.

    ``spec`` is a :class:`TransportFieldSpec` or a raw 2x2 matrix.
    """
    matrix = spec.matrix if isinstance(spec, TransportFieldSpec) else np.asarray(spec, float)
    grid = u.grid
    n = grid.n
    bx, by = _edge_velocity(grid, matrix)
    g = gradient(u)
    fx, fy = bx * g.x, by * g.y
    # b . grad u averaged from the two adjacent edges per direction
    advective = 0.5 * (
        fx[1 : n + 1, 1 : n + 1] + fx[0:n, 1 : n + 1] + fy[1 : n + 1, 1 : n + 1] + fy[1 : n + 1, 0:n]
    )
    U = np.zeros((n + 2, n + 2))
    U[1:-1, 1:-1] = u.values
    flux = VectorField2(
        grid,
        bx * 0.5 * (U[:-1, :-1] + U[1:, :-1]),
        by * 0.5 * (U[:-1, :-1] + U[:-1, 1:]),
    )
    conservative = divergence(flux).values
    return ScalarField(grid, 0.5 * (advective + conservative))


def b_squared(u: ScalarField, spec) -> ScalarField:
    return b_operator(b_operator(u, spec), spec)


def b_matrix(grid: GridSpec, spec) -> sp.csr_matrix:
    """Sparse matrix of :func:`b_operator` on interior vectors.

    The stencil is the 5-point cross, so five probes with the colouring
    ``(i + 2 j) mod 5`` recover every entry exactly.
    """
    i, j = grid.index
    colour = (i + 2 * j) % 5
    # colour of each neighbour offset relative to the centre cell
    offsets = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)]
    lookup = -np.ones((grid.n, grid.n), dtype=np.int64)
    lookup[i, j] = np.arange(i.size)
    rows, cols, vals = [], [], []
    for c in range(5):
        probe = np.zeros((grid.n, grid.n))
        probe[i[colour == c], j[colour == c]] = 1.0
        out = b_operator(ScalarField(grid, probe), spec).values
        for di, dj in offsets:
            # row cells whose neighbour at (di, dj) carries colour c
            ni, nj = i + di, j + dj
            ok = (ni >= 0) & (ni < grid.n) & (nj >= 0) & (nj < grid.n)
            ok[ok] &= lookup[ni[ok], nj[ok]] >= 0
            ok[ok] &= colour[lookup[ni[ok], nj[ok]]] == c
            rows.append(np.nonzero(ok)[0])
            cols.append(lookup[ni[ok], nj[ok]])
            vals.append(out[i[ok], j[ok]])
    rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    keep = vals != 0.0
    return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(i.size, i.size))


def check_commutation_with_laplacian(
    spec, eps: float, trials: Sequence[ScalarField], s: float = 0.7
) -> float:
    """Worst relative defect ``|J_eps e^{sB} u - e^{sB} J_eps u| / |u|`` over ``trials``.

    ``spec`` may be a raw 2x2 matrix to run negative controls with fields
    that are not rotations.
    """
    if isinstance(spec, TransportFieldSpec):
        A = flow_matrix(spec, s)
    else:
        A = scipy.linalg.expm(float(s) * np.asarray(spec, dtype=float))
    worst = 0.0
    for u in trials:
        lhs = resolvent(apply_linear_map(u, A), eps)
        rhs = apply_linear_map(resolvent(u, eps), A)
        worst = max(worst, l2_norm(lhs - rhs) / l2_norm(u))
    return worst
