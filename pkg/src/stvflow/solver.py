"""Time integration of the regularized total-variation flow with transport noise.

Two formulations are provided.

``rescaled``
    Integrates the random PDE for ``Y = e^{-sum beta_i B_i} X``, which has no
    stochastic integral, then recovers ``X`` pathwise with
    :func:`transform_to_x`.  This is the reference integrator.
``ito``
    Integrates the Ito equation for ``X`` directly: implicit regularized TV
    drift, explicit correction ``0.5 * sum B_i^2 X dt`` and explicit noise
    ``sum B_i X dbeta_i``.

The implicit drift ``u - dt * div psi_tilde(grad u) = w`` is solved by
globalized semismooth Newton and finished with one lagged-diffusivity solve
``(I + dt G^T diag(m) G) u = w``.  That last system has positive mobility
``m``, so it is a symmetric M-matrix; it is factorized directly, which keeps
the step positivity preserving to rounding.

For rotation fields the rescaled drift can be evaluated in two frames.
``frame="conjugate"`` follows the splitting literally: rotate ``Y`` by
``beta(t)``, take the implicit step, rotate back.  ``frame="invariant"`` uses
the rotation invariance of the isotropic TV drift, under which the
conjugation is the identity, and skips both interpolations.  The conjugate
frame pays one pair of bilinear interpolations per step, whose smoothing
accumulates over the run; see :func:`step_rescaled`.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, GridMismatchError
from .grid import GridSpec, ScalarField
from .noise import BrownianPath
from .regularization import check_lambda, mobility, moreau_j
from .transport import TransportSystem, b_matrix, b_operator, b_squared, group_apply_multi

__all__ = [
    "SolverConfig",
    "Trajectory",
    "LambdaSweep",
    "implicit_tv_step",
    "step_rescaled",
    "solve_rescaled",
    "transform_to_x",
    "solve_ito",
    "solve",
    "lambda_sweep",
    "sup_l2_gap",
    "compute_diagnostics",
    "write_snapshots",
]

SCHEMES = ("rescaled", "ito")
FRAMES = ("invariant", "conjugate")
CORRECTIONS = ("explicit", "implicit")
DIAGNOSTIC_COLUMNS = ("t", "l2_norm", "phi_lambda", "dissipation", "min_value", "energy_residual")


@dataclass(frozen=True)
class SolverConfig:
    """Parameters of one pathwise solve.

    Parameters
    ----------
    lam : float
        Regularization parameter in ``(0, 1]``.
    dt, T : float
        Time step and horizon; ``T / dt`` must be an integer.
    grid : GridSpec
    transport : TransportSystem
    scheme : {"rescaled", "ito"}
    inner_tol : float
        Relative residual target of the implicit step; at most ``1e-8``.
    inner_max : int
        Newton iteration cap of the implicit step.
    frame : {"invariant", "conjugate"}
        Evaluation frame of the rescaled drift.
    ito_correction : {"explicit", "implicit"}
        Time treatment of the ``0.5 * sum B_i^2 X`` term in the Ito scheme.
    """

    lam: float
    dt: float
    T: float
    grid: GridSpec
    transport: TransportSystem
    scheme: str = "rescaled"
    inner_tol: float = 1e-10
    inner_max: int = 200
    frame: str = "invariant"
    ito_correction: str = "explicit"

    def __post_init__(self):
        check_lambda(self.lam)
        if not (self.dt > 0 and self.T > 0):
            raise ValueError("dt and T must be positive")
        if self.dt > self.T:
            raise ValueError(f"dt={self.dt!r} exceeds T={self.T!r}")
        if abs(round(self.T / self.dt) * self.dt - self.T) > 1e-9 * self.T:
            raise ValueError(f"T/dt must be integral, got T={self.T!r}, dt={self.dt!r}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.frame not in FRAMES:
            raise ValueError(f"frame must be one of {FRAMES}, got {self.frame!r}")
        if self.ito_correction not in CORRECTIONS:
            raise ValueError(f"ito_correction must be one of {CORRECTIONS}, got {self.ito_correction!r}")
        if not 0 < self.inner_tol <= 1e-8:
            raise ValueError("inner_tol must lie in (0, 1e-8]")
        if int(self.inner_max) < 1:
            raise ValueError("inner_max must be at least 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def with_(self, **changes) -> SolverConfig:
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States ``values[k]`` at ``times[k] = k dt`` with per-step diagnostics.

    ``kind`` is ``"Y"`` for rescaled states and ``"X"`` for the original
    unknown.  ``diagnostics`` maps each name of :data:`DIAGNOSTIC_COLUMNS`
    to an array aligned with ``times``; ``dissipation`` is the running
    integral of ``<psi_tilde(grad X), grad X>``.
    """

    grid: GridSpec
    lam: float
    times: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    kind: str = "X"
    diagnostics: dict = field(default=None, repr=False)
    inner_iterations: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or v.shape[1:] != (self.grid.n, self.grid.n):
            raise ValueError("values must have shape (steps + 1, n, n)")
        t = np.asarray(self.times, dtype=float)
        if t.shape != (v.shape[0],):
            raise ValueError("times and values disagree in length")
        if t.size > 1 and not np.allclose(np.diff(t), t[1] - t[0], rtol=1e-9, atol=0):
            raise ValueError("times must be uniform")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "times", t)
        if self.diagnostics is None:
            object.__setattr__(self, "diagnostics", compute_diagnostics(self.grid, t, v, self.lam))

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    def __len__(self):
        return self.values.shape[0]

    def state(self, k: int) -> ScalarField:
        return ScalarField(self.grid, self.values[k])

    @property
    def states(self) -> list:
        return [self.state(k) for k in range(len(self))]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.diagnostics[name]

    def to_csv(self, target) -> None:
        """Write the diagnostics table; floats use ``repr`` so output is exact."""
        with Path(target).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(DIAGNOSTIC_COLUMNS)
            cols = [self.diagnostics[c] for c in DIAGNOSTIC_COLUMNS]
            for row in zip(*cols):
                w.writerow([repr(float(x)) for x in row])


def _grad_stack(grid: GridSpec, values: np.ndarray):
    """Forward-difference gradients of a stack ``(..., n, n)`` of fields."""
    n, h = grid.n, grid.h
    U = np.zeros(values.shape[:-2] + (n + 2, n + 2))
    U[..., 1:-1, 1:-1] = values
    gx = (U[..., 1:, :-1] - U[..., :-1, :-1]) / h
    gy = (U[..., :-1, 1:] - U[..., :-1, :-1]) / h
    return gx, gy


def compute_diagnostics(grid: GridSpec, times: np.ndarray, values: np.ndarray, lam: float) -> dict:
    """Norm, energy and dissipation series of a stack of states.

    The dissipation integral uses the right-endpoint rule, which is the
    quadrature under which a backward Euler step satisfies the energy
    balance up to ``-0.5 |X_{k+1} - X_k|^2``.
    """
    h2 = grid.h**2
    values = np.asarray(values, dtype=float)
    gx, gy = _grad_stack(grid, values)
    r = np.hypot(gx, gy)
    norm2 = h2 * np.sum(values**2, axis=(-2, -1))
    phi = h2 * np.sum(moreau_j(np.stack([gx, gy], axis=-1), lam), axis=(-2, -1))
    rate = h2 * np.sum(mobility(r, lam) * r**2, axis=(-2, -1))
    dt = np.diff(times)
    integral = np.concatenate([[0.0], np.cumsum(dt * rate[1:])])
    mins = values[:, grid.mask].min(axis=1)
    return {
        "t": np.asarray(times, dtype=float),
        "l2_norm": np.sqrt(norm2),
        "phi_lambda": phi,
        "dissipation": integral,
        "dissipation_rate": rate,
        "min_value": mins,
        "energy_residual": 0.5 * norm2 - 0.5 * norm2[0] + integral,
    }


class _ImplicitOperator:
    """Cached sparse pieces of ``u - dt * div psi_tilde(grad u)`` on one grid.

    Matrices of the form ``I + dt * G^T D G`` with a 2x2 block ``D`` per
    gradient cell share one sparsity pattern.  It is built once together
    with a sparse map ``P`` from the stacked coefficients ``(dxx, dyy, dxy)``
    to the CSC data array, so assembly is a single mat-vec.
    """

    _cache: dict = {}

    def __init__(self, grid: GridSpec):
        gx, gy = grid.gradient_matrices
        self.gx, self.gy = gx.tocsr(), gy.tocsr()
        self.gxT, self.gyT = gx.T.tocsr(), gy.T.tocsr()
        M = grid.n_interior
        L = gx.shape[0]
        rows, cols, coef, src = [], [], [], []
        blocks = [(gx, gx, 0), (gy, gy, 1), (gx, gy, 2), (gy, gx, 2)]
        for A, B, slot in blocks:
            A, B = A.tocoo(), B.tocoo()
            # entries of A^T diag(d) B: pair nonzeros of A and B sharing a row
            order_a = np.argsort(A.row, kind="stable")
            order_b = np.argsort(B.row, kind="stable")
            ra, ca, va = A.row[order_a], A.col[order_a], A.data[order_a]
            rb, cb, vb = B.row[order_b], B.col[order_b], B.data[order_b]
            starts_b = np.searchsorted(rb, np.arange(L + 1))
            for k in range(2):  # every gradient row has at most two nonzeros
                idx = starts_b[ra] + k
                ok = idx < starts_b[ra + 1]
                rows.append(ca[ok])
                cols.append(cb[idx[ok]])
                coef.append(va[ok] * vb[idx[ok]])
                src.append(slot * L + ra[ok])
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        coef, src = np.concatenate(coef), np.concatenate(src)
        diag = np.arange(M)
        keys = np.concatenate([cols * M + rows, diag * M + diag])
        uniq = np.unique(keys)
        self.indices = (uniq % M).astype(np.int32)
        self.indptr = np.searchsorted(uniq // M, np.arange(M + 1)).astype(np.int32)
        pos = np.searchsorted(uniq, cols * M + rows)
        self.P = sp.csr_matrix((coef, (pos, src)), shape=(uniq.size, 3 * L))
        self.eye_data = np.zeros(uniq.size)
        self.eye_data[np.searchsorted(uniq, diag * M + diag)] = 1.0
        self.M = M

    @classmethod
    def for_grid(cls, grid: GridSpec) -> _ImplicitOperator:
        op = cls._cache.get(grid)
        if op is None:
            op = cls._cache[grid] = cls(grid)
        return op

    def grad(self, u):
        return self.gx @ u, self.gy @ u

    def _assemble(self, dxx, dyy, dxy, dt):
        data = self.eye_data + dt * (self.P @ np.concatenate([dxx, dyy, dxy]))
        return sp.csc_matrix((data, self.indices, self.indptr), shape=(self.M, self.M))

    def lagged_matrix(self, gx, gy, lam, dt):
        m = mobility(np.hypot(gx, gy), lam)
        return self._assemble(m, m, np.zeros_like(m), dt)

    def newton_matrix(self, gx, gy, lam, dt):
        r = np.hypot(gx, gy)
        outer = r > lam
        rs = np.where(outer, r, 1.0)
        nx, ny = gx / rs, gy / rs
        base = np.where(outer, 1.0 / rs, 1.0 / lam) + lam
        cut = np.where(outer, 1.0 / rs, 0.0)
        return self._assemble(base - cut * nx**2, base - cut * ny**2, -cut * nx * ny, dt)

    @staticmethod
    def factorize(A):
        return spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})

    def residual(self, u, w, lam, dt):
        gx, gy = self.grad(u)
        m = mobility(np.hypot(gx, gy), lam)
        return u - w + dt * (self.gxT @ (m * gx) + self.gyT @ (m * gy))

    def energy(self, u, w, lam, dt):
        gx, gy = self.grad(u)
        j = moreau_j(np.stack([gx, gy], axis=-1), lam) + 0.5 * lam * (gx**2 + gy**2)
        return 0.5 * np.sum((u - w) ** 2) + dt * np.sum(j)


class _ShiftedOperator:
    """:class:`_ImplicitOperator` plus a fixed linear term ``Q u``."""

    def __init__(self, base: _ImplicitOperator, Q):
        self.base, self.Q = base, Q
        self.grad, self.factorize = base.grad, base.factorize

    def lagged_matrix(self, gx, gy, lam, dt):
        return (self.base.lagged_matrix(gx, gy, lam, dt) + self.Q).tocsc()

    def newton_matrix(self, gx, gy, lam, dt):
        return (self.base.newton_matrix(gx, gy, lam, dt) + self.Q).tocsc()

    def residual(self, u, w, lam, dt):
        return self.base.residual(u, w, lam, dt) + self.Q @ u

    def energy(self, u, w, lam, dt):
        return self.base.energy(u, w, lam, dt) + 0.5 * u @ (self.Q @ u)


def implicit_tv_step(
    w: ScalarField, lam: float, dt: float, tol: float = 1e-10, max_iter: int = 200, extra=None
):
    """Solve ``u - dt * div psi_tilde(grad u) = w``.

    The equation is the optimality condition of a strongly convex energy, so
    it is solved by semismooth Newton with Armijo backtracking on that
    energy.  The Newton matrix is not an M-matrix, so the converged iterate
    is finished with one lagged-diffusivity solve ``(I + dt G^T diag(m) G) u
    = w`` with the mobility frozen at the Newton solution.  That last system
    is an M-matrix, hence ``w >= 0`` gives ``u >= 0``.

    Returns
    -------
    u : ScalarField
    iterations : int
        Number of Newton steps taken.

    Raises
    ------
    ConvergenceError
        If the relative residual is still above ``tol`` after ``max_iter``
        Newton steps; the exception carries the residual history.
    """
    grid = w.grid
    op = _ImplicitOperator.for_grid(grid)
    if extra is not None:
        op = _ShiftedOperator(op, sp.csc_matrix(extra))
    rhs = w.vector
    scale = np.linalg.norm(rhs)
    if scale == 0.0:
        return ScalarField.zeros(grid), 0
    u = rhs.copy()
    res = op.residual(u, rhs, lam, dt)
    history = [np.linalg.norm(res) / scale]
    e = op.energy(u, rhs, lam, dt)
    it = 0
    # aim below tol so the final lagged solve still lands inside it
    while history[-1] > 0.01 * tol and it < max_iter:
        gx, gy = op.grad(u)
        step = op.factorize(op.newton_matrix(gx, gy, lam, dt)).solve(-res)
        slope = res @ step
        rnorm = np.linalg.norm(res)
        a = 1.0
        while True:
            trial = u + a * step
            e_trial = op.energy(trial, rhs, lam, dt)
            res_trial = op.residual(trial, rhs, lam, dt)
            # near the solution energy differences drown in rounding, so a
            # decrease of the residual norm is accepted as well
            in_rounding = abs(a * slope) <= 1e-13 * abs(e)
            if (
                e_trial <= e + 1e-4 * a * slope
                or (in_rounding and np.linalg.norm(res_trial) <= (1.0 - 1e-4 * a) * rnorm)
                or a < 1e-10
            ):
                break
            a *= 0.5
        u, e, res = trial, e_trial, res_trial
        history.append(np.linalg.norm(res) / scale)
        it += 1
        if len(history) > 3 and history[-1] >= history[-2] >= history[-3] and history[-1] <= tol:
            break  # stagnated at rounding level
    gx, gy = op.grad(u)
    u = op.factorize(op.lagged_matrix(gx, gy, lam, dt)).solve(rhs)
    final = np.linalg.norm(op.residual(u, rhs, lam, dt)) / scale
    history.append(final)
    if final > tol:
        raise ConvergenceError("implicit TV step did not converge", final, history)
    return ScalarField.from_vector(grid, u), it


def _check_path(path: BrownianPath, cfg: SolverConfig):
    if path.N != len(cfg.transport):
        raise ValueError(f"path has {path.N} Brownian motions, transport has {len(cfg.transport)} fields")
    if abs(path.dt - cfg.dt) > 1e-12 * cfg.dt or path.n_steps < cfg.n_steps:
        raise ValueError(
            f"path grid (dt={path.dt!r}, T={path.T!r}) does not cover solver grid (dt={cfg.dt!r}, T={cfg.T!r})"
        )


def step_rescaled(Y: ScalarField, t: float, dt: float, path: BrownianPath, cfg: SolverConfig):
    """One implicit step of the rescaled equation from time ``t``.

    ``beta`` is frozen at ``t``.  In the conjugate frame the step is
    ``W = e^{beta B} Y``, implicit TV step on ``W``, then ``e^{-beta B}``.  In
    the invariant frame the two rotations cancel against the rotation
    invariance of the drift and are omitted.

    Returns ``(Y_next, inner_iterations)``.
    """
    if Y.grid != cfg.grid:
        raise GridMismatchError("state and solver config use different grids")
    if cfg.frame == "invariant" or len(cfg.transport) == 0:
        return implicit_tv_step(Y, cfg.lam, dt, cfg.inner_tol, cfg.inner_max)
    k = int(round(t / path.dt))
    beta = path.at(k)
    W = group_apply_multi(Y, cfg.transport, beta)
    W_next, iters = implicit_tv_step(W, cfg.lam, dt, cfg.inner_tol, cfg.inner_max)
    return group_apply_multi(W_next, cfg.transport, -beta), iters


def solve_rescaled(x0: ScalarField, path: BrownianPath, cfg: SolverConfig) -> Trajectory:
    """Integrate ``Y`` from ``Y(0) = x0`` over ``[0, T]``."""
    if x0.grid != cfg.grid:
        raise GridMismatchError("initial datum and solver config use different grids")
    _check_path(path, cfg)
    K = cfg.n_steps
    values = np.empty((K + 1, cfg.grid.n, cfg.grid.n))
    iters = np.zeros(K, dtype=int)
    values[0] = x0.values
    Y = x0
    for k in range(K):
        Y, iters[k] = step_rescaled(Y, k * cfg.dt, cfg.dt, path, cfg)
        values[k + 1] = Y.values
    times = np.arange(K + 1) * cfg.dt
    return Trajectory(cfg.grid, cfg.lam, times, values, "Y", inner_iterations=iters)


def transform_to_x(trajY: Trajectory, path: BrownianPath, transport: TransportSystem) -> Trajectory:
    """``X(t_k) = e^{sum beta_i(t_k) B_i} Y(t_k)``, diagnostics recomputed on ``X``."""
    if trajY.kind != "Y":
        raise ValueError("transform_to_x expects a rescaled (kind 'Y') trajectory")
    K = len(trajY) - 1
    if K > 0 and (abs(path.dt - trajY.dt) > 1e-12 * path.dt or path.n_steps < K):
        raise ValueError("path time grid does not match the trajectory")
    if path.N != len(transport):
        raise ValueError("path and transport system differ in the number of fields")
    values = np.empty_like(trajY.values)
    for k in range(K + 1):
        values[k] = group_apply_multi(trajY.state(k), transport, path.at(k)).values
    return Trajectory(trajY.grid, trajY.lam, trajY.times, values, "X", inner_iterations=trajY.inner_iterations)


def _cfl_number(cfg: SolverConfig) -> float:
    reach = cfg.grid.radius / cfg.grid.h
    return float(cfg.dt * np.sum((cfg.transport.omegas * reach) ** 2))


def solve_ito(x0: ScalarField, path: BrownianPath, cfg: SolverConfig) -> Trajectory:
    """Integrate the Ito equation for ``X`` with implicit drift and explicit noise.

    With ``cfg.ito_correction == "explicit"`` the correction ``0.5 * B_i^2 X``
    is an explicit Euler term.  For skew ``B`` that is mean-square unstable
    on modes with ``dt * mu^2`` large, ``mu`` an eigenvalue of ``B``, and the
    grid operator has spectral radius about ``omega_i R / h``; a
    :class:`RuntimeWarning` is issued when ``dt * sum (omega_i R / h)^2 > 4``.
    ``"implicit"`` moves the term into the implicit solve, which is
    mean-square stable for every ``dt``.

    On the zero path (``beta = 0``, see :func:`stvflow.noise.zero_path`) the
    noise and its correction term are both dropped, so the scheme reduces
    to the deterministic implicit TV flow, as the rescaled scheme does.
    """
    if x0.grid != cfg.grid:
        raise GridMismatchError("initial datum and solver config use different grids")
    _check_path(path, cfg)
    transport = () if path.is_zero else cfg.transport.fields
    implicit = cfg.ito_correction == "implicit"
    cfl = _cfl_number(cfg) if transport and not implicit else 0.0
    if cfl > 4.0:
        warnings.warn(f"explicit transport terms may be unstable (dt*sum(omega R/h)^2 = {cfl:.3g} > 4)", RuntimeWarning)
    Q = None
    if transport and implicit:
        mats = [b_matrix(cfg.grid, spec) for spec in transport]
        Q = 0.5 * cfg.dt * sum(Bm.T @ Bm for Bm in mats)
    K = cfg.n_steps
    values = np.empty((K + 1, cfg.grid.n, cfg.grid.n))
    iters = np.zeros(K, dtype=int)
    values[0] = x0.values
    X = x0
    dbeta = path.increments
    for k in range(K):
        rhs = X.values.copy()
        for i, spec in enumerate(transport):
            rhs += dbeta[i, k] * b_operator(X, spec).values
            if not implicit:
                rhs += 0.5 * cfg.dt * b_squared(X, spec).values
        X, iters[k] = implicit_tv_step(
            ScalarField(cfg.grid, rhs), cfg.lam, cfg.dt, cfg.inner_tol, cfg.inner_max, extra=Q
        )
        values[k + 1] = X.values
    times = np.arange(K + 1) * cfg.dt
    return Trajectory(cfg.grid, cfg.lam, times, values, "X", inner_iterations=iters)


def solve(x0: ScalarField, path: BrownianPath, cfg: SolverConfig) -> Trajectory:
    """``X`` trajectory by the configured scheme."""
    if cfg.scheme == "ito":
        return solve_ito(x0, path, cfg)
    return transform_to_x(solve_rescaled(x0, path, cfg), path, cfg.transport)


def sup_l2_gap(a: Trajectory, b: Trajectory) -> float:
    """``max_k |a(t_k) - b(t_k)|_2`` over the common time grid."""
    if a.grid != b.grid:
        raise GridMismatchError("trajectories use different grids")
    if len(a) != len(b) or not np.allclose(a.times, b.times):
        raise ValueError("trajectories use different time grids")
    d = a.values - b.values
    return float(a.grid.h * np.sqrt(np.max(np.sum(d**2, axis=(1, 2)))))


@dataclass(frozen=True, eq=False)
class LambdaSweep:
    """Trajectories for a decreasing list of ``lam`` and their pairwise gaps.

    ``exponent`` and ``constant`` fit ``gap^2 = constant * (lam_i + lam_j)^exponent``
    by least squares in log-log over all pairs ``i < j``.
    """

    lams: tuple
    trajectories: dict = field(repr=False)
    gaps: np.ndarray = field(repr=False)
    exponent: float = float("nan")
    constant: float = float("nan")

    def gap(self, a: float, b: float) -> float:
        return float(self.gaps[self.lams.index(a), self.lams.index(b)])


def lambda_sweep(x0: ScalarField, path: BrownianPath, cfg: SolverConfig, lams: Sequence[float]) -> LambdaSweep:
    """Solve on one path for each ``lam`` in a strictly decreasing list."""
    lams = tuple(check_lambda(v) for v in lams)
    if any(b >= a for a, b in zip(lams, lams[1:])):
        raise ValueError("lambda list must be strictly decreasing")
    trajs = {lam: solve(x0, path, cfg.with_(lam=lam)) for lam in lams}
    m = len(lams)
    gaps = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            gaps[i, j] = gaps[j, i] = sup_l2_gap(trajs[lams[i]], trajs[lams[j]])
    exponent = constant = float("nan")
    pairs = [(i, j) for i in range(m) for j in range(i + 1, m) if gaps[i, j] > 0]
    if len(pairs) >= 2:
        s = np.log([lams[i] + lams[j] for i, j in pairs])
        g = np.log([gaps[i, j] ** 2 for i, j in pairs])
        exponent, logc = np.polyfit(s, g, 1)
        constant = float(np.exp(logc))
    return LambdaSweep(lams, trajs, gaps, float(exponent), constant)


def write_snapshots(traj: Trajectory, directory, stride: int = 1, fmt: str = "csv") -> list:
    """Write every ``stride``-th state as a CSV grid or flat little-endian float64.

    Returns the written paths in time order.
    """
    if stride < 1:
        raise ValueError("stride must be positive")
    if fmt not in ("csv", "raw"):
        raise ValueError("fmt must be 'csv' or 'raw'")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for k in range(0, len(traj), stride):
        if fmt == "raw":
            p = directory / f"state_{k:06d}.f64"
            p.write_bytes(traj.values[k].astype("<f8").tobytes())
        else:
            p = directory / f"state_{k:06d}.csv"
            with p.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\r\n")
                for row in traj.values[k]:
                    w.writerow([repr(float(x)) for x in row])
        written.append(p)
    return written
