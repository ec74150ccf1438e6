"""Checks of the variational inequality, extinction law and L2 contraction.

Everything here is post-processing of trajectories, except
:func:`extinction_study` and :func:`contraction_check`, which drive the
solver themselves.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage, optimize, stats

from .errors import GridMismatchError
from .grid import GridSpec, ScalarField, l2_norm
from .noise import BrownianPath, sample_path, zero_path
from .regularization import check_lambda, div_psi_tilde, moreau_j, tv_phi
from .solver import SolverConfig, Trajectory, _grad_stack, solve, solve_rescaled, sup_l2_gap
from .transport import TransportSystem, group_apply_multi

__all__ = [
    "TestProcessPair",
    "build_test_process",
    "vi_slack",
    "vi_tolerance",
    "vi_battery",
    "realized_drift",
    "ExtinctionReport",
    "extinction_study",
    "clopper_pearson",
    "estimate_rho",
    "rayleigh_quotient",
    "ContractionReport",
    "contraction_check",
    "contraction_report",
    "norm_occupation_curve",
]

RHO_CONTINUUM = 2.0 * np.sqrt(np.pi)


def _trapz_cumulative(values: np.ndarray, dt: float) -> np.ndarray:
    """Cumulative trapezoid rule along axis 0, starting at 0."""
    out = np.zeros_like(values, dtype=float)
    if len(values) > 1:
        out[1:] = np.cumsum(0.5 * dt * (values[1:] + values[:-1]), axis=0)
    return out


# -- variational inequality ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class TestProcessPair:
    """A drift ``G`` and the solution ``Z`` of the linear noise equation it drives.

    ``G`` and ``Z`` are stacks of shape ``(K + 1, n, n)`` on ``times``.
    """

    __test__ = False  # not a pytest class

    grid: GridSpec
    times: np.ndarray = field(repr=False)
    G: np.ndarray = field(repr=False)
    Z0: ScalarField = field(repr=False)
    Z: np.ndarray = field(repr=False)
    label: str = ""


def build_test_process(G, Z0: ScalarField, path: BrownianPath, system: TransportSystem, label: str = "") -> TestProcessPair:
    """``Z(t) = e^{beta(t) B} [Z0 - int_0^t e^{-beta(s) B} G(s) ds]`` on the path grid.

    ``G`` is an array ``(K + 1, n, n)`` or a sequence of fields; the integral
    uses the trapezoid rule with one group application per node.
    """
    grid = Z0.grid
    G = np.stack([g.values if isinstance(g, ScalarField) else np.asarray(g, float) for g in G])
    K = G.shape[0] - 1
    if G.shape[1:] != (grid.n, grid.n):
        raise GridMismatchError("G and Z0 live on different grids")
    if path.n_steps < K:
        raise ValueError(f"G has {K + 1} time nodes, path only {path.n_steps + 1}")
    pulled = np.stack(
        [group_apply_multi(ScalarField(grid, G[k]), system, -path.at(k)).values for k in range(K + 1)]
    )
    integral = _trapz_cumulative(pulled, path.dt)
    Z = np.stack(
        [
            group_apply_multi(ScalarField(grid, Z0.values - integral[k]), system, path.at(k)).values
            for k in range(K + 1)
        ]
    )
    times = np.arange(K + 1) * path.dt
    return TestProcessPair(grid, times, G, Z0, Z, label)


def _phi_series(grid: GridSpec, values: np.ndarray, mode: str, lam: float | None) -> np.ndarray:
    gx, gy = _grad_stack(grid, values)
    h2 = grid.h**2
    if mode == "limit":
        return h2 * np.sum(np.hypot(gx, gy), axis=(-2, -1))
    lam = check_lambda(lam)
    j = moreau_j(np.stack([gx, gy], axis=-1), lam) + 0.5 * lam * (gx**2 + gy**2)
    return h2 * np.sum(j, axis=(-2, -1))


def vi_slack(trajX: Trajectory, pair: TestProcessPair, mode: str = "limit") -> np.ndarray:
    """``RHS - LHS`` of the variational inequality at every time node.

    ``mode="limit"`` uses the total variation, the functional of the limit
    problem.  ``mode="regularized"`` uses ``phi_lambda + lam/2 |grad u|^2``,
    for which the discrete inequality holds up to time discretization.
    Time integrals use the trapezoid rule.
    """
    if mode not in ("limit", "regularized"):
        raise ValueError("mode must be 'limit' or 'regularized'")
    if trajX.grid != pair.grid:
        raise GridMismatchError("trajectory and test process use different grids")
    if len(trajX) != len(pair.times) or not np.allclose(trajX.times, pair.times):
        raise ValueError("trajectory and test process use different time grids")
    grid = trajX.grid
    h2 = grid.h**2
    X, Z, G = trajX.values, pair.Z, pair.G
    dt = trajX.dt
    phiX = _phi_series(grid, X, mode, trajX.lam)
    phiZ = _phi_series(grid, Z, mode, trajX.lam)
    cross = h2 * np.sum(G * (X - Z), axis=(-2, -1))
    lhs = 0.5 * h2 * np.sum((X - Z) ** 2, axis=(-2, -1)) + _trapz_cumulative(phiX, dt)
    rhs = 0.5 * h2 * np.sum((X[0] - pair.Z0.values) ** 2) + _trapz_cumulative(phiZ, dt) + _trapz_cumulative(cross, dt)
    return rhs - lhs


def vi_tolerance(x0: ScalarField, scale: float = 0.02) -> float:
    """``scale * (1 + |x|^2)``."""
    return scale * (1.0 + l2_norm(x0) ** 2)


def realized_drift(trajX: Trajectory) -> np.ndarray:
    """``G(t_k) = -div psi_tilde(grad X(t_k))``; with ``Z0 = x`` this makes ``Z`` track ``X``."""
    return np.stack([-div_psi_tilde(trajX.state(k), trajX.lam).values for k in range(len(trajX))])


def _smooth_random(grid: GridSpec, rng: np.random.Generator, sigma_cells: float = 4.0) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((grid.n, grid.n)), sigma_cells)
    return f / np.max(np.abs(f))


def vi_battery(trajX: Trajectory, path: BrownianPath, system: TransportSystem) -> list:
    """The fixed five-pair test battery for :func:`vi_slack`.

    zero
        ``G = 0``, ``Z0 = 0``.
    constant
        Time-constant ``G`` (a broad bump), ``Z0 = 0``.
    transported
        ``G = 0`` and an off-centre bump ``Z0``, so ``Z`` is that bump
        carried by the flow.
    self
        ``Z0 = x`` and ``G`` the realized drift of the trajectory.
    random
        Smooth random fields from a fixed seed, modulated by ``cos beta_1(t)``
        and ``sin t`` so that ``G(t)`` depends on the path only up to ``t``.
    """
    grid = trajX.grid
    K = len(trajX) - 1
    xi1, xi2 = grid.coords
    zero = np.zeros((K + 1, grid.n, grid.n))
    bump = np.exp(-(xi1**2 + xi2**2) / 0.3)
    off = ScalarField(grid, np.exp(-((xi1 + 0.35) ** 2 + (xi2 - 0.2) ** 2) / 0.05))
    rng = np.random.default_rng(20240601)
    f1, f2 = _smooth_random(grid, rng), _smooth_random(grid, rng)
    z0r = ScalarField(grid, 0.5 * np.abs(_smooth_random(grid, rng)))
    t = trajX.times
    c1 = np.cos(path.values[0, : K + 1]) if path.N else np.ones(K + 1)
    G_rand = c1[:, None, None] * f1 + np.sin(t)[:, None, None] * f2
    x0 = trajX.state(0)
    return [
        build_test_process(zero, ScalarField.zeros(grid), path, system, "zero"),
        build_test_process(np.broadcast_to(0.5 * bump, zero.shape), ScalarField.zeros(grid), path, system, "constant"),
        build_test_process(zero, off, path, system, "transported"),
        build_test_process(realized_drift(trajX), x0, path, system, "self"),
        build_test_process(G_rand, z0r, path, system, "random"),
    ]


# -- Sobolev constant ---------------------------------------------------------


def rayleigh_quotient(y: ScalarField) -> float:
    """``tv_phi(y) / |y|_2``; scale invariant."""
    n = l2_norm(y)
    if n == 0.0:
        raise ValueError("quotient undefined for the zero field")
    return tv_phi(y) / n


def _minimize_quotient(grid: GridSpec, y0: np.ndarray, maxiter: int) -> np.ndarray:
    """Bound-constrained quasi-Newton on the smoothed quotient, with smoothing continuation."""
    gx, gy = grid.gradient_matrices
    h2 = grid.h**2
    v = np.maximum(grid.to_vector(y0), 0.0)
    for delta in (1e-1, 1e-2, 1e-3):

        def f(v, delta=delta):
            a, b = gx @ v, gy @ v
            r = np.sqrt(a * a + b * b + delta**2)
            tv = h2 * (np.sum(r) - delta * r.size)
            nrm = np.sqrt(h2 * (v @ v))
            if nrm == 0.0:
                return 1e30, np.zeros_like(v)  # reject the zero field in the line search
            dtv = h2 * (gx.T @ (a / r) + gy.T @ (b / r))
            return tv / nrm, (dtv * nrm - tv * h2 * v / nrm) / nrm**2

        v = optimize.minimize(
            f, v, jac=True, method="L-BFGS-B", bounds=[(0.0, None)] * v.size, options={"maxiter": maxiter}
        ).x
    return grid.from_vector(v)


def _aa_disc(grid: GridSpec, r: float, cx: float = 0.0, cy: float = 0.0, sub: int = 8) -> np.ndarray:
    """Disc indicator averaged over ``sub x sub`` subcells of each cell."""
    xi1, xi2 = grid.coords
    off = ((np.arange(sub) + 0.5) / sub - 0.5) * grid.h
    acc = np.zeros_like(xi1)
    for a in off:
        for b in off:
            acc += np.hypot(xi1 + a - cx, xi2 + b - cy) < r
    return acc / sub**2


@functools.lru_cache(maxsize=16)
def estimate_rho(grid: GridSpec, n_random: int = 12, maxiter: int = 100, seed: int = 0) -> float:
    """Smallest discrete quotient ``tv(y) / |y|_2`` found over ``y >= 0``.

    Starts are cell-averaged disc indicators of several radii and centres,
    squares, and ``n_random`` smoothed random fields.  Each is improved by
    L-BFGS-B under the bound ``y >= 0`` on a smoothed quotient, and the exact
    quotient of every start and end point is compared.  The result is an
    upper estimate of the best discrete constant.
    """
    xi1, xi2 = grid.coords
    R = grid.radius
    starts = [_aa_disc(grid, r * R) for r in (0.3, 0.45, 0.6, 0.75, 0.9)]
    for cx, cy, r in ((0.3, 0.0, 0.5), (0.0, -0.4, 0.4), (-0.2, 0.2, 0.6)):
        starts.append(_aa_disc(grid, r * R, cx * R, cy * R))
    for a in (0.3, 0.5, 0.65):
        starts.append(((np.abs(xi1) < a * R) & (np.abs(xi2) < a * R)).astype(float))
    rng = np.random.default_rng(seed)
    for _ in range(n_random):
        starts.append(np.abs(_smooth_random(grid, rng, sigma_cells=3.0)))
    best = np.inf
    for y in starts:
        if not np.any(y[grid.mask]):
            continue
        best = min(best, rayleigh_quotient(ScalarField(grid, y)))
        end = _minimize_quotient(grid, y, maxiter)
        if np.any(end[grid.mask]):
            best = min(best, rayleigh_quotient(ScalarField(grid, end)))
    if not np.isfinite(best):
        raise ValueError("grid too small to estimate the Sobolev constant")
    return float(best)


# -- extinction ---------------------------------------------------------------


def clopper_pearson(k: np.ndarray, n: int, level: float = 0.95):
    """Exact two-sided binomial confidence interval for ``k`` successes out of ``n``."""
    k = np.asarray(k)
    a = (1.0 - level) / 2.0
    lo = np.where(k > 0, stats.beta.ppf(a, k, n - k + 1), 0.0)
    hi = np.where(k < n, stats.beta.ppf(1 - a, k + 1, n - k), 1.0)
    return lo, hi


@dataclass(frozen=True, eq=False)
class ExtinctionReport:
    """Extinction times per seed and the survival curve against the tail bound.

    ``tau`` is ``inf`` for samples still alive at ``T`` (also flagged in
    ``censored``).  ``norms[s, k]`` is ``|X(t_k)|_2`` of sample ``s``.
    """

    seeds: tuple
    tau: np.ndarray = field(repr=False)
    censored: np.ndarray = field(repr=False)
    rho: float = 0.0
    x_norm: float = 0.0
    T: float = 0.0
    t_grid: np.ndarray = field(default=None, repr=False)
    survival: np.ndarray = field(default=None, repr=False)
    band_lower: np.ndarray = field(default=None, repr=False)
    band_upper: np.ndarray = field(default=None, repr=False)
    bound: np.ndarray = field(default=None, repr=False)
    times: np.ndarray = field(default=None, repr=False)
    norms: np.ndarray = field(default=None, repr=False)
    rho_continuum: float = RHO_CONTINUUM

    @property
    def n_censored(self) -> int:
        return int(self.censored.sum())

    @property
    def t_min(self) -> float:
        """First grid time at which the bound drops below 1."""
        below = np.nonzero(self.bound < 1.0)[0]
        return float(self.t_grid[below[0]]) if below.size else float("inf")

    @property
    def dominated(self) -> bool:
        """Survival lies under the bound within the 95% band wherever the bound is below 1."""
        sel = self.bound < 1.0
        return bool(np.all(self.band_lower[sel] <= self.bound[sel]))

    def norm_occupation(self, tol: float = 0.05):
        """``mean |X(t)| + rho * int_0^t P[|X(s)| > 0] ds`` and whether it stays below ``(1 + tol) |x|``."""
        curve = norm_occupation_curve(self.times, self.norms, self.tau, self.rho)
        return curve, bool(np.all(curve <= (1.0 + tol) * self.x_norm))


def norm_occupation_curve(times: np.ndarray, norms: np.ndarray, tau: np.ndarray, rho: float) -> np.ndarray:
    """Mean norm plus ``rho`` times the integrated empirical survival.

    ``int_0^t P[tau > s] ds = E[min(tau, t)]`` is evaluated exactly.
    """
    mean_norm = norms.mean(axis=0)
    occupation = np.minimum(tau[:, None], times[None, :]).mean(axis=0)
    return mean_norm + rho * occupation


def _extinction_time(times: np.ndarray, norms: np.ndarray, threshold: float) -> float:
    hit = np.nonzero(norms <= threshold)[0]
    return float(times[hit[0]]) if hit.size else float("inf")


def _norm_series(args):
    Yvalues, grid, system, seed, T, dt = args
    path = sample_path(seed, len(system), T, dt) if len(system) else zero_path(0, T, dt)
    out = np.empty(Yvalues.shape[0])
    for k in range(Yvalues.shape[0]):
        out[k] = l2_norm(group_apply_multi(ScalarField(grid, Yvalues[k]), system, path.at(k)))
    return out


def _norm_series_full(args):
    x0, cfg, seed = args
    path = sample_path(seed, len(cfg.transport), cfg.T, cfg.dt) if len(cfg.transport) else zero_path(0, cfg.T, cfg.dt)
    return solve(x0, path, cfg)["l2_norm"]


def extinction_study(
    x0: ScalarField,
    cfg: SolverConfig,
    seeds: Sequence[int],
    t_grid: np.ndarray | None = None,
    rho: float | None = None,
    threshold: float = 1e-8,
    map_fn: Callable = map,
) -> ExtinctionReport:
    """Sample extinction times over ``seeds`` and compare with ``min(1, |x| / (rho t))``.

    A sample is extinct at the first step with ``|X|_2 <= threshold * |x|_2``.
    With ``cfg.frame == "invariant"`` the rescaled trajectory does not
    depend on the path, so it is computed once and each seed only applies
    its rotations.  ``map_fn`` may be an executor's ``map`` for parallel runs.
    """
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    grid = cfg.grid
    x_norm = l2_norm(x0)
    rho = estimate_rho(grid) if rho is None else float(rho)
    K = cfg.n_steps
    times = np.arange(K + 1) * cfg.dt
    if t_grid is None:
        t_grid = np.linspace(0.0, cfg.T, 101)
    t_grid = np.asarray(t_grid, dtype=float)
    if x_norm == 0.0:
        norms = np.zeros((len(seeds), K + 1))
    elif cfg.frame == "invariant" and cfg.scheme == "rescaled":
        Y = solve_rescaled(x0, zero_path(len(cfg.transport), cfg.T, cfg.dt), cfg)
        jobs = [(Y.values, grid, cfg.transport, s, cfg.T, cfg.dt) for s in seeds]
        norms = np.stack(list(map_fn(_norm_series, jobs)))
    else:
        norms = np.stack(list(map_fn(_norm_series_full, [(x0, cfg, s) for s in seeds])))
    tau = np.array([_extinction_time(times, row, threshold * x_norm) for row in norms])
    censored = ~np.isfinite(tau)
    alive = (tau[:, None] > t_grid[None, :]).sum(axis=0)
    survival = alive / len(seeds)
    lo, hi = clopper_pearson(alive, len(seeds))
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = np.minimum(1.0, x_norm / (rho * t_grid))
    bound[np.isnan(bound)] = 0.0  # zero datum at t = 0
    return ExtinctionReport(
        seeds, tau, censored, rho, x_norm, cfg.T, t_grid, survival, lo, hi, bound, times, norms
    )


# -- contraction ----------------------------------------------------------------


@dataclass(frozen=True)
class ContractionReport:
    """Gap between two solutions on one path against the initial gap.

    ``norm_excess`` is ``max_k |X(t_k)| - |x|`` over both solutions, the
    norm-monotonicity margin; ``min_value`` the smallest cell value seen.
    """

    initial_gap: float
    sup_gap: float
    tol: float
    norm_excess: float
    min_value: float

    @property
    def ratio(self) -> float:
        return self.sup_gap / self.initial_gap if self.initial_gap > 0 else 0.0

    @property
    def passed(self) -> bool:
        return self.sup_gap <= self.initial_gap * (1.0 + self.tol)


def contraction_report(a: Trajectory, b: Trajectory, tol: float = 0.02) -> ContractionReport:
    """Contraction, norm and sign margins of two trajectories on one path."""
    excess = max(
        float(np.max(a["l2_norm"]) - a["l2_norm"][0]),
        float(np.max(b["l2_norm"]) - b["l2_norm"][0]),
    )
    return ContractionReport(
        l2_norm(a.state(0) - b.state(0)),
        sup_l2_gap(a, b),
        tol,
        excess,
        float(min(a["min_value"].min(), b["min_value"].min())),
    )


def contraction_check(x: ScalarField, xs: ScalarField, path: BrownianPath, cfg: SolverConfig, tol: float = 0.02):
    """Evolve ``x`` and ``xs`` on the same path and compare their gap with the initial one."""
    a = solve(x, path, cfg)
    b = a if xs is x else solve(xs, path, cfg)
    return contraction_report(a, b, tol)
