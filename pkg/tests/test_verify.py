import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stvflow.errors import GridMismatchError
from stvflow.grid import GridSpec, ScalarField, build_grid, l2_norm
from stvflow.noise import sample_path, zero_path
from stvflow.regularization import tv_phi
from stvflow.solver import SolverConfig, solve
from stvflow.transport import TransportSystem, group_apply_multi
from stvflow.verify import (
    RHO_CONTINUUM,
    build_test_process,
    clopper_pearson,
    contraction_check,
    estimate_rho,
    extinction_study,
    norm_occupation_curve,
    rayleigh_quotient,
    realized_drift,
    vi_battery,
    vi_slack,
    vi_tolerance,
)

from conftest import gaussian

ROT = TransportSystem.from_omegas([1.0])


def _disc(grid, r, sub=8):
    """Cell-averaged disc indicator by subsampling."""
    x, y = grid.coords
    off = ((np.arange(sub) + 0.5) / sub - 0.5) * grid.h
    acc = sum((np.hypot(x + a, y + b) < r).astype(float) for a in off for b in off)
    return ScalarField(grid, acc / sub**2)


def _cone(grid):
    return ScalarField.from_function(grid, lambda x, y: np.maximum(0.0, 1.0 - np.hypot(x, y) / 0.9))


@pytest.fixture(scope="module")
def short_run():
    grid = build_grid(1.0, 32)
    path = sample_path(21, 1, 0.05, 1e-3)
    cfg = SolverConfig(0.1, 1e-3, 0.05, grid, ROT)
    x0 = gaussian(grid, cx=0.3, width=0.08)
    return grid, path, cfg, x0, solve(x0, path, cfg)


def test_test_process_without_drift_or_noise(grid16):
    K = 10
    path = zero_path(1, K * 1e-2, 1e-2)
    z0 = gaussian(grid16)
    pair = build_test_process(np.zeros((K + 1, 16, 16)), z0, path, ROT)
    assert np.array_equal(pair.Z, np.broadcast_to(z0.values, pair.Z.shape))


def test_test_process_pure_transport(grid32):
    path = sample_path(3, 1, 0.05, 1e-2)
    z0 = gaussian(grid32, cx=0.3, width=0.05)
    pair = build_test_process(np.zeros((6, 32, 32)), z0, path, ROT)
    for k in range(6):
        assert np.allclose(pair.Z[k], group_apply_multi(z0, ROT, path.at(k)).values, atol=1e-15)


def test_test_process_constant_drift(grid16):
    path = zero_path(1, 0.1, 1e-2)
    g = gaussian(grid16, width=0.3)
    z0 = gaussian(grid16, cx=0.2)
    pair = build_test_process([g] * 11, z0, path, ROT)
    for k, t in enumerate(pair.times):
        assert np.allclose(pair.Z[k], z0.values - t * g.values, atol=1e-14)


def test_test_process_validation(grid16, grid32):
    with pytest.raises(GridMismatchError):
        build_test_process(np.zeros((3, 16, 16)), ScalarField.zeros(grid32), zero_path(1, 0.02, 0.01), ROT)
    with pytest.raises(ValueError):
        build_test_process(np.zeros((5, 16, 16)), ScalarField.zeros(grid16), zero_path(1, 0.02, 0.01), ROT)


def test_slack_zero_pair_deterministic(grid32):
    x0 = _cone(grid32)
    path = zero_path(1, 0.05, 1e-3)
    cfg = SolverConfig(0.1, 1e-3, 0.05, grid32, ROT)
    traj = solve(x0, path, cfg)
    pair = build_test_process(np.zeros((51, 32, 32)), ScalarField.zeros(grid32), path, ROT)
    slack = vi_slack(traj, pair)
    # brute-force evaluation of both sides with Z = 0
    h2 = grid32.h**2
    tv = np.array([tv_phi(traj.state(k)) for k in range(len(traj))])
    tv_int = np.concatenate([[0.0], np.cumsum(0.5 * cfg.dt * (tv[1:] + tv[:-1]))])
    brute = 0.5 * l2_norm(x0) ** 2 - (0.5 * h2 * np.sum(traj.values**2, axis=(1, 2)) + tv_int)
    assert np.allclose(slack, brute, atol=1e-12)
    assert slack.min() >= -vi_tolerance(x0)


def test_slack_self_and_scaled(short_run):
    grid, path, cfg, x0, traj = short_run
    G = realized_drift(traj)
    tol = vi_tolerance(x0)
    assert vi_slack(traj, build_test_process(G, x0, path, ROT)).min() >= -tol
    assert vi_slack(traj, build_test_process(2 * G, x0, path, ROT)).min() >= -tol


def test_battery_passes(short_run):
    grid, path, cfg, x0, traj = short_run
    pairs = vi_battery(traj, path, ROT)
    assert [p.label for p in pairs] == ["zero", "constant", "transported", "self", "random"]
    tol = vi_tolerance(x0)
    for pair in pairs:
        for mode in ("limit", "regularized"):
            assert vi_slack(traj, pair, mode).min() >= -tol, (pair.label, mode)


def test_battery_is_fixed(short_run):
    grid, path, cfg, x0, traj = short_run
    a, b = vi_battery(traj, path, ROT), vi_battery(traj, path, ROT)
    assert all(np.array_equal(p.Z, q.Z) for p, q in zip(a, b))


def test_slack_validation(short_run, grid16):
    grid, path, cfg, x0, traj = short_run
    pair = build_test_process(np.zeros((11, 32, 32)), x0, path, ROT)
    with pytest.raises(ValueError):
        vi_slack(traj, pair)
    with pytest.raises(ValueError):
        vi_slack(traj, vi_battery(traj, path, ROT)[0], mode="other")
    other = build_test_process(np.zeros((51, 16, 16)), ScalarField.zeros(grid16), path, ROT)
    with pytest.raises(GridMismatchError):
        vi_slack(traj, other)


def test_disc_quotient_close_to_isoperimetric(grid64):
    q = rayleigh_quotient(_disc(grid64, 0.6))
    assert abs(q - RHO_CONTINUUM) / RHO_CONTINUUM <= 0.10


def test_quotient_scale_invariant(grid32, rng):
    y = ScalarField(grid32, rng.uniform(0, 1, (32, 32)))
    assert rayleigh_quotient(2 * y) == pytest.approx(rayleigh_quotient(y), rel=1e-13)
    with pytest.raises(ValueError):
        rayleigh_quotient(ScalarField.zeros(grid32))


def test_estimate_rho_small_grid():
    grid = build_grid(1.0, 32)
    rho = estimate_rho(grid, n_random=2, maxiter=30)
    assert rho <= rayleigh_quotient(_disc(grid, 0.6))
    assert 0.8 * RHO_CONTINUUM < rho < 1.2 * RHO_CONTINUUM


def test_estimate_rho_refinement():
    a, b = estimate_rho(build_grid(1.0, 64)), estimate_rho(build_grid(1.0, 128))
    assert abs(a - b) / b < 0.05


def test_clopper_pearson():
    lo, hi = clopper_pearson(np.array([0, 50, 100]), 100)
    assert lo[0] == 0.0 and hi[2] == 1.0
    assert lo[1] < 0.5 < hi[1]
    assert hi[0] == pytest.approx(1 - 0.025 ** (1 / 100))
    assert lo[2] == pytest.approx(0.025 ** (1 / 100))


def test_extinction_of_zero_datum(grid16):
    cfg = SolverConfig(0.1, 1e-2, 0.1, grid16, ROT)
    rep = extinction_study(ScalarField.zeros(grid16), cfg, seeds=range(5), rho=3.5)
    assert np.all(rep.tau == 0.0) and rep.n_censored == 0


def test_extinction_deterministic_path(grid16):
    cfg = SolverConfig(0.1, 1e-2, 1.0, grid16, TransportSystem(()))
    rep = extinction_study(_cone(grid16), cfg, seeds=[0], rho=3.5)
    assert rep.n_censored == 0 and 0 < rep.tau[0] < 1.0
    fine = extinction_study(_cone(grid16), cfg.with_(dt=5e-3), seeds=[0], rho=3.5)
    assert abs(fine.tau[0] - rep.tau[0]) <= 0.1 * fine.tau[0]


def test_extinction_report_structure(grid16):
    cfg = SolverConfig(0.1, 1e-2, 1.0, grid16, ROT)
    rep = extinction_study(_cone(grid16), cfg, seeds=range(10), rho=3.5)
    assert np.all(np.diff(rep.survival) <= 0)
    assert np.all(rep.band_lower <= rep.survival) and np.all(rep.survival <= rep.band_upper)
    assert rep.t_min == pytest.approx(rep.t_grid[np.argmax(rep.bound < 1)])
    curve, ok = rep.norm_occupation(0.05)
    assert curve[0] == pytest.approx(rep.x_norm)
    # the invariant-frame shortcut matches full solves
    full = extinction_study(_cone(grid16), cfg.with_(frame="conjugate"), seeds=range(3), rho=3.5)
    assert full.norms.shape == (3, len(rep.times))


def test_norm_occupation_curve_exact_occupation():
    times = np.array([0.0, 1.0, 2.0, 3.0])
    norms = np.array([[1.0, 0.5, 0.0, 0.0], [1.0, 0.8, 0.4, 0.0]])
    tau = np.array([2.0, 3.0])
    curve = norm_occupation_curve(times, norms, tau, rho=2.0)
    assert np.allclose(curve, [1.0, 0.65 + 2.0, 0.2 + 4.0, 0.0 + 5.0])


def test_contraction_identical_and_zero(grid16):
    path = sample_path(1, 1, 0.02, 1e-3)
    cfg = SolverConfig(0.1, 1e-3, 0.02, grid16, ROT)
    x = _cone(grid16)
    rep = contraction_check(x, x, path, cfg)
    assert rep.sup_gap == 0.0 and rep.passed
    rep0 = contraction_check(x, ScalarField.zeros(grid16), path, cfg)
    assert rep0.passed and rep0.norm_excess <= 1e-12 and rep0.min_value >= 0.0


@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_contraction_property(seed):
    grid = GridSpec(1.0, 16)
    rng = np.random.default_rng(seed)
    x = ScalarField(grid, rng.uniform(0, 1, (16, 16)))
    xs = ScalarField(grid, rng.uniform(0, 1, (16, 16)))
    cfg = SolverConfig(0.1, 1e-3, 0.01, grid, ROT)
    rep = contraction_check(x, xs, sample_path(seed % 1000, 1, 0.01, 1e-3), cfg)
    assert rep.passed
