import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stvflow.errors import ConvergenceError, GridMismatchError
from stvflow.grid import (
    GridSpec,
    ScalarField,
    VectorField2,
    build_grid,
    conjugate_gradient,
    divergence,
    gradient,
    inner,
    inner_vector,
    l2_norm,
    laplacian,
    resolvent,
)

from conftest import random_field


def _eigvecs(grid):
    """Dense eigen-decomposition of the masked Dirichlet Laplacian."""
    L = grid.laplacian_matrix.toarray()
    mu, V = np.linalg.eigh(-L)
    return mu, V


def test_small_grid_mask_geometry(grid8):
    m = grid8.mask
    assert m[3, 3] and m[3, 4] and m[4, 3] and m[4, 4]
    for i, j in [(0, 0), (0, 7), (7, 0), (7, 7)]:
        assert not m[i, j]


def test_mask_area_close_to_disc():
    g = build_grid(1.0, 64)
    assert abs(g.area - np.pi) / np.pi < 0.05


def test_mask_scale_invariant():
    a, b = build_grid(1.0, 64), build_grid(2.0, 64)
    assert np.array_equal(a.mask, b.mask)
    assert b.h == 2 * a.h


@pytest.mark.parametrize("radius,n", [(1.0, 6), (1.0, 9), (0.0, 16), (-1.0, 16), (1.0, 15.5)])
def test_build_grid_rejects_bad_input(radius, n):
    with pytest.raises(ValueError):
        build_grid(radius, n)


def test_mask_connected_and_nonempty(grid64):
    assert grid64.n_interior > 0
    assert grid64.is_connected()


def test_scalar_field_zero_outside_mask(grid16, rng):
    u = ScalarField(grid16, rng.standard_normal((16, 16)) + 5.0)
    assert np.all(u.values[~grid16.mask] == 0.0)
    with pytest.raises(ValueError):
        ScalarField(grid16, np.full((16, 16), np.nan))
    with pytest.raises(ValueError):
        ScalarField(grid16, np.zeros((8, 8)))


def test_gradient_of_zero(grid16):
    g = gradient(ScalarField.zeros(grid16))
    assert not g.x.any() and not g.y.any()


def test_gradient_exact_on_affine(grid32):
    a = np.array([0.7, -1.3])
    u = ScalarField.from_function(grid32, lambda x, y: a[0] * x + a[1] * y + 0.2)
    g = gradient(u)
    m = grid32.mask
    # forward differences need the +x / +y neighbour inside the mask
    full = m.copy()
    full[:-1, :] &= m[1:, :]
    full[:, :-1] &= m[:, 1:]
    full[-1, :] = full[:, -1] = False
    i, j = np.nonzero(full)
    assert np.allclose(g.x[i + 1, j + 1], a[0], atol=1e-12)
    assert np.allclose(g.y[i + 1, j + 1], a[1], atol=1e-12)


def test_gradient_matches_assembled_matrix(grid32, rng):
    u = random_field(grid32, rng)
    gx, gy = grid32.gradient_matrices
    g = gradient(u)
    w = grid32.n + 1
    assert np.allclose((gx @ u.vector).reshape(w, w), g.x, atol=1e-12)
    assert np.allclose((gy @ u.vector).reshape(w, w), g.y, atol=1e-12)


def test_divergence_of_zero(grid16):
    z = VectorField2(grid16, np.zeros((17, 17)), np.zeros((17, 17)))
    assert not divergence(z).values.any()


def test_duality_many_pairs(grid32, rng):
    for _ in range(100):
        u = random_field(grid32, rng)
        p = VectorField2(grid32, rng.standard_normal((33, 33)), rng.standard_normal((33, 33)))
        lhs = inner(divergence(p), u) + inner_vector(p, gradient(u))
        assert abs(lhs) <= 1e-12 * max(1.0, l2_norm(u))


def test_divergence_of_gradient_of_eigenvector(grid8):
    mu, V = _eigvecs(grid8)
    for k in (0, 3, len(mu) - 1):
        u = ScalarField.from_vector(grid8, V[:, k])
        d = divergence(gradient(u))
        assert np.allclose(d.vector, -mu[k] * u.vector, atol=1e-10)


def test_laplacian_symmetric_and_nsd(grid16, rng):
    u, v = random_field(grid16, rng), random_field(grid16, rng)
    assert inner(laplacian(u), v) == pytest.approx(inner(u, laplacian(v)), rel=1e-12, abs=1e-12)
    assert inner(laplacian(u), u) <= 0.0
    assert not laplacian(ScalarField.zeros(grid16)).values.any()


def test_laplacian_of_quadratic(grid32):
    u = ScalarField.from_function(grid32, lambda x, y: x**2)
    L = laplacian(u)
    c = grid32.n // 2
    assert L.values[c, c] == pytest.approx(2.0, abs=10 * grid32.h**2)


def test_resolvent_zero_and_small_eps(grid16, rng):
    assert not resolvent(ScalarField.zeros(grid16), 0.1).values.any()
    u = random_field(grid16, rng)
    v = resolvent(u, 1e-8)
    assert l2_norm(v - u) <= 1e-4 * l2_norm(u)


def test_resolvent_eigenvector(grid8):
    mu, V = _eigvecs(grid8)
    eps = 0.05
    for k in (0, 5, len(mu) - 1):
        u = ScalarField.from_vector(grid8, V[:, k])
        v = resolvent(u, eps)
        assert np.allclose(v.vector, u.vector / (1 + eps * mu[k]), atol=1e-9)


def test_resolvent_nonexpansive_and_positive_pairing(grid16, rng):
    for eps in (1e-3, 0.1, 10.0):
        u = random_field(grid16, rng)
        v = resolvent(u, eps)
        assert l2_norm(v) <= l2_norm(u) + 1e-12
        assert inner(v, u) >= 0.0


def test_resolvent_rejects_bad_eps(grid8):
    with pytest.raises(ValueError):
        resolvent(ScalarField.zeros(grid8), 0.0)


def test_cg_reports_iteration_limit():
    A = np.diag(np.linspace(1.0, 1e4, 50))
    with pytest.raises(ConvergenceError) as info:
        conjugate_gradient(lambda x: A @ x, np.ones(50), rtol=1e-14, maxiter=3)
    assert info.value.residual > 1e-14
    assert len(info.value.history) == 4


def test_inner_products(grid16, rng):
    u = random_field(grid16, rng)
    assert inner(ScalarField.zeros(grid16), u) == 0.0
    assert inner(u, u) == pytest.approx(l2_norm(u) ** 2)
    ind = np.zeros((16, 16))
    ind[6:9, 6:9] = 1.0  # 9 interior cells
    assert l2_norm(ScalarField(grid16, ind)) == pytest.approx(grid16.h * 3.0)
    with pytest.raises(GridMismatchError):
        inner(u, ScalarField.zeros(build_grid(1.0, 8)))


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    a=st.floats(-3, 3, allow_nan=False),
    b=st.floats(-3, 3, allow_nan=False),
)
def test_operators_linear(seed, a, b):
    grid = GridSpec(1.0, 16)
    rng = np.random.default_rng(seed)
    u, v = random_field(grid, rng), random_field(grid, rng)
    w = a * u + b * v
    for op in (laplacian, lambda f: divergence(gradient(f))):
        assert np.allclose(op(w).values, a * op(u).values + b * op(v).values, atol=1e-9)
    gw, gu, gv = gradient(w), gradient(u), gradient(v)
    assert np.allclose(gw.x, a * gu.x + b * gv.x, atol=1e-9)
    r = resolvent(w, 0.1)
    assert np.allclose(r.values, a * resolvent(u, 0.1).values + b * resolvent(v, 0.1).values, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_cauchy_schwarz(seed):
    grid = GridSpec(1.0, 16)
    rng = np.random.default_rng(seed)
    u, v = random_field(grid, rng), random_field(grid, rng)
    assert abs(inner(u, v)) <= l2_norm(u) * l2_norm(v) + 1e-12
