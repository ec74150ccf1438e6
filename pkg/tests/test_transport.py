import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stvflow.grid import GridSpec, ScalarField, build_grid, gradient, inner, l2_norm
from stvflow.transport import (
    J,
    TransportFieldSpec,
    TransportSystem,
    b_operator,
    b_squared,
    check_commutation_with_laplacian,
    flow_map,
    group_apply,
    group_apply_multi,
)

from conftest import gaussian, random_field

ROT = TransportFieldSpec.from_omega(1.0)


def _max_grad(u):
    return float(np.max(gradient(u).magnitude()))


def _radial(grid, width=0.05):
    # narrow enough to vanish at the rim, whose staircase is not rotation invariant
    return ScalarField.from_function(grid, lambda x, y: np.exp(-(x**2 + y**2) / width))


def test_spec_validation():
    with pytest.raises(ValueError):
        TransportFieldSpec(np.array([[1.0, 0.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        TransportFieldSpec(np.eye(3))
    spec = TransportFieldSpec.from_omega(2.5)
    assert spec.omega == 2.5
    theta = np.linspace(0, 2 * np.pi, 50)
    xi = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    bx, by = spec.velocity(xi[:, 0], xi[:, 1])
    assert np.allclose(bx * xi[:, 0] + by * xi[:, 1], 0.0, atol=1e-14)


def test_system_commutes():
    sys = TransportSystem.from_omegas([1.0, -0.5, 2.0])
    assert sys.commutes.all() and len(sys) == 3
    assert np.allclose(sys.omegas, [1.0, -0.5, 2.0])


def test_flow_map_values(rng):
    assert np.allclose(flow_map(ROT, 0.0, [0.3, -0.2]), [0.3, -0.2])
    assert np.allclose(flow_map(ROT, np.pi / 2, [1.0, 0.0]), [0.0, -1.0], atol=1e-15)
    xi = rng.normal(size=(100, 2))
    for s in rng.uniform(-10, 10, 10):
        out = flow_map(ROT, s, xi)
        assert np.allclose(np.linalg.norm(out, axis=1), np.linalg.norm(xi, axis=1), rtol=1e-14)


def test_flow_map_solves_ode():
    xi = np.array([0.4, 0.1])
    s, ds = 0.3, 1e-6
    deriv = (flow_map(ROT, s + ds, xi) - flow_map(ROT, s - ds, xi)) / (2 * ds)
    assert np.allclose(deriv, ROT.matrix @ flow_map(ROT, s, xi), atol=1e-8)


def test_group_radial_invariance(grid64):
    u = _radial(grid64)
    for s in (0.3, 1.1, -2.0):
        v = group_apply(u, ROT, s)
        assert np.max(np.abs(v.values - u.values)) <= 2 * grid64.h * _max_grad(u)


def test_group_preserves_sign(grid32, rng):
    u = ScalarField(grid32, rng.uniform(0, 1, (32, 32)))
    for s in rng.uniform(-5, 5, 20):
        assert group_apply(u, ROT, s).min() >= 0.0


def test_group_inverse(grid64):
    u = gaussian(grid64, cx=0.3, width=0.05)
    for s in (0.2, 0.9):
        back = group_apply(group_apply(u, ROT, s), ROT, -s)
        assert np.max(np.abs(back.values - u.values)) <= 4 * grid64.h * _max_grad(u)


def test_group_law(grid64):
    u = gaussian(grid64, cx=0.3, width=0.05)
    a = group_apply(u, ROT, 0.7)
    b = group_apply(group_apply(u, ROT, 0.3), ROT, 0.4)
    assert np.max(np.abs(a.values - b.values)) <= 4 * grid64.h * _max_grad(u)


def test_group_norm_deviation_shrinks():
    devs = []
    for n in (32, 64, 128):
        g = build_grid(1.0, n)
        u = gaussian(g, cx=0.3, width=0.05)
        devs.append(abs(l2_norm(group_apply(u, ROT, 0.5)) / l2_norm(u) - 1))
    assert devs[0] > devs[1] > devs[2]
    assert devs[1] < 0.05


def test_positive_part_compatibility(grid64):
    u = ScalarField.from_function(grid64, lambda x, y: np.sin(4 * x) * np.cos(3 * y))
    up = u.positive_part()
    a, b = group_apply(u, ROT, 0.6), group_apply(up, ROT, 0.6)
    assert np.max(np.abs(a.values * b.values - b.values**2)) <= 4 * grid64.h * _max_grad(u)


def test_multi_identities(grid32):
    u = gaussian(grid32, cx=0.3, width=0.05)
    sys = TransportSystem.from_omegas([1.0, -1.0])
    assert group_apply_multi(u, sys, [0.0, 0.0]) is u
    assert np.array_equal(group_apply_multi(u, sys, [0.8, 0.8]).values, u.values)
    with pytest.raises(ValueError):
        group_apply_multi(u, sys, [0.1])


def test_multi_matches_chained(grid64):
    u = gaussian(grid64, cx=0.3, width=0.05)
    sys = TransportSystem.from_omegas([1.0, 0.5])
    one = group_apply_multi(u, sys, [0.4, -0.3])
    chained = group_apply(group_apply(u, sys.fields[1], -0.3), sys.fields[0], 0.4)
    assert np.max(np.abs(one.values - chained.values)) <= 4 * grid64.h * _max_grad(u)
    swapped = TransportSystem((sys.fields[1], sys.fields[0]))
    assert np.allclose(group_apply_multi(u, swapped, [-0.3, 0.4]).values, one.values, atol=1e-12)


def test_b_operator_skew(grid32, rng):
    for _ in range(20):
        u, v = random_field(grid32, rng), random_field(grid32, rng)
        scale = l2_norm(u) * l2_norm(v)
        assert abs(inner(b_operator(u, ROT), v) + inner(u, b_operator(v, ROT))) <= 1e-12 * scale
        assert abs(inner(b_operator(u, ROT), u)) <= 1e-12 * scale


def test_b_squared_identity(grid32, rng):
    assert not b_squared(ScalarField.zeros(grid32), ROT).values.any()
    u = random_field(grid32, rng)
    Bu = b_operator(u, ROT)
    assert inner(u, b_squared(u, ROT)) == pytest.approx(-l2_norm(Bu) ** 2, rel=1e-12)


def test_b_operator_on_radial_is_small():
    norms = []
    for n in (32, 64):
        g = build_grid(1.0, n)
        u = _radial(g)
        norms.append((l2_norm(b_operator(u, ROT)), l2_norm(b_squared(u, ROT))))
        assert norms[-1][0] <= g.h
        assert norms[-1][1] <= g.h
    assert norms[1][0] < norms[0][0] and norms[1][1] < norms[0][1]


def test_b_operator_is_group_generator(grid64):
    u = gaussian(grid64, cx=0.3, width=0.08)
    ds = 1e-3
    fd = (group_apply(u, ROT, ds).values - group_apply(u, ROT, -ds).values) / (2 * ds)
    Bu = b_operator(u, ROT).values
    assert grid64.h * np.linalg.norm(fd - Bu) <= 2 * grid64.h * l2_norm(b_operator(u, ROT)) / 0.1


def test_commutation_radial(grid64):
    assert check_commutation_with_laplacian(ROT, 0.05, [_radial(grid64)]) <= 2 * grid64.h


def test_commutation_refinement_and_negative_control():
    res, bad = [], []
    shear = np.array([[0.0, 1.0], [0.0, 0.0]])
    for n in (64, 128):
        g = build_grid(1.0, n)
        u = gaussian(g, cx=0.25, cy=-0.1, width=0.03)
        res.append(check_commutation_with_laplacian(ROT, 0.01, [u]))
        bad.append(check_commutation_with_laplacian(shear, 0.01, [u]))
    assert 1.5 <= res[0] / res[1] <= 8.0
    assert bad[1] > 0.5 * bad[0]
    assert bad[1] > 10 * res[1]


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), s=st.floats(-20, 20, allow_nan=False))
def test_group_sign_property(seed, s):
    grid = GridSpec(1.0, 16)
    u = ScalarField(grid, np.random.default_rng(seed).uniform(0, 1, (16, 16)))
    assert group_apply(u, ROT, s).min() >= 0.0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), omega=st.floats(-5, 5, allow_nan=False))
def test_b_skew_property(seed, omega):
    grid = GridSpec(1.0, 16)
    rng = np.random.default_rng(seed)
    u, v = random_field(grid, rng), random_field(grid, rng)
    spec = TransportFieldSpec.from_omega(omega)
    assert abs(inner(b_operator(u, spec), v) + inner(u, b_operator(v, spec))) <= 1e-11 * (1 + abs(omega))
