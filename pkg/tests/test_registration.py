import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segreg.core import ClassGrouping, convolve, gaussian_kernel, softmax
from segreg.gradcheck import check_gradient, random_instance
from segreg.registration import (
    ControlGrid,
    RegConfig,
    Sampler,
    build_pyramid,
    build_prob_pyramid,
    control_to_field,
    control_to_field_adjoint,
    joint_T_energy_grad,
    lattice_shape,
    level_shapes,
    register,
    tikhonov,
    upsample_knots,
    warp,
    warp_channels,
    warp_nearest,
)


def smooth(rng, shape, sigma=2.0):
    f = convolve(rng.standard_normal(shape), gaussian_kernel(sigma))
    return (f - f.min()) / (f.max() - f.min())


# -- warping ---------------------------------------------------------------------


def test_zero_warp_is_identity():
    f = np.random.default_rng(0).random((7, 9))
    out = warp(f, np.zeros((2, 7, 9)))
    np.testing.assert_array_equal(out, f)
    assert out is not f


def test_integer_shift_replicates_edge():
    f = np.random.default_rng(0).random((6, 5))
    T = np.zeros((2, 6, 5))
    T[0] = 1.0
    out = warp(f, T)
    np.testing.assert_array_equal(out[:-1], f[1:])
    np.testing.assert_array_equal(out[-1], f[-1])


def test_ramp_reproduced_exactly():
    rng = np.random.default_rng(1)
    n = 20
    y, x = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float), indexing="ij")
    a, b = 0.3, -0.7
    f = a * y + b * x
    T = 1.5 * np.stack([smooth(rng, (n, n)) - 0.5, smooth(rng, (n, n)) - 0.5])
    out = warp(f, T)
    inside = (y + T[0] >= 0) & (y + T[0] <= n - 1) & (x + T[1] >= 0) & (x + T[1] <= n - 1)
    want = a * (y + T[0]) + b * (x + T[1])
    np.testing.assert_allclose(out[inside], want[inside], atol=1e-12)


def test_trilinear_ramp():
    n = 6
    g = np.meshgrid(*[np.arange(n, dtype=float)] * 3, indexing="ij")
    f = g[0] + 2 * g[1] - g[2]
    T = np.full((3, n, n, n), 0.25)
    out = warp(f, T)
    np.testing.assert_allclose(out[:-1, :-1, :-1], (f + 0.5)[:-1, :-1, :-1], atol=1e-12)


def test_warp_nearest_keeps_labels():
    lab = np.random.default_rng(0).integers(0, 3, (8, 8))
    T = np.full((2, 8, 8), 0.4)
    out = warp_nearest(lab, T)
    assert set(np.unique(out)) <= {0, 1, 2}
    np.testing.assert_array_equal(warp_nearest(lab, np.zeros((2, 8, 8))), lab)


def test_sampler_gradient_matches_differences():
    rng = np.random.default_rng(2)
    f = smooth(rng, (16, 16), 3.0)
    T = 0.3 + np.zeros((2, 16, 16))
    s = Sampler(T)
    h = 1e-6
    for a in range(2):
        Tp = T.copy()
        Tp[a] += h
        fd = (Sampler(Tp).value(f) - s.value(f)) / h
        np.testing.assert_allclose(s.grad(f)[a][:-1, :-1], fd[:-1, :-1], atol=1e-6)


# -- control grid ------------------------------------------------------------------


def test_lattice_covers_domain():
    assert lattice_shape((25, 26), 4) == (7, 8)
    grid = ControlGrid.zeros((24, 26), 4)
    assert grid.D.shape == (2, 7, 8)
    assert not np.any(grid.field())


def test_constant_knots_give_constant_field():
    D = np.zeros((2,) + lattice_shape((13, 10), 4))
    D[0] = 2.0
    T = control_to_field(D, (13, 10), 4)
    np.testing.assert_allclose(T[0], 2.0)
    np.testing.assert_allclose(T[1], 0.0)


def test_knots_are_interpolated():
    D = np.random.default_rng(0).standard_normal((2, 4, 4))
    T = control_to_field(D, (13, 13), 4)
    np.testing.assert_allclose(T[:, ::4, ::4], D, atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.integers(5, 30), st.integers(5, 30), st.integers(1, 6), st.integers(0, 1000))
def test_adjoint_identity(n0, n1, spacing, seed):
    rng = np.random.default_rng(seed)
    shape = (n0, n1)
    D = rng.standard_normal((2,) + lattice_shape(shape, spacing))
    G = rng.standard_normal((2,) + shape)
    lhs = np.sum(control_to_field(D, shape, spacing) * G)
    rhs = np.sum(D * control_to_field_adjoint(G, shape, spacing))
    assert abs(lhs - rhs) < 1e-8 * max(1.0, abs(lhs))


def test_control_to_field_linear():
    rng = np.random.default_rng(3)
    shape = (11, 9)
    D1, D2 = (rng.standard_normal((2,) + lattice_shape(shape, 3)) for _ in range(2))
    np.testing.assert_allclose(
        control_to_field(2 * D1 - D2, shape, 3),
        2 * control_to_field(D1, shape, 3) - control_to_field(D2, shape, 3),
        atol=1e-12,
    )


def test_upsampling_rescales_constant_displacement():
    src, dst = (10, 10), (20, 20)
    D = np.ones((2,) + lattice_shape(src, 4))
    up = upsample_knots(D, src, dst, 4)
    assert up.shape == (2,) + lattice_shape(dst, 4)
    np.testing.assert_allclose(up, 2.0)


# -- pyramid -------------------------------------------------------------------------


def test_single_level_pyramid():
    f = np.random.default_rng(0).random((9, 9))
    (lvl,) = build_pyramid(f, 1, 0.7)
    np.testing.assert_array_equal(lvl, f)


def test_constant_pyramid():
    for lvl in build_pyramid(np.full((40, 30), 0.6), 5, 0.7):
        np.testing.assert_allclose(lvl, 0.6, atol=1e-13)


def test_coarsest_width():
    shapes = level_shapes((256, 256), 8, 0.7)
    assert len(shapes) == 8 and shapes[-1] == (22, 22)
    assert [s[0] for s in level_shapes((10, 10), 3, 0.7)] == [10, 7, 5]


def test_pyramid_reduced_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        shapes = level_shapes((16, 16), 8, 0.7)
    assert min(shapes[-1]) >= 4 and len(shapes) < 8
    assert "reduced" in caplog.text


def test_probability_pyramid_on_simplex():
    u = softmax(np.random.default_rng(0).standard_normal((3, 30, 30)))
    for lvl in build_prob_pyramid(u, 4, 0.7, 1e-8):
        np.testing.assert_allclose(lvl.sum(axis=0), 1.0, atol=1e-12)
        assert lvl.min() >= 1e-9


# -- energy and gradient -------------------------------------------------------------


def test_perfect_alignment_energy_is_zero():
    f = smooth(np.random.default_rng(0), (16, 16))
    D = np.zeros((2,) + lattice_shape((16, 16), 4))
    e, g = joint_T_energy_grad(D, f, f, None, None, RegConfig(xi=0, eta=0))
    assert e.total == 0.0
    assert not np.any(g)


def test_flat_atlas_has_no_gradient():
    rng = np.random.default_rng(1)
    f = smooth(rng, (16, 16))
    atlas = np.full((3, 16, 16), 1 / 3)
    u = softmax(rng.standard_normal((3, 16, 16)))
    cfg = RegConfig(zeta=0, eta=0, xi=0.5)
    D0 = np.zeros((2,) + lattice_shape((16, 16), 4))
    e0, g0 = joint_T_energy_grad(D0, f, f, atlas, u, cfg)
    e1, g1 = joint_T_energy_grad(D0 + rng.standard_normal(D0.shape), f, f, atlas, u, cfg)
    assert np.isclose(e0.e_ce, e1.e_ce, rtol=1e-12)
    assert np.max(np.abs(g0)) < 1e-12 and np.max(np.abs(g1)) < 1e-12


@pytest.mark.parametrize("h", [1e-4, 1e-5])
@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed, h):
    rng = np.random.default_rng(seed)
    f, m, a, u, D = random_instance(rng, (24, 24))
    r = check_gradient(D, f, m, a, u, RegConfig(zeta=1.0, eta=0.3, xi=0.5), h=h)
    assert r.n_checked > 0.9 * D.size
    assert r.max_rel_error < 1e-4


def test_grouped_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    f, m, a, u, D = random_instance(rng, (20, 20), n_classes=4)
    g = ClassGrouping.parse("0:0,1;1,2:2;3:3", 4, 4)
    cfg = RegConfig(zeta=0.5, eta=0.2, xi=0.7)
    _, grad = joint_T_energy_grad(D, f, m, a, u, cfg, g)
    h = 1e-5
    for i in [(0, 1, 1), (1, 2, 3), (0, 4, 0), (1, 3, 3)]:
        Dp, Dm = D.copy(), D.copy()
        Dp[i] += h
        Dm[i] -= h
        fd = (joint_T_energy_grad(Dp, f, m, a, u, cfg, g)[0].total
              - joint_T_energy_grad(Dm, f, m, a, u, cfg, g)[0].total) / (2 * h)
        assert abs(grad[i] - fd) <= 1e-4 * max(abs(fd), 1e-6)


def test_tikhonov_gradient():
    rng = np.random.default_rng(0)
    D = rng.standard_normal((2, 5, 6))
    e, g = tikhonov(D, 4)
    h = 1e-6
    for i in [(0, 0, 0), (1, 2, 3), (0, 4, 5)]:
        Dp = D.copy()
        Dp[i] += h
        assert abs((tikhonov(Dp, 4)[0] - e) / h - g[i]) < 1e-4
    assert tikhonov(np.ones((2, 5, 6)), 4)[0] == 0.0


def test_nan_names_the_term():
    f = np.zeros((12, 12))
    m = f.copy()
    m[3, 3] = np.nan
    D = np.zeros((2,) + lattice_shape((12, 12), 4))
    with pytest.raises(FloatingPointError, match="fidelity"):
        joint_T_energy_grad(D, f, m, None, None, RegConfig(xi=0))


def test_breakdown_total_is_sum():
    rng = np.random.default_rng(4)
    f, m, a, u, D = random_instance(rng, (16, 16))
    e, _ = joint_T_energy_grad(D, f, m, a, u, RegConfig(eta=0.1, xi=0.2))
    assert abs(e.total - (e.e_seg + e.e_ce + e.e_reg_fidelity + e.e_reg_tikhonov)) < 1e-9


# -- coarse-to-fine solve ----------------------------------------------------------------


def test_self_registration_stays_put():
    f = smooth(np.random.default_rng(0), (40, 40), 3.0)
    rr = register(f, f, cfg=RegConfig(xi=0))
    assert np.max(np.abs(rr.T)) < 0.1


def test_zero_images_give_zero_field():
    z = np.zeros((24, 24))
    rr = register(z, z, cfg=RegConfig(xi=0))
    assert not np.any(rr.T)


def _blobs(n=64):
    y, x = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return (np.exp(-((y - 30) ** 2 + (x - 34) ** 2) / (2 * 8.0**2))
            + 0.5 * np.exp(-((y - 20) ** 2 + (x - 20) ** 2) / (2 * 5.0**2)))


def test_known_shift_recovered():
    mov = _blobs()
    T = np.zeros((2, 64, 64))
    T[0] = 3.0
    fix = warp(mov, T)
    rr = register(fix, mov, cfg=RegConfig(xi=0, eta=0.05))
    inner = (slice(12, -12),) * 2
    assert abs(rr.T[0][inner].mean() - 3.0) < 0.3
    assert abs(rr.T[1][inner].mean()) < 0.3


def test_register_trace_has_one_row_per_level():
    f = smooth(np.random.default_rng(0), (32, 32), 3.0)
    calls = []
    rr = register(f, np.roll(f, 1, axis=0), cfg=RegConfig(xi=0, levels=3),
                  level_callback=lambda j, D, s: calls.append(j))
    assert [r["level"] for r in rr.trace] == [2, 1, 0] == calls


def test_atlas_term_in_register():
    rng = np.random.default_rng(3)
    f = smooth(rng, (32, 32), 3.0)
    atlas = softmax(np.stack([3 * smooth(rng, (32, 32)) for _ in range(3)]))
    u = warp_channels(atlas, np.full((2, 32, 32), 1.0))
    rr = register(f, f, atlas, u, RegConfig(zeta=0.0, xi=1.0, eta=0.01))
    e0, _ = joint_T_energy_grad(np.zeros_like(rr.grid.D), f, f, atlas, u, RegConfig(zeta=0, xi=1.0, eta=0.01))
    assert rr.energy.total < e0.total
