import math
from dataclasses import replace

import numpy as np
import pytest

from segreg import joint as joint_mod
from segreg.core import ClassGrouping, FieldError, argmax_label, one_hot, softmax
from segreg.joint import (
    DivergenceError,
    GroupingError,
    JointConfig,
    align_to_atlas,
    atlas_from_labels,
    grouped_cross_entropy,
    joint_solve,
    run_ablation,
)
from segreg.phantom import PhantomSpec, make_pair
from segreg.registration import RegConfig
from segreg.segmentation import SegConfig, kmeans_init, lgmm_solve, update_mixture_params


def small_cfg(**kw):
    base = dict(seg=SegConfig(n_classes=3, sigma=6.0), reg=RegConfig(levels=3), max_iter=4)
    base.update(kw)
    return JointConfig(**base)


@pytest.fixture(scope="module")
def shapes():
    p = make_pair(PhantomSpec.shapes())
    atlas = atlas_from_labels(p.gt_moving, 3)
    return p, atlas, joint_solve(p.fixed, p.moving, atlas, JointConfig())


# -- grouped cross entropy ----------------------------------------------------------


def test_identity_grouping_is_plain_cross_entropy():
    rng = np.random.default_rng(0)
    u = softmax(rng.standard_normal((3, 10, 10)))
    S = softmax(rng.standard_normal((3, 10, 10)))
    val, prior = grouped_cross_entropy(u, S, ClassGrouping.identity(3), 0.7)
    Sf = np.maximum(S, 1e-8)
    plain = -0.7 * np.sum(u * np.log(Sf / Sf.sum(axis=0)))
    assert abs(val - plain) < 1e-12 * max(1.0, abs(plain))
    np.testing.assert_allclose(prior, Sf / Sf.sum(axis=0))


def test_perfect_agreement_is_nearly_zero():
    lab = np.random.default_rng(1).integers(0, 4, (8, 8))
    floor = 1e-8
    val, _ = grouped_cross_entropy(one_hot(lab, 4), one_hot(lab, 4), ClassGrouping.identity(4), 2.0, floor)
    want = 2.0 * 64 * math.log(1 + 3 * floor)
    assert val == pytest.approx(want, rel=1e-9)
    assert val == pytest.approx(2.0 * 64 * 3 * floor, rel=1e-6)


def test_grouped_matches_double_sum():
    rng = np.random.default_rng(2)
    u = softmax(rng.standard_normal((3, 8, 8)))
    S = softmax(rng.standard_normal((4, 8, 8)))
    g = ClassGrouping.parse("1:0,1,2;0,2:3", 3, 4)
    val, prior = grouped_cross_entropy(u, S, g, 0.4, 1e-8)
    want = 0.0
    for y in range(8):
        for x in range(8):
            z = sum(max(S[l, y, x], 1e-8) for l in range(4))
            for seg, atl in g.pairs:
                p = sum(u[k, y, x] for k in seg)
                q = sum(max(S[l, y, x], 1e-8) for l in atl) / z
                want -= 0.4 * p * math.log(q)
                for k in seg:
                    assert prior[k, y, x] == pytest.approx(q, rel=1e-12)
    assert abs(val - want) < 1e-10


def test_group_without_atlas_mass():
    S = np.zeros((3, 4, 4))
    S[0] = 1.0
    with pytest.raises(GroupingError, match="zero mass"):
        grouped_cross_entropy(np.full((2, 4, 4), 0.5), S, ClassGrouping.parse("0:0;1:1,2", 2, 3), 1.0)


def test_grouping_channel_mismatch():
    with pytest.raises(GroupingError):
        grouped_cross_entropy(np.full((2, 4, 4), 0.5), np.full((3, 4, 4), 1 / 3), ClassGrouping.identity(3), 1.0)


def test_align_to_atlas_permutes_channels():
    lab = np.repeat(np.arange(3), 8).reshape(4, 6)
    u = one_hot(lab, 3)
    np.testing.assert_array_equal(align_to_atlas(u[[2, 0, 1]], u), u)


# -- solver --------------------------------------------------------------------------


def clean_pair(shape=(48, 48)):
    return make_pair(PhantomSpec(shape=shape, deform_amplitude=0, bias_amplitude=0, noise_std=0, n_breaks=0))


def test_self_registration():
    p = clean_pair()
    atlas = atlas_from_labels(p.gt_moving, 3)
    res = joint_solve(p.fixed, p.moving, atlas, small_cfg())
    np.testing.assert_array_equal(res.labels, argmax_label(atlas))
    assert np.max(np.abs(res.T)) < 0.1


def test_seg_only_equals_standalone_solve():
    p = clean_pair()
    atlas = atlas_from_labels(p.gt_moving, 3)
    cfg = small_cfg(max_iter=1)
    res = run_ablation(p.fixed, p.moving, atlas, cfg, "seg_only")
    seg = replace(cfg.seg, zeta=0.0)
    u0 = align_to_atlas(kmeans_init(p.fixed, 3, cfg.seed), atlas)
    beta = np.ones_like(p.fixed)
    params0, _ = update_mixture_params(p.fixed, u0, beta, None, replace(seg, update_bias=False))
    ref = lgmm_solve(p.fixed, u0, beta, seg, params0=params0)
    np.testing.assert_array_equal(res.u, ref.u)
    np.testing.assert_array_equal(res.beta, ref.beta)
    assert not np.any(res.T)


def test_uncoupled_joint_reproduces_segmentation():
    p = make_pair(PhantomSpec(shape=(40, 40)))
    atlas = atlas_from_labels(p.gt_moving, 3)
    cfg = small_cfg(seg=SegConfig(n_classes=3, sigma=6.0, zeta=0.0),
                    reg=RegConfig(levels=3, zeta=0.0, xi=0.0), max_iter=1)
    a = joint_solve(p.fixed, p.moving, atlas, cfg)
    b = run_ablation(p.fixed, p.moving, atlas, cfg, "seg_only")
    np.testing.assert_array_equal(a.u, b.u)
    assert not np.any(a.T)
    two = joint_solve(p.fixed, p.moving, atlas, replace(cfg, max_iter=2))
    assert not np.any(two.T)


def test_reg_only_on_identical_images():
    p = clean_pair()
    atlas = atlas_from_labels(p.gt_moving, 3)
    res = run_ablation(p.fixed, p.fixed, atlas, small_cfg(), "reg_only")
    np.testing.assert_array_equal(res.labels, argmax_label(atlas))
    assert res.mode == "reg_only" and res.params is None


def test_outer_energy_descends_after_first_iteration(shapes):
    _, _, res = shapes
    tot = np.array([e.total for e in res.trace])
    assert len(tot) >= 3
    assert np.all(np.diff(tot[1:]) <= 1e-6 * np.abs(tot[1:-1]))
    assert res.status in ("converged", "max_iter")


def test_label_channels_are_valid(shapes):
    p, atlas, res = shapes
    for lab, k in ((res.labels_u, 3), (res.labels_atlas, 3), (res.labels, 3)):
        assert lab.dtype == np.int64 and lab.shape == p.fixed.shape
        assert lab.min() >= 0 and lab.max() < k
    np.testing.assert_allclose(res.u.sum(axis=0), 1.0, atol=1e-12)
    assert np.all(res.beta > 0)


def test_grouped_labels_come_from_atlas():
    p = make_pair(PhantomSpec.thigh(shape=(48, 48)))
    atlas = atlas_from_labels(p.gt_moving, 4)
    g = ClassGrouping.parse("0:3;1:0,1;2:2", 3, 4)
    res = joint_solve(p.fixed, p.moving, atlas, small_cfg(grouping=g, max_iter=2))
    np.testing.assert_array_equal(res.labels, res.labels_atlas)
    assert res.labels.max() == 3 and res.labels_u.max() <= 2


def test_divergence_guard(monkeypatch):
    p = clean_pair((32, 32))
    atlas = atlas_from_labels(p.gt_moving, 3)
    real = joint_mod._total_energy
    calls = []

    def rising(*a, **kw):
        e, prior, S = real(*a, **kw)
        calls.append(1)
        e.e_seg = abs(e.total) * (1 + len(calls))
        return e, prior, S

    monkeypatch.setattr(joint_mod, "_total_energy", rising)
    with pytest.raises(DivergenceError) as info:
        joint_solve(p.fixed, p.moving, atlas, small_cfg())
    assert info.value.result.status == "diverged"
    assert len(info.value.result.trace) == 2


def test_input_validation():
    p = clean_pair((32, 32))
    atlas = atlas_from_labels(p.gt_moving, 3)
    with pytest.raises(FieldError, match="normalized"):
        joint_solve(3 * p.fixed, p.moving, atlas, small_cfg())
    with pytest.raises(FieldError, match="grid"):
        joint_solve(p.fixed, p.moving[:-1], atlas, small_cfg())
    with pytest.raises(GroupingError):
        joint_solve(p.fixed, p.moving, atlas_from_labels(p.gt_moving, 4), small_cfg())
    with pytest.raises(ValueError, match="mode"):
        joint_solve(p.fixed, p.moving, atlas, small_cfg(), mode="both")


def test_config_requires_shared_zeta():
    with pytest.raises(ValueError, match="zeta"):
        JointConfig(seg=SegConfig(zeta=1.0), reg=RegConfig(zeta=0.5))
    with pytest.raises(ValueError):
        JointConfig(max_iter=0)
