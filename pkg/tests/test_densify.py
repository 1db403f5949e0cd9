import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splat4d.densify import (CLONE, SPLIT, SURVIVOR, DensifyConfig, GradStats, accumulate, densify_and_prune,
                             motion_growth_pass, remap_frozen, remap_rows, seed_new_splats)
from splat4d.rasterizer import RenderGrads, render
from splat4d.scene import GaussianCloud, logit
from splat4d.trainer import AdamState, adam_step

from conftest import make_cloud, small_camera


def grads_with(d_means2d, size=(32, 32)):
    n = d_means2d.shape[0]
    return RenderGrads(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)),
                       np.zeros(6), np.zeros((3, 3)), np.zeros(3), d_means2d, size)


def stats_with_mean(values):
    v = np.asarray(values, float)
    return GradStats(v.copy(), np.ones(v.size, dtype=np.int64), np.zeros(v.size))


def test_config_validation():
    with pytest.raises(ValueError):
        DensifyConfig(tau_alpha=0)
    with pytest.raises(ValueError):
        DensifyConfig(tau_grad=-1)
    d = DensifyConfig()
    assert (d.tau_alpha, d.tau_grad, d.split_factor, d.interval, d.percent_dense) == (5e-3, 2e-4, 1.6, 100, 0.01)


# accumulation

def test_zero_grads_only_count():
    s = accumulate(GradStats.zeros(3), grads_with(np.zeros((3, 2))), np.array([1.0, 0, 2]))
    assert not s.accum_pos_grad_norm.any()
    assert s.counts.tolist() == [1, 0, 1]
    np.testing.assert_array_equal(s.max_screen_radius, [1, 0, 2])


def test_accumulation_is_additive_and_mean_matches_hand_computation():
    steps = [np.array([[3.0, 4.0], [0, 0]]), np.array([[0.0, 0.0], [1, 0]]), np.array([[6.0, 8.0], [0, 2]])]
    s = GradStats.zeros(2)
    for d in steps:
        # scale by 2/W, 2/H so the half-size rescaling inside accumulate cancels
        s = accumulate(s, grads_with(d * np.array([2 / 32, 2 / 32])), np.ones(2))
    np.testing.assert_allclose(s.mean_grad(), [(5 + 0 + 10) / 3, (0 + 1 + 2) / 3])
    a = accumulate(GradStats.zeros(2), grads_with(steps[0]), np.ones(2))
    b = accumulate(a, grads_with(steps[1]), np.ones(2))
    np.testing.assert_allclose(b.accum_pos_grad_norm,
                               a.accum_pos_grad_norm + accumulate(GradStats.zeros(2), grads_with(steps[1]),
                                                                  np.ones(2)).accum_pos_grad_norm)


def test_accumulate_shape_mismatch():
    with pytest.raises(ValueError):
        accumulate(GradStats.zeros(3), grads_with(np.zeros((2, 2))), np.ones(2))


# clone / split / prune

def test_quiet_cloud_is_unchanged(rng):
    c = make_cloud(6, rng)
    new, rep = densify_and_prune(c, stats_with_mean(np.full(6, 1e-6)), DensifyConfig())
    for k, v in c.arrays().items():
        assert np.array_equal(new.arrays()[k], v)
    assert np.all(rep.kind == SURVIVOR) and rep.removed.size == 0


def test_low_opacity_splat_is_pruned(rng):
    c = make_cloud(4, rng)
    c.opacity_logits[2] = logit(1e-3)
    new, rep = densify_and_prune(c, stats_with_mean(np.zeros(4)), DensifyConfig(tau_alpha=5e-3))
    assert new.n == 3 and rep.removed.tolist() == [2]
    assert rep.source.tolist() == [0, 1, 3]


def test_large_high_gradient_splat_splits_in_two(rng):
    c = make_cloud(3, rng, scale=(0.5, 0.6))
    cfg = DensifyConfig(scene_extent=1.0)
    new, rep = densify_and_prune(c, stats_with_mean([0, 1.0, 0]), cfg, rng=rng)
    assert new.n == 4
    kids = rep.children[1]
    assert len(kids) == 2 and np.all(rep.kind[kids] == SPLIT)
    for k in kids:
        np.testing.assert_allclose(new.log_scales[k], c.log_scales[1] - np.log(1.6), atol=1e-14)
        assert new.opacity_logits[k] == c.opacity_logits[1]
    assert 1 in rep.removed
    assert not any(np.array_equal(new.positions[k], c.positions[1]) for k in kids)


def test_small_high_gradient_splat_is_cloned(rng):
    c = make_cloud(3, rng, scale=(0.001, 0.002))
    new, rep = densify_and_prune(c, stats_with_mean([0, 1.0, 0]), DensifyConfig(scene_extent=1.0))
    assert new.n == 4 and rep.kind.tolist() == [SURVIVOR] * 3 + [CLONE]
    assert np.array_equal(new.positions[3], c.positions[1])
    assert rep.removed.size == 0


def test_scene_collapse_is_an_error(rng):
    c = make_cloud(3, rng)
    c.opacity_logits[:] = logit(1e-4)
    with pytest.raises(RuntimeError, match="scene collapsed"):
        densify_and_prune(c, stats_with_mean(np.zeros(3)), DensifyConfig())


def test_stats_must_match_cloud(rng):
    with pytest.raises(ValueError):
        densify_and_prune(make_cloud(3, rng), GradStats.zeros(4), DensifyConfig())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_report_is_consistent(seed):
    rng = np.random.default_rng(seed)
    n = 20
    c = make_cloud(n, rng, scale=(0.001, 0.05))
    c.opacity_logits[rng.random(n) < 0.2] = logit(1e-3)
    frozen = rng.random(n) < 0.3
    stats = stats_with_mean(rng.exponential(2e-4, n))
    try:
        new, rep = densify_and_prune(c, stats, DensifyConfig(scene_extent=2.0), frozen, rng)
    except RuntimeError:
        return
    assert rep.n_new == new.n
    surv = rep.survivors()
    # survivors keep their parameters, in order
    assert np.all(np.diff(rep.source[surv]) > 0)
    np.testing.assert_array_equal(new.positions[surv], c.positions[rep.source[surv]])
    # removed parents are exactly the pruned plus the split
    split_parents = {int(rep.source[i]) for i in np.flatnonzero(rep.kind == SPLIT)}
    pruned = set(rep.removed.tolist()) - split_parents
    assert set(rep.removed.tolist()) == pruned | split_parents
    assert all(c.opacities[p] < 5e-3 for p in pruned)
    for p, kids in rep.children.items():
        assert all(rep.source[k] == p for k in kids)
    # frozen splats survive untouched
    fr_new = remap_frozen(frozen, rep)
    assert fr_new.sum() == frozen.sum()
    np.testing.assert_array_equal(new.positions[fr_new], c.positions[frozen])


def test_pure_prune_changes_image_by_bounded_amount(rng, camera):
    c = make_cloud(12, rng)
    c.opacity_logits[[1, 5]] = logit(4e-3)
    new, _ = densify_and_prune(c, stats_with_mean(np.zeros(12)), DensifyConfig())
    assert new.n == 10
    before = render(c, camera, (0.5, 0.5, 0.5)).pixels
    after = render(new, camera, (0.5, 0.5, 0.5)).pixels
    assert np.abs(before - after).max() < 3 * 5e-3


# freeze contract and the motion growth pass

def test_frozen_splats_are_never_touched(rng):
    c = make_cloud(6, rng, scale=(0.3, 0.5))
    c.opacity_logits[0] = logit(1e-4)
    frozen = np.array([True, True, False, False, False, False])
    new, rep = densify_and_prune(c, stats_with_mean(np.full(6, 10.0)), DensifyConfig(), frozen, rng)
    fr = remap_frozen(frozen, rep)
    assert fr.sum() == 2
    for k, v in c.arrays().items():
        assert np.array_equal(new.arrays()[k][fr], v[:2])


def test_motion_growth_without_new_splats_is_identity(rng):
    c = make_cloud(5, rng)
    new, rep = motion_growth_pass(c, stats_with_mean(np.full(5, 10.0)), np.ones(5, bool),
                                  DensifyConfig(tau_alpha=1e-2), rng)
    assert new.n == 5 and all(np.array_equal(new.arrays()[k], v) for k, v in c.arrays().items())


def test_motion_threshold_prunes_what_canonical_keeps(rng):
    c = make_cloud(4, rng)
    c.opacity_logits[3] = logit(8e-3)
    frozen = np.array([True, True, True, False])
    canon, _ = densify_and_prune(c, stats_with_mean(np.zeros(4)), DensifyConfig(tau_alpha=5e-3), frozen)
    motion, _ = motion_growth_pass(c, stats_with_mean(np.zeros(4)), frozen, DensifyConfig(tau_alpha=1e-2))
    assert canon.n == 4 and motion.n == 3


def test_motion_growth_ignores_frozen_gradients(rng):
    c = make_cloud(4, rng, scale=(0.3, 0.5))
    frozen = np.array([True, True, False, False])
    new, rep = motion_growth_pass(c, stats_with_mean([1e3, 1e3, 0, 0]), frozen, DensifyConfig(tau_alpha=1e-2))
    assert new.n == 4 and np.all(rep.kind == SURVIVOR)


def test_seeding_adds_children_next_to_busy_frozen_splats(rng):
    c = make_cloud(5, rng)
    frozen = np.ones(5, bool)
    new, rep = seed_new_splats(c, stats_with_mean([0, 1, 0, 1, 0]), frozen, DensifyConfig(), rng)
    assert new.n == 7
    assert rep.source[5:].tolist() == [1, 3]
    for k, v in c.arrays().items():
        assert np.array_equal(new.arrays()[k][:5], v)
    assert not remap_frozen(frozen, rep)[5:].any()


# optimizer-state remapping

def test_remap_rows_zeroes_new_rows():
    from splat4d.densify import DensifyReport
    rep = DensifyReport(np.array([0, 2, 1, 1]), np.array([SURVIVOR, SURVIVOR, SPLIT, SPLIT]), np.array([1]))
    arr = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(remap_rows(arr, rep), [[0, 1], [4, 5], [0, 0], [0, 0]])


def test_adam_state_stays_aligned_through_events(rng):
    c = make_cloud(10, rng, scale=(0.001, 0.2))
    state = AdamState()
    for event in range(4):
        grads = {k: rng.normal(size=v.shape) for k, v in c.arrays().items()}
        c = GaussianCloud(**adam_step(c.arrays(), grads, state, 1e-3))
        c.opacity_logits[rng.integers(c.n)] = logit(1e-3)
        c, rep = densify_and_prune(c, stats_with_mean(rng.exponential(3e-4, c.n)), DensifyConfig(), None, rng)
        before = {k: state.m[k].copy() for k in state.m}
        for k in c.PARAM_NAMES:
            state.remap(k, rep)
        surv = rep.kind == SURVIVOR
        for k, v in c.arrays().items():
            assert state.m[k].shape == v.shape and state.v[k].shape == v.shape
            np.testing.assert_array_equal(state.m[k][surv], before[k][rep.source[surv]])
            assert not state.m[k][~surv].any()


def test_stale_optimizer_state_is_rejected(rng):
    c = make_cloud(4, rng)
    state = AdamState()
    adam_step(c.arrays(), {"colors": np.ones((4, 3))}, state, 1e-3)
    with pytest.raises(ValueError, match="misaligned"):
        adam_step({"colors": np.zeros((5, 3))}, {"colors": np.ones((5, 3))}, state, 1e-3)


def test_every_splat_split_leaves_only_children():
    cloud = GaussianCloud(np.zeros((2, 3)) + [0, 0, 3], np.tile([1.0, 0, 0, 0], (2, 1)), np.full((2, 3), np.log(0.5)),
                          logit(np.full(2, 0.5)), np.full((2, 3), 0.5))
    new, rep = densify_and_prune(cloud, stats_with_mean([1.0, 1.0]), DensifyConfig(scene_extent=1.0))
    assert new.n == 4
    assert set(rep.kind.tolist()) == {SPLIT}
    np.testing.assert_allclose(new.log_scales, np.log(0.5 / 1.6))
