import numpy as np
import pytest

from splat4d.deformnet import (FORMAT_TAG, _layer_in_dims, evaluate, field_backward, field_forward, load_field,
                               make_field, save_field)
from splat4d.scene import DeformationOffsets

from gradchecks import deformnet_masks, randomized_field


def test_architecture():
    f = make_field("temporal", np.random.default_rng(0))
    assert f.input_dim == 63 + 13
    dims = _layer_in_dims(f)
    assert len(dims) == 8
    assert dims[5] == 256 + 76 and all(d == 256 for i, d in enumerate(dims[1:], 1) if i != 5)
    for i in range(8):
        assert f.weights[f"l{i}.w"].shape == (dims[i], 256)
    assert f.weights["head_x.w"].shape == (256 + 0, 3)


def test_perframe_architecture():
    f = make_field("perframe", np.random.default_rng(0), num_frames=5)
    assert f.weights["codes"].shape == (5, 32)
    assert not f.weights["codes"].any()
    assert f.input_dim == 63 + 32


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        make_field("spatial", np.random.default_rng(0))


@pytest.mark.parametrize("kind,cond", [("temporal", 0.0), ("perframe", 0)])
def test_canonical_is_exact_zero_for_any_weights(kind, cond, rng):
    f = randomized_field(kind, rng, num_frames=3)
    off = field_forward(f, rng.normal(size=(7, 3)), cond)
    assert not off.dx.any() and not off.dq.any() and not off.ds.any()


def test_zero_heads_give_zero_offsets(rng):
    f = make_field("temporal", rng)
    off = field_forward(f, rng.normal(size=(5, 3)), 0.6)
    assert not off.dx.any() and not off.dq.any() and not off.ds.any()


def test_scale_head_can_be_disabled(rng):
    f = randomized_field("temporal", rng)
    f.use_scale = False
    assert not field_forward(f, rng.normal(size=(4, 3)), 0.5).ds.any()


def test_permutation_equivariance(rng):
    f = randomized_field("temporal", rng)
    pos = rng.normal(size=(6, 3))
    perm = rng.permutation(6)
    a = field_forward(f, pos, 0.3)
    b = field_forward(f, pos[perm], 0.3)
    np.testing.assert_allclose(b.dx, a.dx[perm], atol=1e-14)
    np.testing.assert_allclose(b.dq, a.dq[perm], atol=1e-14)


def test_forward_is_deterministic(rng):
    f = randomized_field("perframe", rng, num_frames=3)
    pos = rng.normal(size=(4, 3))
    assert np.array_equal(field_forward(f, pos, 1).dx, field_forward(f, pos, 1).dx)


def test_zero_upstream_gives_zero_gradients(rng):
    f = randomized_field("temporal", rng)
    pos = rng.normal(size=(3, 3))
    d_w, d_pos, d_cond = field_backward(f, pos, 0.5, DeformationOffsets.zeros(3))
    assert all(not v.any() for v in d_w.values())
    assert not d_pos.any() and not d_cond.any()


def test_canonical_backward_is_zero(rng):
    f = randomized_field("perframe", rng, num_frames=3)
    g = DeformationOffsets(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 3)))
    d_w, d_pos, d_cond = field_backward(f, np.zeros((2, 3)), 0, g)
    assert all(not v.any() for v in d_w.values())


@pytest.mark.parametrize("kind", ["temporal", "perframe"])
def test_gradients_match_finite_differences(kind):
    masks = deformnet_masks(0, kind)
    allm = np.concatenate([m.ravel() for m in masks.values()])
    assert allm.mean() >= 0.99, {k: float(m.mean()) for k, m in masks.items()}


def test_dead_relu_unit_gets_no_incoming_gradient(rng):
    f = randomized_field("temporal", rng)
    f.weights["l2.b"][17] = -1e6
    pos = rng.normal(size=(3, 3))
    g = DeformationOffsets(rng.normal(size=(3, 3)), rng.normal(size=(3, 4)), rng.normal(size=(3, 3)))
    d_w, _, _ = field_backward(f, pos, 0.4, g)
    assert not d_w["l2.w"][:, 17].any() and d_w["l2.b"][17] == 0
    assert d_w["l2.w"].any()


def test_cache_reuse_matches_fresh_backward(rng):
    f = randomized_field("temporal", rng)
    pos = rng.normal(size=(3, 3))
    g = DeformationOffsets(rng.normal(size=(3, 3)), rng.normal(size=(3, 4)), rng.normal(size=(3, 3)))
    _, cache = evaluate(f, pos, 0.2)
    a = field_backward(f, pos, 0.2, g, cache)
    b = field_backward(f, pos, 0.2, g)
    for k in a[0]:
        np.testing.assert_array_equal(a[0][k], b[0][k])


def test_checkpoint_roundtrip(tmp_path, rng):
    f = randomized_field("perframe", rng, num_frames=4, canonical=2)
    save_field(f, tmp_path / "f.npz")
    g = load_field(tmp_path / "f.npz")
    assert g.arch() == f.arch()
    pos = rng.normal(size=(3, 3))
    np.testing.assert_array_equal(field_forward(g, pos, 1).dx, field_forward(f, pos, 1).dx)
    assert not field_forward(g, pos, 2).dx.any()


def test_checkpoint_rejects_foreign_archive(tmp_path):
    np.savez(tmp_path / "x.npz", __format__=np.array("other"), __arch__=np.array("{}"))
    with pytest.raises(ValueError):
        load_field(tmp_path / "x.npz")
    assert FORMAT_TAG == "splat4d.mlpfield"
