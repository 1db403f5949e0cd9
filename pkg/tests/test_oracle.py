import numpy as np
import pytest

from splat4d.camera import scene_extent
from splat4d.losses import build_knn, rigid_reg
from splat4d.oracle import (SceneSpec, cloud_at, finite_diff, gen_scene, grad_check, gt_offsets, jittered_cloud,
                            load_dataset, render_dataset, scene_from_manifest, write_dataset)
from splat4d.rasterizer import render
from splat4d.scene import apply_offsets

from conftest import tiny_spec


# finite differences

def test_quadratic_is_exact():
    g = finite_diff(lambda x: float(np.sum(x**2)), np.array([1.0, 2.0]), 1e-5)
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)


def test_constant_has_zero_gradient():
    np.testing.assert_array_equal(finite_diff(lambda x: 3.0, np.ones((2, 2))), np.zeros((2, 2)))


def test_subset_and_errors():
    g = finite_diff(lambda x: float(x.sum()), np.zeros(4), coords=np.array([1, 3]))
    assert np.isnan(g[0]) and g[1] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        finite_diff(lambda x: 0.0, np.zeros(2), eps=0)
    with pytest.raises(FloatingPointError):
        finite_diff(lambda x: float("inf") if x[0] > 0 else 0.0, np.zeros(1))


def test_grad_check_mask():
    ok = grad_check(np.array([1.0, 1.0, 0.0]), np.array([1.00001, 1.1, np.nan]))
    assert ok.tolist() == [True, False]


# scenes

def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(n_splats=2, n_clusters=3)


def test_static_single_cluster_scene():
    scene = gen_scene(tiny_spec(n_clusters=1, motion_amplitude=0.0, rotation_amplitude=0.0), 0)
    ds = render_dataset(scene)
    for f in ds.reference_frames[1:]:
        np.testing.assert_array_equal(f, ds.reference_frames[0])


def test_trajectories_are_identity_at_t0():
    scene = gen_scene(tiny_spec(), 1)
    c0 = cloud_at(scene, 0.0)
    for name, arr in scene.cloud.arrays().items():
        np.testing.assert_array_equal(getattr(c0, name), arr)
    off = gt_offsets(scene, 0.0)
    assert not (off.dx.any() or off.dq.any() or off.ds.any())


def test_single_cluster_motion_is_rigid():
    scene = gen_scene(tiny_spec(n_clusters=1), 2)
    moved = cloud_at(scene, 0.7)
    g = build_knn(scene.cloud.positions, 5, 1.0)
    value, _ = rigid_reg(g, moved.positions, scene.cloud.positions, moved.raw_rotations, scene.cloud.raw_rotations)
    assert value <= 1e-8


def test_jitter_zero_at_canonical_and_bounded():
    spec = tiny_spec(jitter=0.05)
    scene = gen_scene(spec, 3)
    k = scene.canonical_index
    assert not scene.jitter_rotations[k].any() and not scene.jitter_translations[k].any()
    assert np.linalg.norm(scene.jitter_translations, axis=-1).max() <= 0.05 * scene_extent(scene.arc_poses)
    moved = jittered_cloud(scene, (k + 1) % spec.n_freeze)
    assert 0 < np.abs(moved.positions - scene.cloud.positions).max()


def test_consistent_dataset():
    scene = gen_scene(tiny_spec(), 4)
    ds = render_dataset(scene)
    bg = ds.background
    for idx, frame in zip(ds.freeze_indices, ds.freeze_frames):
        np.testing.assert_array_equal(frame, render(scene.cloud, scene.arc_poses[idx], bg).pixels)
    assert ds.manifest["consistent"]


def test_jittered_dataset_canonical_frame_and_reference():
    scene = gen_scene(tiny_spec(jitter=0.05), 5)
    ds = render_dataset(scene)
    canon = render(scene.cloud, scene.reference_pose, ds.background).pixels
    np.testing.assert_array_equal(ds.freeze_frames[ds.canonical_frame], canon)
    np.testing.assert_array_equal(ds.reference_frames[0], canon)
    assert not ds.manifest["consistent"]
    other = (ds.canonical_frame + 1) % ds.num_freeze
    clean = render(scene.cloud, ds.freeze_poses[other], ds.background).pixels
    assert np.abs(ds.freeze_frames[other] - clean).max() > 0


def test_generation_is_pure():
    a, b = render_dataset(gen_scene(tiny_spec(), 6)), render_dataset(gen_scene(tiny_spec(), 6))
    np.testing.assert_array_equal(a.freeze_frames, b.freeze_frames)
    np.testing.assert_array_equal(a.reference_frames, b.reference_frames)
    c = render_dataset(gen_scene(tiny_spec(), 7))
    assert not np.array_equal(a.freeze_frames, c.freeze_frames)


@pytest.mark.parametrize("t", [0.2, 0.5, 1.0])
def test_gt_offsets_closure(t):
    scene = gen_scene(tiny_spec(), 8)
    bg = np.asarray(scene.spec.background)
    direct = render(cloud_at(scene, t), scene.reference_pose, bg).pixels
    via = render(apply_offsets(scene.cloud, gt_offsets(scene, t)), scene.reference_pose, bg).pixels
    np.testing.assert_allclose(via, direct, atol=1e-6)


def test_disk_round_trip(tmp_path):
    scene = gen_scene(tiny_spec(jitter=0.03), 9)
    ds = render_dataset(scene)
    write_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.freeze_indices == ds.freeze_indices and back.canonical_frame == ds.canonical_frame
    np.testing.assert_allclose(back.freeze_frames, ds.freeze_frames, atol=0.5 / 255 + 1e-12)
    np.testing.assert_allclose(back.reference_frames, ds.reference_frames, atol=0.5 / 255 + 1e-12)
    np.testing.assert_array_equal(back.reference_times, ds.reference_times)
    for p, q in zip(back.freeze_poses, ds.freeze_poses):
        assert p == q
    regen = render_dataset(scene_from_manifest(back.manifest))
    np.testing.assert_array_equal(regen.freeze_frames, ds.freeze_frames)
