"""Synthetic ground truth and brute-force verification helpers.

A synthetic scene is a random Gaussian cloud split into rigid clusters.
Each cluster follows a smooth SE(3) trajectory over ``t in [0, 1]`` that is
the identity at ``t = 0`` (the canonical time). Freeze-time frames are
rendered along a camera arc from the canonical cloud with a small random
rigid perturbation per cluster and frame, standing in for the geometric
inconsistencies of generated videos; the canonical frame is never
perturbed. The perturbation amplitude is a fraction of the scene extent,
the padded radius of the camera-centre bounding sphere (the same extent
densification uses), so it scales with the rig rather than the object.

Dataset directory layout::

    manifest.json           scene spec, seed, indices, times, background
    freeze_cameras.txt      training freeze-time cameras (index = arc index)
    heldout_cameras.txt     held-out freeze-time cameras
    reference_camera.txt    the fixed reference camera (single row)
    freeze/NNN.png          training frames, NNN = arc index
    heldout/NNN.png         jitter-free renders at held-out arc indices
    reference/NNN.png       reference video, NNN = time index
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .camera import CameraPose, look_at, read_cameras, scene_extent, write_cameras
from .geometry import quat_from_axis_angle, quat_mul, quat_normalize, so3_exp
from .rasterizer import load_png, render, save_png
from .scene import DeformationOffsets, GaussianCloud, logit

MANIFEST_VERSION = 1


@dataclass
class SceneSpec:
    n_splats: int = 500
    n_clusters: int = 4
    extent: float = 1.0
    motion_amplitude: float = 0.12      # max cluster translation at t=1, fraction of extent
    rotation_amplitude: float = 0.35    # max cluster rotation at t=1, radians
    jitter: float = 0.02                # freeze-time perturbation, fraction of the camera-rig extent
    n_freeze: int = 28
    n_heldout: int = 4
    n_times: int = 16
    height: int = 64
    width: int = 96
    focal: float = 90.0
    camera_distance: float = 3.0
    arc_degrees: float = 180.0
    elevation_degrees: float = 15.0
    background: tuple = (0.1, 0.1, 0.12)
    splat_scale: tuple = (0.035, 0.09)

    def __post_init__(self) -> None:
        if not self.n_splats >= self.n_clusters >= 1:
            raise ValueError("need n_splats >= n_clusters >= 1")
        self.background = tuple(float(v) for v in self.background)
        self.splat_scale = tuple(float(v) for v in self.splat_scale)


@dataclass
class SyntheticScene:
    spec: SceneSpec
    seed: int
    cloud: GaussianCloud
    labels: np.ndarray                 # (N,) cluster index
    centers: np.ndarray                # (C, 3) rotation pivots
    motion_axes: np.ndarray            # (C, 3) axis-angle reached at t = 1
    motion_translations: np.ndarray    # (C, 3) translation reached at t = 1
    arc_poses: list[CameraPose]
    canonical_index: int               # arc index of the canonical freeze frame
    heldout_indices: list[int]
    jitter_rotations: np.ndarray       # (n_freeze, C, 3) axis-angle
    jitter_translations: np.ndarray    # (n_freeze, C, 3)

    @property
    def reference_pose(self) -> CameraPose:
        return self.arc_poses[self.canonical_index]

    @property
    def train_indices(self) -> list[int]:
        return [i for i in range(len(self.arc_poses)) if i not in self.heldout_indices]

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.spec.n_times)


def _profile(t: float) -> float:
    # smooth ease-in, exactly 0 at t = 0
    return 0.5 * (1.0 - np.cos(np.pi * t))


def _random_unit(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _ball(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    return _random_unit(rng, n) * (radius * rng.random(n) ** (1 / 3))[:, None]


def camera_arc(spec: SceneSpec) -> list[CameraPose]:
    half = np.radians(spec.arc_degrees) / 2
    elev = np.radians(spec.elevation_degrees)
    poses = []
    for a in np.linspace(-half, half, spec.n_freeze):
        center = spec.camera_distance * spec.extent * np.array(
            [np.sin(a) * np.cos(elev), np.sin(elev), -np.cos(a) * np.cos(elev)])
        poses.append(look_at(center, np.zeros(3), fx=spec.focal, fy=spec.focal, cx=spec.width / 2,
                             cy=spec.height / 2, width=spec.width, height=spec.height))
    return poses


def gen_scene(spec: SceneSpec | None = None, seed: int | np.random.Generator = 0) -> SyntheticScene:
    spec = spec or SceneSpec()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    seed_value = int(seed) if not isinstance(seed, np.random.Generator) else -1
    ext = spec.extent
    C = spec.n_clusters
    centers = _ball(rng, C, 0.45 * ext) if C > 1 else np.zeros((1, 3))
    labels = np.sort(np.concatenate([np.arange(C), rng.integers(0, C, spec.n_splats - C)]))
    cluster_radius = 0.5 * ext if C == 1 else 0.32 * ext
    pos = centers[labels] + _ball(rng, spec.n_splats, cluster_radius)
    lo, hi = spec.splat_scale
    scales = np.exp(rng.uniform(np.log(lo), np.log(hi), (spec.n_splats, 3))) * ext
    rots = quat_normalize(rng.normal(size=(spec.n_splats, 4)))
    opac = rng.uniform(0.55, 0.95, spec.n_splats)
    base = rng.uniform(0.2, 0.85, (C, 3))
    cols = np.clip(base[labels] + rng.uniform(-0.18, 0.18, (spec.n_splats, 3)), 0.03, 0.97)
    cloud = GaussianCloud(pos, rots, np.log(scales), logit(opac), cols)

    motion_axes = _random_unit(rng, C) * (spec.rotation_amplitude * rng.uniform(0.5, 1.0, C))[:, None]
    motion_trans = _random_unit(rng, C) * (spec.motion_amplitude * ext * rng.uniform(0.5, 1.0, C))[:, None]

    arc = camera_arc(spec)
    canonical = spec.n_freeze // 2
    if spec.n_heldout:
        step = spec.n_freeze / spec.n_heldout
        held = sorted({int(step * (i + 0.5)) for i in range(spec.n_heldout)})
        held = [h if h != canonical else h + 1 for h in held]
    else:
        held = []
    amp = spec.jitter * scene_extent(arc)
    j_rot = _random_unit(rng, spec.n_freeze * C).reshape(spec.n_freeze, C, 3)
    j_rot *= rng.uniform(-1, 1, (spec.n_freeze, C, 1)) * (amp / cluster_radius)
    j_trans = _ball(rng, spec.n_freeze * C, amp).reshape(spec.n_freeze, C, 3)
    j_rot[canonical] = 0.0
    j_trans[canonical] = 0.0
    return SyntheticScene(spec, seed_value, cloud, labels, centers, motion_axes, motion_trans, arc,
                          canonical, held, j_rot, j_trans)


def _rigid_cloud(scene: SyntheticScene, rotvecs: np.ndarray, trans: np.ndarray) -> GaussianCloud:
    """Cloud with each cluster rotated about its pivot and translated."""
    if not np.any(rotvecs) and not np.any(trans):
        return scene.cloud.copy()
    c = scene.cloud
    lab = scene.labels
    Rs = np.stack([so3_exp(w) for w in rotvecs])
    qs = quat_from_axis_angle(rotvecs)
    piv = scene.centers[lab]
    pos = np.einsum("nab,nb->na", Rs[lab], c.positions - piv) + piv + trans[lab]
    rot = quat_mul(qs[lab], c.raw_rotations)
    return GaussianCloud(pos, rot, c.log_scales.copy(), c.opacity_logits.copy(), c.colors.copy())


def cluster_motion(scene: SyntheticScene, t: float) -> tuple[np.ndarray, np.ndarray]:
    p = _profile(float(t))
    return scene.motion_axes * p, scene.motion_translations * p


def cloud_at(scene: SyntheticScene, t: float) -> GaussianCloud:
    return _rigid_cloud(scene, *cluster_motion(scene, t))


def gt_offsets(scene: SyntheticScene, t: float) -> DeformationOffsets:
    moved = cloud_at(scene, t)
    c = scene.cloud
    return DeformationOffsets(moved.positions - c.positions, moved.raw_rotations - c.raw_rotations,
                              np.zeros_like(c.log_scales), t)


def jittered_cloud(scene: SyntheticScene, arc_index: int) -> GaussianCloud:
    return _rigid_cloud(scene, scene.jitter_rotations[arc_index], scene.jitter_translations[arc_index])


@dataclass
class Dataset:
    freeze_indices: list[int]          # arc index of each training frame
    freeze_poses: list[CameraPose]
    freeze_frames: np.ndarray          # (K, H, W, 3)
    canonical_frame: int               # position of the canonical frame within the training list
    heldout_indices: list[int]
    heldout_poses: list[CameraPose]
    heldout_frames: np.ndarray
    reference_pose: CameraPose
    reference_times: np.ndarray
    reference_frames: np.ndarray
    background: np.ndarray
    manifest: dict = field(default_factory=dict)

    @property
    def num_freeze(self) -> int:
        return len(self.freeze_poses)


def render_dataset(scene: SyntheticScene) -> Dataset:
    bg = np.asarray(scene.spec.background)
    train = scene.train_indices
    frames = np.stack([render(jittered_cloud(scene, i), scene.arc_poses[i], bg).pixels for i in train])
    held = np.stack([render(scene.cloud, scene.arc_poses[i], bg).pixels for i in scene.heldout_indices]) \
        if scene.heldout_indices else np.zeros((0, scene.spec.height, scene.spec.width, 3))
    times = scene.times
    ref = np.stack([render(cloud_at(scene, t), scene.reference_pose, bg).pixels for t in times])
    manifest = {
        "version": MANIFEST_VERSION,
        "spec": asdict(scene.spec),
        "seed": scene.seed,
        "consistent": scene.spec.jitter == 0.0,
        "canonical_arc_index": scene.canonical_index,
        "freeze_indices": train,
        "heldout_indices": list(scene.heldout_indices),
        "times": times.tolist(),
        "background": bg.tolist(),
    }
    return Dataset(train, [scene.arc_poses[i] for i in train], frames, train.index(scene.canonical_index),
                   list(scene.heldout_indices), [scene.arc_poses[i] for i in scene.heldout_indices], held,
                   scene.reference_pose, times, ref, bg, manifest)


def scene_from_manifest(manifest: dict) -> SyntheticScene:
    return gen_scene(SceneSpec(**manifest["spec"]), manifest["seed"])


def write_dataset(ds: Dataset, out_dir: str | Path, extra: dict | None = None) -> None:
    out = Path(out_dir)
    for sub in ("freeze", "heldout", "reference"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for idx, img in zip(ds.freeze_indices, ds.freeze_frames):
        save_png(out / "freeze" / f"{idx:03d}.png", img)
    for idx, img in zip(ds.heldout_indices, ds.heldout_frames):
        save_png(out / "heldout" / f"{idx:03d}.png", img)
    for i, img in enumerate(ds.reference_frames):
        save_png(out / "reference" / f"{i:03d}.png", img)
    write_cameras(ds.freeze_poses, out / "freeze_cameras.txt", ds.freeze_indices)
    write_cameras(ds.heldout_poses, out / "heldout_cameras.txt", ds.heldout_indices)
    write_cameras([ds.reference_pose], out / "reference_camera.txt", [ds.manifest.get("canonical_arc_index", 0)])
    manifest = dict(ds.manifest)
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    f_idx, f_poses = read_cameras(root / "freeze_cameras.txt")
    h_idx, h_poses = read_cameras(root / "heldout_cameras.txt")
    _, (ref_pose,) = read_cameras(root / "reference_camera.txt")
    frames = np.stack([load_png(root / "freeze" / f"{i:03d}.png") for i in f_idx])
    held = np.stack([load_png(root / "heldout" / f"{i:03d}.png") for i in h_idx]) if h_idx else \
        np.zeros((0,) + frames.shape[1:])
    times = np.asarray(manifest["times"], dtype=np.float64)
    ref = np.stack([load_png(root / "reference" / f"{i:03d}.png") for i in range(len(times))])
    return Dataset(f_idx, f_poses, frames, f_idx.index(manifest["canonical_arc_index"]), h_idx, h_poses,
                   held, ref_pose, times, ref, np.asarray(manifest["background"]), manifest)


def sfm_points(scene: SyntheticScene, ds: Dataset, rng: np.random.Generator,
               noise: float = 0.01, fraction: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Stand-in for an SfM point cloud: noisy splat centres coloured from the canonical frame."""
    n = scene.cloud.n
    keep = np.sort(rng.choice(n, size=max(1, int(round(fraction * n))), replace=False))
    pts = scene.cloud.positions[keep] + rng.normal(0.0, noise * scene.spec.extent, (keep.size, 3))
    pose = ds.freeze_poses[ds.canonical_frame]
    img = ds.freeze_frames[ds.canonical_frame]
    Xc = pts @ pose.R.T + pose.translation
    u = np.clip(np.rint(pose.fx * Xc[:, 0] / Xc[:, 2] + pose.cx), 0, pose.width - 1).astype(int)
    v = np.clip(np.rint(pose.fy * Xc[:, 1] / Xc[:, 2] + pose.cy), 0, pose.height - 1).astype(int)
    return pts, img[v, u]


def finite_diff(f: Callable[[np.ndarray], float], params: np.ndarray, eps: float = 1e-5,
                coords: np.ndarray | None = None) -> np.ndarray:
    """Central-difference gradient of a scalar function, per coordinate.

    ``coords`` optionally restricts evaluation to a subset of flat indices;
    other entries of the result are NaN.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(params, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan) if coords is not None else np.zeros(flat.shape)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(x.shape)


def grad_check(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4, atol: float = 1e-8) -> np.ndarray:
    """Per-coordinate pass mask: ``|a - n| <= rtol * max(|a|, |n|) + atol``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    ok = np.abs(a - n) <= rtol * np.maximum(np.abs(a), np.abs(n)) + atol
    return ok[~np.isnan(n)]
