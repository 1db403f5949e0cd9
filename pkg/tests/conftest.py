"""Shared fixtures: tiny scenes for gradient checks and fast end-to-end runs."""
from __future__ import annotations

import numpy as np
import pytest

from splat4d.camera import CameraPose, look_at
from splat4d.geometry import quat_normalize
from splat4d.scene import GaussianCloud, logit


def make_cloud(n: int, rng: np.random.Generator, spread: float = 0.35, depth: float = 3.0,
               scale: tuple[float, float] = (0.08, 0.2), opacity: tuple[float, float] = (0.3, 0.9)) -> GaussianCloud:
    pos = np.column_stack([rng.uniform(-spread, spread, (n, 2)), depth + rng.uniform(-0.3, 0.3, n)])
    rot = quat_normalize(rng.normal(size=(n, 4)))
    log_s = np.log(rng.uniform(*scale, (n, 3)))
    return GaussianCloud(pos, rot, log_s, logit(rng.uniform(*opacity, n)), rng.uniform(0.1, 0.9, (n, 3)))


def small_camera(size: int = 32, focal: float = 40.0) -> CameraPose:
    """Identity-pose camera looking down +z with the principal point on a pixel centre."""
    return CameraPose(np.array([1.0, 0, 0, 0]), np.zeros(3), focal, focal, size / 2, size / 2, size, size)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def camera() -> CameraPose:
    return small_camera()


@pytest.fixture
def tilted_camera() -> CameraPose:
    return look_at(np.array([0.4, -0.3, -0.2]), np.array([0.0, 0.0, 3.0]), fx=40.0, fy=42.0, cx=15.5, cy=16.5,
                   width=32, height=32)


def tiny_spec(**kw):
    """A scene small enough to train through the whole stage plan in seconds."""
    from splat4d.oracle import SceneSpec

    base = dict(n_splats=40, n_clusters=2, n_freeze=6, n_heldout=1, n_times=4, height=24, width=32, focal=34.0,
                jitter=0.0, splat_scale=(0.06, 0.14))
    base.update(kw)
    return SceneSpec(**base)


def tiny_config(**overrides):
    from splat4d.config import RunConfig, apply_overrides

    base = {"plan.scale": 0.002, "model.depth": 2, "model.width": 16, "model.skip": 0, "model.code_dim": 4,
            "model.pos_freqs": 3, "model.time_freqs": 2, "loss.knn_k": 4, "densify.interval": 10}
    base.update(overrides)
    return apply_overrides(RunConfig(), base)


def tiny_trainer(cfg=None, spec=None, seed=0, denoiser=None):
    from splat4d.oracle import gen_scene, render_dataset, sfm_points
    from splat4d.trainer import Trainer, init_cloud, named_rng

    cfg = cfg or tiny_config()
    scene = gen_scene(spec or tiny_spec(), seed)
    ds = render_dataset(scene)
    pts, cols = sfm_points(scene, ds, named_rng(cfg.seed, "sfm"), noise=cfg.init.sfm_noise)
    return Trainer(ds, cfg, init_cloud(pts, cols, cfg.init.opacity), denoiser=denoiser, gt_scene=scene), scene


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
