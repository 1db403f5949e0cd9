"""Adaptive density control: clone, split and prune, with a freeze mask.

Frozen splats are never cloned, split or pruned and their parameters are
never touched. Every event returns a :class:`DensifyReport` describing
where each splat of the new cloud came from, so optimizer moments and any
per-splat bookkeeping can be remapped row for row.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import quat_to_rotmat
from .rasterizer import RenderGrads
from .scene import GaussianCloud

SURVIVOR, CLONE, SPLIT = 0, 1, 2


@dataclass
class GradStats:
    accum_pos_grad_norm: np.ndarray
    counts: np.ndarray
    max_screen_radius: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> GradStats:
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64), np.zeros(n))

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    def mean_grad(self) -> np.ndarray:
        return np.where(self.counts > 0, self.accum_pos_grad_norm / np.maximum(self.counts, 1), 0.0)


@dataclass
class DensifyConfig:
    tau_alpha: float = 5e-3
    tau_grad: float = 2e-4
    split_factor: float = 1.6
    scene_extent: float = 1.0
    interval: int = 100
    percent_dense: float = 0.01

    def __post_init__(self) -> None:
        if not 0 < self.tau_alpha < 1:
            raise ValueError("tau_alpha must lie in (0, 1)")
        if self.tau_grad <= 0:
            raise ValueError("tau_grad must be positive")


@dataclass
class DensifyReport:
    source: np.ndarray          # (N_new,) old index each new splat derives from
    kind: np.ndarray            # (N_new,) SURVIVOR / CLONE / SPLIT
    removed: np.ndarray         # old indices that no longer exist (pruned or split parents)
    children: dict = field(default_factory=dict)   # old index -> new indices it spawned

    @property
    def n_new(self) -> int:
        return self.source.shape[0]

    def survivors(self) -> np.ndarray:
        return np.flatnonzero(self.kind == SURVIVOR)


def accumulate(stats: GradStats, grads: RenderGrads, screen_radii: np.ndarray) -> GradStats:
    """Add screen-space positional gradient norms of visible splats.

    The pixel-space gradient is rescaled by half the image size, which is the
    normalised-device-coordinate gradient the standard thresholds are tuned for.
    """
    radii = np.asarray(screen_radii, dtype=np.float64)
    if grads.d_means2d.shape[0] != stats.n or radii.shape[0] != stats.n:
        raise ValueError("gradient statistics do not match the cloud")
    H, W = grads.image_size
    g = grads.d_means2d * np.array([0.5 * W, 0.5 * H])
    vis = radii > 0
    acc = stats.accum_pos_grad_norm.copy()
    cnt = stats.counts.copy()
    acc[vis] += np.linalg.norm(g[vis], axis=1)
    cnt[vis] += 1
    return GradStats(acc, cnt, np.maximum(stats.max_screen_radius, radii))


def _split_children(cloud: GaussianCloud, idx: np.ndarray, factor: float, rng: np.random.Generator):
    s = cloud.scales[idx]
    R = quat_to_rotmat(cloud.raw_rotations[idx])
    out = []
    for _ in range(2):
        z = rng.normal(size=s.shape) * s
        pos = cloud.positions[idx] + np.einsum("nab,nb->na", R, z)
        child = cloud.take(idx)
        child = replace(child, positions=pos, log_scales=child.log_scales - np.log(factor))
        out.append(child)
    return out


def densify_and_prune(cloud: GaussianCloud, stats: GradStats, cfg: DensifyConfig,
                      frozen_mask: np.ndarray | None = None,
                      rng: np.random.Generator | None = None) -> tuple[GaussianCloud, DensifyReport]:
    n = cloud.n
    if stats.n != n:
        raise ValueError("gradient statistics do not match the cloud")
    frozen = np.zeros(n, bool) if frozen_mask is None else np.asarray(frozen_mask, bool)
    rng = rng or np.random.default_rng(0)
    prune = (cloud.opacities < cfg.tau_alpha) & ~frozen
    grow = (stats.mean_grad() >= cfg.tau_grad) & ~frozen & ~prune
    big = cloud.scales.max(axis=1) > cfg.percent_dense * cfg.scene_extent
    clone_idx = np.flatnonzero(grow & ~big)
    split_idx = np.flatnonzero(grow & big)
    keep = np.flatnonzero(~prune & ~(grow & big))
    if keep.size + clone_idx.size + 2 * split_idx.size == 0:
        raise RuntimeError("scene collapsed")
    parts, source, kind = [], [], []
    if keep.size:
        parts.append(cloud.take(keep))
        source.append(keep)
        kind.append(np.full(keep.size, SURVIVOR))
    if clone_idx.size:
        parts.append(cloud.take(clone_idx))
        source.append(clone_idx)
        kind.append(np.full(clone_idx.size, CLONE))
    if split_idx.size:
        for child in _split_children(cloud, split_idx, cfg.split_factor, rng):
            parts.append(child)
            source.append(split_idx)
            kind.append(np.full(split_idx.size, SPLIT))
    new = GaussianCloud.concat(parts)
    report = _report(np.concatenate(source), np.concatenate(kind), n, keep)
    return new, report


def _report(source: np.ndarray, kind: np.ndarray, n_old: int, keep: np.ndarray) -> DensifyReport:
    removed = np.setdiff1d(np.arange(n_old), keep)
    children: dict[int, list[int]] = {}
    for new_i in np.flatnonzero(kind != SURVIVOR):
        children.setdefault(int(source[new_i]), []).append(int(new_i))
    return DensifyReport(source, kind, removed, children)


def seed_new_splats(cloud: GaussianCloud, stats: GradStats, frozen_mask: np.ndarray, cfg: DensifyConfig,
                    rng: np.random.Generator | None = None) -> tuple[GaussianCloud, DensifyReport]:
    """Spawn fresh splats next to high-gradient frozen splats, leaving the parents untouched.

    Used once at the start of the motion-growth phase: each frozen splat whose
    mean gradient reaches ``tau_grad`` gets one child sampled from its own
    Gaussian with scales divided by ``split_factor``.
    """
    rng = rng or np.random.default_rng(0)
    n = cloud.n
    frozen = np.asarray(frozen_mask, bool)
    parents = np.flatnonzero((stats.mean_grad() >= cfg.tau_grad) & frozen)
    keep = np.arange(n)
    if parents.size == 0:
        return cloud.copy(), _report(keep, np.full(n, SURVIVOR), n, keep)
    child = _split_children(cloud, parents, cfg.split_factor, rng)[0]
    new = GaussianCloud.concat([cloud, child])
    source = np.concatenate([keep, parents])
    kind = np.concatenate([np.full(n, SURVIVOR), np.full(parents.size, CLONE)])
    return new, _report(source, kind, n, keep)


def motion_growth_pass(cloud: GaussianCloud, stats: GradStats, frozen_mask: np.ndarray,
                       cfg_motion: DensifyConfig, rng: np.random.Generator | None = None):
    """Densify/prune among non-frozen splats only, with the motion-stage opacity threshold."""
    frozen = np.asarray(frozen_mask, bool)
    if frozen.all():
        n = cloud.n
        keep = np.arange(n)
        return cloud.copy(), _report(keep, np.full(n, SURVIVOR), n, keep)
    masked = GradStats(np.where(frozen, 0.0, stats.accum_pos_grad_norm), stats.counts.copy(),
                       stats.max_screen_radius.copy())
    return densify_and_prune(cloud, masked, cfg_motion, frozen, rng)


def remap_rows(arr: np.ndarray, report: DensifyReport, fill: float = 0.0) -> np.ndarray:
    """Survivors keep their row, newly created splats get ``fill``."""
    out = np.full((report.n_new,) + arr.shape[1:], fill, dtype=arr.dtype)
    surv = report.kind == SURVIVOR
    out[surv] = arr[report.source[surv]]
    return out


def remap_frozen(frozen_mask: np.ndarray, report: DensifyReport) -> np.ndarray:
    return remap_rows(np.asarray(frozen_mask, bool), report, fill=False)
