"""Score distillation against a pluggable one-step x0-prediction denoiser.

The noise model is variance exploding: ``noisy = clean + sigma * eps`` and
the denoiser returns its estimate of ``clean``. The distillation loss is the
squared distance between rendered low-resolution frames and the detached
denoiser output, so its gradient is ``2 (I - I_hat) / count`` and never
flows through the denoiser.

Bundled denoisers are oracles that make the loss testable without a video
model. :mod:`splat4d.remote` adapts an external process to the same interface.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .camera import CameraPose, interpolate_trajectory, perturb_pose
from .rasterizer import RenderContext, RenderGrads, rasterize, render_backward
from .scene import GaussianCloud, apply_offsets

MULTI_VIEW = "multi_view"
TEMPORAL = "temporal"


@dataclass
class SdsConfig:
    sigma_max: float = 1.0
    sigma_min: float = 0.02
    anneal: str = "sqrt"
    weight_temporal: float = 20.0
    weight_multi_view: float = 5.0
    pose_radius: float | None = None      # None: 0.15 x scene extent
    lowres: tuple[int, int] = (36, 64)
    num_frames: int = 16
    min_time_span: float = 0.25

    def __post_init__(self) -> None:
        if not self.sigma_max >= self.sigma_min > 0:
            raise ValueError("need sigma_max >= sigma_min > 0")
        if self.anneal != "sqrt":
            raise ValueError(f"unknown anneal schedule {self.anneal!r}")
        if self.num_frames < 2:
            raise ValueError("a clip needs at least two frames")
        self.lowres = tuple(int(v) for v in self.lowres)

    def render_scale(self, height: int) -> int:
        """Downsampling scale S between render and denoiser resolution."""
        return max(1, int(round(height / self.lowres[0])))


@dataclass
class VideoClip:
    frames: np.ndarray                     # (M, H, W, 3)
    condition_index: int
    poses: list[CameraPose]
    times: np.ndarray
    clouds: list[GaussianCloud] = field(default_factory=list)
    contexts: list[RenderContext] = field(default_factory=list)
    offsets: list = field(default_factory=list)   # per frame (DeformationOffsets, field cache) or None
    background: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.condition_index < self.frames.shape[0]:
            raise ValueError("condition_index out of range")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


class Denoiser:
    """One-step x0 predictor over a batch of frames with one known condition frame."""

    def __init__(self, height: int = 36, width: int = 64, frames: int = 16):
        self.height, self.width, self.frames = height, width, frames

    def denoise(self, noisy: np.ndarray, condition_index: int, sigma: float) -> np.ndarray:
        raise NotImplementedError

    def check(self, noisy: np.ndarray) -> None:
        if noisy.ndim != 4 or noisy.shape[1:] != (self.height, self.width, 3):
            raise ValueError(f"denoiser expects (M, {self.height}, {self.width}, 3), got {noisy.shape}")


class GroundTruthDenoiser(Denoiser):
    """Returns stored target frames whatever the input."""

    def __init__(self, targets: np.ndarray):
        targets = np.asarray(targets, dtype=np.float64)
        super().__init__(targets.shape[1], targets.shape[2], targets.shape[0])
        self.targets = targets

    def denoise(self, noisy, condition_index, sigma):
        self.check(noisy)
        return self.targets.copy()


class IdentityDenoiser(Denoiser):
    """Returns its noisy input unchanged."""

    def denoise(self, noisy, condition_index, sigma):
        self.check(noisy)
        return np.array(noisy, dtype=np.float64)


class BlurDenoiser(Denoiser):
    """Gaussian-blurs every non-condition frame; a crude prior for smooth images."""

    def __init__(self, height: int = 36, width: int = 64, frames: int = 16, blur_sigma: float = 1.0):
        super().__init__(height, width, frames)
        self.blur_sigma = blur_sigma

    def denoise(self, noisy, condition_index, sigma):
        self.check(noisy)
        out = gaussian_filter(np.asarray(noisy, dtype=np.float64), (0, self.blur_sigma, self.blur_sigma, 0),
                              mode="nearest")
        out[condition_index] = noisy[condition_index]
        return out


def _render_all(clouds, poses, background):
    frames, ctxs = [], []
    for c, p in zip(clouds, poses):
        img, ctx = rasterize(c, p, background)
        frames.append(img.pixels)
        ctxs.append(ctx)
    return np.stack(frames), ctxs


def sample_multiview_clip(cloud: GaussianCloud, freeze_poses: list[CameraPose], canonical_pose: CameraPose,
                          cfg: SdsConfig, rng: np.random.Generator, background=(0.0, 0.0, 0.0),
                          exclude: int | None = None) -> VideoClip:
    """Render a trajectory from the canonical pose to a perturbed freeze-time pose.

    ``exclude`` removes one index (normally the canonical one) from the draw
    when other poses are available.
    """
    if not freeze_poses:
        raise ValueError("freeze_poses must be non-empty")
    choices = [i for i in range(len(freeze_poses)) if i != exclude] or list(range(len(freeze_poses)))
    k = choices[int(rng.integers(len(choices)))]
    end = perturb_pose(freeze_poses[k], cfg.pose_radius or 0.0, rng)
    poses = interpolate_trajectory(canonical_pose, end, cfg.num_frames)
    clouds = [cloud] * cfg.num_frames
    bg = np.asarray(background, dtype=np.float64)
    frames, ctxs = _render_all(clouds, poses, bg)
    return VideoClip(frames, 0, poses, np.zeros(cfg.num_frames), clouds, ctxs, [None] * cfg.num_frames, bg)


def sample_times(cfg: SdsConfig, rng: np.random.Generator) -> np.ndarray:
    span = rng.uniform(cfg.min_time_span, 1.0)
    return np.linspace(0.0, span, cfg.num_frames)


def sample_temporal_clip(cloud: GaussianCloud, temporal_field, fixed_pose: CameraPose, cfg: SdsConfig,
                         rng: np.random.Generator, background=(0.0, 0.0, 0.0)) -> VideoClip:
    """Static camera, times ``0 = t_0 < t_1 < ... <= 1`` evenly spaced over a random span."""
    from .deformnet import evaluate

    times = sample_times(cfg, rng)
    clouds, offsets = [], []
    for t in times:
        off, cache = evaluate(temporal_field, cloud.positions, t)
        clouds.append(apply_offsets(cloud, off) if cache is not None else cloud)
        offsets.append((off, cache))
    bg = np.asarray(background, dtype=np.float64)
    poses = [fixed_pose] * cfg.num_frames
    frames, ctxs = _render_all(clouds, poses, bg)
    return VideoClip(frames, 0, poses, times, clouds, ctxs, offsets, bg)


def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear area resampling from ``n_in`` to ``n_out`` samples (rows sum to one)."""
    edges_out = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.maximum(edges_out[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges_out[1:, None], np.arange(n_in)[None, :] + 1)
    A = np.clip(hi - lo, 0.0, None)
    return A / A.sum(axis=1, keepdims=True)


def _select_matrix(index: np.ndarray, n_in: int) -> np.ndarray:
    S = np.zeros((index.size, n_in))
    S[np.arange(index.size), index] = 1.0
    return S


@dataclass
class LowresTransform:
    """Separable linear map ``frame -> Ay @ frame @ Ax.T`` applied per channel."""

    mode: str                 # "shift" or "crop"
    offset: tuple[int, int]   # (dy, dx): shift amount or crop corner
    Ay: np.ndarray
    Ax: np.ndarray

    def apply(self, frames: np.ndarray) -> np.ndarray:
        return np.einsum("ih,mhwc,jw->mijc", self.Ay, np.asarray(frames, dtype=np.float64), self.Ax)

    def vjp(self, d_low: np.ndarray) -> np.ndarray:
        return np.einsum("ih,mijc,jw->mhwc", self.Ay, np.asarray(d_low, dtype=np.float64), self.Ax)


def make_lowres_transform(in_hw: tuple[int, int], out_hw: tuple[int, int], S: int, rng: np.random.Generator,
                          mode: str | None = None) -> LowresTransform:
    """Random shift by up to ``S - 1`` pixels or random half-size crop, then area resize.

    The mode is drawn with probability one half each unless given. A shift
    replicates the border so the frame keeps its size.
    """
    H, W = in_hw
    h, w = out_hw
    if S < 1:
        raise ValueError("S must be at least 1")
    if H < h or W < w or H < 2 or W < 2:
        raise ValueError(f"render size {H}x{W} is smaller than the denoiser's {h}x{w}")
    if mode is None:
        mode = "shift" if rng.random() < 0.5 else "crop"
    if mode == "shift":
        dy, dx = (int(v) for v in rng.integers(0, S, 2))
        rows = np.minimum(np.arange(H) + dy, H - 1)
        cols = np.minimum(np.arange(W) + dx, W - 1)
    elif mode == "crop":
        ch, cw = H // 2, W // 2
        dy, dx = int(rng.integers(0, H - ch + 1)), int(rng.integers(0, W - cw + 1))
        rows = np.arange(dy, dy + ch)
        cols = np.arange(dx, dx + cw)
    else:
        raise ValueError(f"unknown preprocessing mode {mode!r}")
    Ay = area_matrix(rows.size, h) @ _select_matrix(rows, H)
    Ax = area_matrix(cols.size, w) @ _select_matrix(cols, W)
    return LowresTransform(mode, (dy, dx), Ay, Ax)


def preprocess_lowres(clip: VideoClip, S: int, rng: np.random.Generator, out_hw: tuple[int, int] = (36, 64),
                      mode: str | None = None) -> tuple[VideoClip, LowresTransform]:
    """Low-resolution copy of ``clip`` plus the transform whose ``vjp`` maps gradients back."""
    if clip.frames.ndim != 4 or clip.frames.shape[-1] != 3:
        raise ValueError("clip frames must be (M, H, W, 3)")
    tf = make_lowres_transform(clip.frames.shape[1:3], out_hw, S, rng, mode)
    low = VideoClip(tf.apply(clip.frames), clip.condition_index, clip.poses, clip.times,
                    background=clip.background)
    return low, tf


def sds_loss(clip: VideoClip, condition: np.ndarray, denoiser: Denoiser, sigma: float,
             rng: np.random.Generator) -> tuple[float, np.ndarray]:
    """Distillation loss over the non-condition frames and its gradient on ``clip.frames``.

    Noise is drawn as one ``standard_normal`` array shaped like the clip; the
    condition frame's draw is discarded and that frame is replaced by
    ``condition`` before the denoiser sees the batch.
    """
    frames = np.asarray(clip.frames, dtype=np.float64)
    cond = np.asarray(getattr(condition, "pixels", condition), dtype=np.float64)
    if cond.shape != frames.shape[1:]:
        raise ValueError(f"condition {cond.shape} does not match frames {frames.shape[1:]}")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    c = clip.condition_index
    eps = rng.standard_normal(frames.shape)
    noisy = frames + sigma * eps
    noisy[c] = cond
    x0 = np.asarray(denoiser.denoise(noisy, c, sigma), dtype=np.float64)
    if x0.shape != frames.shape:
        raise ValueError(f"denoiser returned {x0.shape}, expected {frames.shape}")
    mask = np.ones(frames.shape[0], bool)
    mask[c] = False
    count = frames[mask].size
    diff = frames - x0
    diff[c] = 0.0
    return float(np.sum(diff * diff) / count), 2.0 * diff / count


def sigma_bounds(iteration: int, total: int, cfg: SdsConfig) -> tuple[float, float]:
    """``(sigma_min, upper)`` with the upper bound decaying as a square root of progress."""
    if total < 1 or not 0 <= iteration < total:
        raise ValueError(f"iteration {iteration} outside [0, {total})")
    frac = iteration / (total - 1) if total > 1 else 1.0
    upper = cfg.sigma_max - (cfg.sigma_max - cfg.sigma_min) * np.sqrt(frac)
    return cfg.sigma_min, float(max(upper, cfg.sigma_min))


def anneal_sigma(iteration: int, total: int, cfg: SdsConfig, rng: np.random.Generator) -> float:
    lo, hi = sigma_bounds(iteration, total, cfg)
    return float(rng.uniform(lo, hi))


def alternate_mode(iteration: int, rng: np.random.Generator, temporal_available: bool = True) -> str:
    """Coin flip between the two clip kinds; multi-view only when no temporal field exists."""
    if not temporal_available:
        return MULTI_VIEW
    return TEMPORAL if rng.random() < 0.5 else MULTI_VIEW


def clip_backward(clip: VideoClip, d_frames: np.ndarray) -> list[RenderGrads | None]:
    """Render gradients per frame (``None`` where the frame gradient is zero)."""
    out = []
    for k in range(clip.num_frames):
        if not np.any(d_frames[k]):
            out.append(None)
            continue
        out.append(render_backward(clip.clouds[k], clip.poses[k], clip.background, d_frames[k],
                                   clip.contexts[k]))
    return out
