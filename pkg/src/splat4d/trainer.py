"""Optimisation: Adam, learning-rate schedules and the two-phase stage plan.

The canonical phase fits the splat cloud to the freeze-time frames, with a
per-frame deformation field absorbing their inconsistencies. The motion
phase fits a temporal deformation field to the reference video, grows new
splats next to a frozen canonical cloud, then fine-tunes everything.

All randomness comes from named streams derived from one root seed, so an
ablation that changes one stream (say, SDS) leaves the others untouched.
"""
from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import deformnet
from .camera import CameraPose, PoseDelta, apply_pose_delta, pose_delta_vjp, scene_extent
from .config import LrConfig, RunConfig
from .densify import (DensifyConfig, GradStats, accumulate, densify_and_prune, motion_growth_pass, remap_frozen,
                      remap_rows, seed_new_splats)
from .losses import align_loss, build_knn, diff_reg, norm_reg, rigid_reg, rot_reg, small_motion
from .metrics import psnr
from .rasterizer import rasterize, render, render_backward
from .scene import GaussianCloud, DeformationOffsets, apply_offsets, logit
from .sds import (MULTI_VIEW, TEMPORAL, Denoiser, GroundTruthDenoiser, alternate_mode, anneal_sigma,
                  clip_backward, make_lowres_transform, sample_multiview_clip, sample_temporal_clip, sds_loss)

GS_PARAMS = ("positions", "raw_rotations", "log_scales", "opacity_logits", "colors")
GS_GROUP = {"positions": "position", "raw_rotations": "scale_rot", "log_scales": "scale_rot",
            "opacity_logits": "opacity", "colors": "color"}
CHECKPOINT_TAG = "splat4d.checkpoint"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: dict[str, int] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def remap(self, name: str, report) -> None:
        if name in self.m:
            self.m[name] = remap_rows(self.m[name], report)
            self.v[name] = remap_rows(self.v[name], report)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float | dict[str, float], masks: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update of every array in ``grads``.

    ``masks`` optionally restricts an update to the rows marked True; other
    rows keep their value and their moments. Returns the new parameter dict
    (arrays without a gradient are passed through).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter group '{name}'")
    out = dict(params)
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter '{name}' {p.shape}")
        m = state.m.get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        elif m.shape != p.shape:
            raise ValueError(f"optimizer state for '{name}' is misaligned: {m.shape} vs {p.shape}")
        else:
            v = state.v[name]
        t = state.step.get(name, 0) + 1
        rate = lr[name] if isinstance(lr, dict) else lr
        m_new = b1 * m + (1 - b1) * g
        v_new = b2 * v + (1 - b2) * g * g
        m_hat = m_new / (1 - b1**t)
        v_hat = v_new / (1 - b2**t)
        p_new = p - rate * m_hat / (np.sqrt(v_hat) + state.eps)
        mask = None if masks is None else masks.get(name)
        if mask is not None:
            keep = ~np.asarray(mask, bool)
            m_new[keep], v_new[keep], p_new[keep] = m[keep], v[keep], p[keep]
        state.m[name], state.v[name], state.step[name] = m_new, v_new, t
        out[name] = p_new
    return out


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


def _exp_decay(a: float, b: float, s: float) -> float:
    if s <= 0.0:
        return float(a)
    if s >= 1.0:
        return float(b)
    return float(np.exp((1 - s) * np.log(a) + s * np.log(b)))


def lr_schedule(group: str, iteration: int, total: int, cfg: LrConfig | None = None) -> float:
    """Learning rate of a parameter group ``iteration`` steps into a span of ``total``."""
    cfg = cfg or LrConfig()
    if total <= 0 or not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    s = iteration / total
    if group == "position":
        return _exp_decay(cfg.position_init, cfg.position_final, s)
    if group == "deform":
        return _exp_decay(cfg.deform_init, cfg.deform_final, s)
    if group == "scale_rot":
        return cfg.scale_rot
    if group == "pose":
        return cfg.pose
    if group == "opacity":
        return cfg.opacity
    if group == "color":
        return cfg.color
    raise ValueError(f"unknown parameter group {group!r}")


# ---------------------------------------------------------------- stage plan


class TrainingComplete(RuntimeError):
    """Raised when asked for a stage past the end of the plan."""


@dataclass(frozen=True)
class StageFlags:
    name: str
    phase: str                       # "canonical" or "motion"
    start: int
    end: int
    optimize_gs: bool
    optimize_perframe_field: bool
    optimize_temporal_field: bool
    growth_enabled: bool
    multiview_sds: bool
    temporal_sds: bool
    frozen_canonical: bool
    data: str                        # "freeze", "reference" or "both"


@dataclass
class StagePlan:
    boundaries: tuple = (3000, 15000, 20000, 30000, 35000, 40000)
    scale: float = 1.0

    def points(self) -> tuple[int, ...]:
        return tuple(int(round(b * self.scale)) for b in self.boundaries)

    @property
    def total(self) -> int:
        return self.points()[-1]

    @property
    def canonical_end(self) -> int:
        return self.points()[2]


def plan_stage(iteration: int, plan: StagePlan) -> StageFlags:
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    warm, grow_end, canon_end, fit_end, growth_end, total = plan.points()
    if iteration >= total:
        raise TrainingComplete("training complete")
    if iteration < warm:
        return StageFlags("warmup", "canonical", 0, warm, True, False, False, True, False, False, False, "freeze")
    if iteration < canon_end:
        return StageFlags("perframe", "canonical", warm, canon_end, True, True, False, iteration < grow_end,
                          iteration >= grow_end, False, False, "freeze")
    if iteration < fit_end:
        return StageFlags("motion_fit", "motion", canon_end, fit_end, False, False, True, False, False, False, True,
                          "reference")
    if iteration < growth_end:
        return StageFlags("motion_growth", "motion", fit_end, growth_end, True, False, True, True, False, False,
                          True, "reference")
    return StageFlags("joint", "motion", growth_end, total, True, False, True, False, True, True, False, "both")


# ---------------------------------------------------------------- helpers


def named_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def init_cloud(points: np.ndarray, colors: np.ndarray, opacity: float = 0.1) -> GaussianCloud:
    """Isotropic splats sized by the mean distance to their three nearest neighbours."""
    from scipy.spatial import cKDTree

    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    k = min(4, n)
    d, _ = cKDTree(pts).query(pts, k=k)
    d2 = np.maximum(np.mean(np.asarray(d).reshape(n, k)[:, 1:] ** 2, axis=1), 1e-7) if k > 1 else np.full(n, 1e-2)
    log_s = np.repeat(np.log(np.sqrt(d2))[:, None], 3, axis=1)
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianCloud(pts, rot, log_s, np.full(n, float(logit(np.array(opacity)))),
                         np.clip(np.asarray(colors, dtype=np.float64), 0.0, 1.0))


def make_denoiser(spec: str, cfg: RunConfig) -> Denoiser | None:
    from .sds import BlurDenoiser, IdentityDenoiser

    h, w = cfg.sds.lowres
    M = cfg.sds.num_frames
    if spec == "none":
        return None
    if spec == "identity":
        return IdentityDenoiser(h, w, M)
    if spec == "blur":
        return BlurDenoiser(h, w, M)
    if spec == "gt":
        return GroundTruthDenoiser(np.zeros((M, h, w, 3)))
    if spec.startswith("remote:"):
        from .remote import RemoteDenoiser

        return RemoteDenoiser(spec[len("remote:"):], h, w, M)
    raise ValueError(f"unknown denoiser {spec!r}")


# ---------------------------------------------------------------- trainer


@dataclass
class TrainState:
    iteration: int
    cloud: GaussianCloud
    frozen: np.ndarray
    pose_deltas: np.ndarray
    adam: AdamState
    stats: GradStats
    perframe: deformnet.MlpField | None = None
    temporal: deformnet.MlpField | None = None
    knn: object = None
    rngs: dict = field(default_factory=dict)


class Trainer:
    """Owns the mutable training state and advances it one iteration at a time."""

    def __init__(self, dataset, config: RunConfig, cloud: GaussianCloud | None = None,
                 state: TrainState | None = None, denoiser: Denoiser | None = None, gt_scene=None):
        self.ds = dataset
        self.cfg = config
        self.plan = StagePlan(config.plan.boundaries, config.plan.scale)
        self.extent = scene_extent(dataset.freeze_poses)
        self.dataset_bg = np.asarray(dataset.background, dtype=np.float64)
        self.bg = self.dataset_bg
        radius = config.sds.pose_radius
        self.sds_cfg = replace(config.sds, pose_radius=0.15 * self.extent if radius is None else radius)
        self.denoiser = denoiser
        self.gt_scene = gt_scene
        if state is None:
            if cloud is None:
                raise ValueError("need an initial cloud or a saved state")
            state = self._fresh_state(cloud)
        self.state = state

    # ---- construction

    def _fresh_state(self, cloud: GaussianCloud) -> TrainState:
        cfg = self.cfg
        seed = cfg.seed
        rngs = {name: named_rng(seed, name) for name in ("data", "sds", "init", "densify")}
        perframe = None
        if cfg.ablation.perframe_deformation:
            m = cfg.model
            perframe = deformnet.make_field(
                "perframe", rngs["init"], num_frames=self.ds.num_freeze, code_dim=m.code_dim,
                canonical=self.ds.canonical_frame, pos_freqs=m.pos_freqs, cond_freqs=m.code_freqs,
                depth=m.depth, width=m.width, skip=m.skip)
        return TrainState(0, cloud.copy(), np.zeros(cloud.n, bool), np.zeros((self.ds.num_freeze, 6)),
                          AdamState(), GradStats.zeros(cloud.n), perframe, None, None, rngs)

    def start_motion(self) -> None:
        """Create the temporal field and the kNN graph; called once at the canonical/motion boundary."""
        st = self.state
        if st.temporal is not None:
            return
        m = self.cfg.model
        st.temporal = deformnet.make_field("temporal", st.rngs["init"], canonical=0.0, pos_freqs=m.pos_freqs,
                                           cond_freqs=m.time_freqs, depth=m.depth, width=m.width, skip=m.skip)
        st.frozen = np.ones(st.cloud.n, bool)
        st.stats = GradStats.zeros(st.cloud.n)
        self._rebuild_knn()

    def _rebuild_knn(self) -> None:
        st = self.state
        lam = self.cfg.loss.knn_lambda
        if lam is None:
            lam = 2000.0 / self.extent**2
        k = min(self.cfg.loss.knn_k, st.cloud.n - 1)
        st.knn = build_knn(st.cloud.positions, k, lam) if k >= 1 else None

    # ---- learning rates

    def learning_rates(self, flags: StageFlags) -> dict[str, float]:
        lrc = self.cfg.lr
        it = self.state.iteration
        canon_end = self.plan.canonical_end
        if flags.phase == "canonical":
            span_start, span = 0, canon_end
        else:
            span_start, span = canon_end, self.plan.total - canon_end
        rel = min(it - span_start, span)
        lrs = {g: lr_schedule(g, rel, max(span, 1), lrc) for g in ("position", "scale_rot", "opacity", "color", "pose")}
        if lrc.position_extent_scale:
            lrs["position"] *= self.extent
        # the per-frame field only trains from the end of warm-up
        if flags.phase == "canonical":
            warm = self.plan.points()[0]
            d_span = max(canon_end - warm, 1)
            lrs["deform"] = lr_schedule("deform", min(max(it - warm, 0), d_span), d_span, lrc)
        else:
            lrs["deform"] = lr_schedule("deform", rel, max(span, 1), lrc)
        return lrs

    # ---- one iteration

    def step(self) -> dict:
        st = self.state
        flags = plan_stage(st.iteration, self.plan)
        if flags.phase == "motion" and st.temporal is None:
            self.start_motion()
        if flags.name == "motion_growth" and st.iteration == flags.start:
            self._seed_growth()
        grads: dict[str, np.ndarray] = {}
        record: dict = {"iter": st.iteration, "stage": flags.name}
        if self.cfg.background == "random":
            self.bg = np.full(3, st.rngs["data"].random())

        source = self._pick_source(flags)
        if source[0] == "freeze":
            self._freeze_view(source[1], flags, grads, record)
        else:
            self._reference_view(source[1], flags, grads, record)

        if self.cfg.sds_enabled and self.denoiser is not None and (flags.multiview_sds or flags.temporal_sds):
            self._sds(flags, grads, record)

        total = sum(v for k, v in record.items() if k.startswith("loss_"))
        if not np.isfinite(total):
            raise FloatingPointError(f"non-finite loss at iteration {st.iteration}")
        record["loss_total"] = total
        lrs = self.learning_rates(flags)
        self._apply(grads, lrs, flags)

        if flags.growth_enabled and (st.iteration + 1 - flags.start) % self.cfg.densify.interval == 0:
            self._densify(flags)
        record.update({f"lr_{k}": v for k, v in sorted(lrs.items())})
        record["n_splats"] = st.cloud.n
        st.iteration += 1
        return record

    def _check_finite(self, value: float, where: str) -> None:
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at iteration {self.state.iteration} ({where})")

    def _pick_source(self, flags: StageFlags) -> tuple[str, int]:
        rng = self.state.rngs["data"]
        if flags.data == "both":
            kind = "freeze" if rng.random() < 0.5 else "reference"
        else:
            kind = flags.data
        if kind == "freeze":
            if not self.cfg.ablation.freeze_video:
                return "freeze", self.ds.canonical_frame
            return "freeze", int(rng.integers(self.ds.num_freeze))
        return "reference", int(rng.integers(len(self.ds.reference_times)))

    def _pose(self, k: int) -> tuple[CameraPose, PoseDelta]:
        delta = PoseDelta.from_vector(self.state.pose_deltas[k])
        return apply_pose_delta(self.ds.freeze_poses[k], delta), delta

    def _add(self, grads: dict, name: str, g: np.ndarray) -> None:
        grads[name] = grads[name] + g if name in grads else np.array(g, dtype=np.float64)

    def _add_cloud(self, grads: dict, rg, scale: float = 1.0) -> None:
        for name, g in rg.cloud_grads().items():
            self._add(grads, "gs." + name, scale * g if scale != 1.0 else g)

    def _add_field(self, grads: dict, prefix: str, d_w: dict) -> None:
        for name, g in d_w.items():
            self._add(grads, f"{prefix}.{name}", g)

    def _field_back(self, prefix: str, cond, d_off: DeformationOffsets, cache, grads: dict,
                    flags: StageFlags) -> None:
        """Field weight gradients; positions receive the input-path gradient only when fine-tuning jointly."""
        fld = getattr(self.state, prefix)
        d_w, d_pos, _ = deformnet.field_backward(fld, self.state.cloud.positions, cond, d_off, cache)
        self._add_field(grads, prefix, d_w)
        if flags.name == "joint" and flags.optimize_gs:
            self._add(grads, "gs.positions", d_pos)

    def _freeze_view(self, k: int, flags: StageFlags, grads: dict, record: dict) -> None:
        st, cfg = self.state, self.cfg
        pose, delta = self._pose(k)
        cloud = st.cloud
        off, cache = None, None
        if st.perframe is not None and flags.name != "warmup" and k != self.ds.canonical_frame:
            off, cache = deformnet.evaluate(st.perframe, cloud.positions, k)
            cloud = apply_offsets(cloud, off)
        img, ctx = rasterize(cloud, pose, self.bg)
        value, d_img = align_loss(img, self.ds.freeze_frames[k], cfg.loss.ssim_weight)
        self._check_finite(value, f"freeze frame {k}")
        record["loss_recon"] = cfg.loss.recon * value
        rg = render_backward(cloud, pose, self.bg, cfg.loss.recon * d_img, ctx)
        if flags.optimize_gs:
            self._add_cloud(grads, rg)
        if flags.growth_enabled or flags.name == "motion_fit":
            st.stats = accumulate(st.stats, rg, ctx.radii)
        if flags.phase == "canonical" and cfg.ablation.optimize_poses and k != self.ds.canonical_frame:
            d_delta = pose_delta_vjp(self.ds.freeze_poses[k], delta, rg.d_rotation_matrix, rg.d_translation)
            g = np.zeros_like(st.pose_deltas)
            g[k] = d_delta
            self._add(grads, "pose", g)
        if off is not None and flags.optimize_perframe_field:
            d_off = DeformationOffsets(rg.d_positions, rg.d_raw_rotations, rg.d_log_scales, k)
            if cfg.ablation.small_motion and cfg.loss.small_motion > 0:
                v, (g_sm,) = small_motion(off, cfg.loss.small_motion_include_scale)
                record["loss_small_motion"] = cfg.loss.small_motion * v
                d_off = d_off + g_sm.scaled(cfg.loss.small_motion)
            self._field_back("perframe", k, d_off, cache, grads, flags)

    def _temporal_offsets(self, t: float):
        st = self.state
        return deformnet.evaluate(st.temporal, st.cloud.positions, t)

    def _reference_view(self, i: int, flags: StageFlags, grads: dict, record: dict) -> None:
        st, cfg = self.state, self.cfg
        t = float(self.ds.reference_times[i])
        off, cache = self._temporal_offsets(t)
        cloud = apply_offsets(st.cloud, off) if cache is not None else st.cloud
        pose = self.ds.reference_pose
        img, ctx = rasterize(cloud, pose, self.bg)
        value, d_img = align_loss(img, self.ds.reference_frames[i], cfg.loss.ssim_weight)
        self._check_finite(value, f"reference frame {i}")
        record["loss_align"] = cfg.loss.recon * value
        rg = render_backward(cloud, pose, self.bg, cfg.loss.recon * d_img, ctx)
        if flags.growth_enabled or flags.name == "motion_fit":
            st.stats = accumulate(st.stats, rg, ctx.radii)
        d_cloud = {n: g.copy() for n, g in rg.cloud_grads().items()}
        d_off_t = DeformationOffsets(rg.d_positions.copy(), rg.d_raw_rotations.copy(), rg.d_log_scales.copy(), t)
        d_off_prev, cache_p = None, None
        if cache is not None:
            lc = cfg.loss
            v, g = norm_reg(off)
            record["loss_norm"] = lc.norm * v
            d_off_t = d_off_t + g.scaled(lc.norm)
            if i > 0:
                t_prev = float(self.ds.reference_times[i - 1])
                off_p, cache_p = self._temporal_offsets(t_prev)
                d_off_prev = DeformationOffsets.zeros(st.cloud.n, t_prev)
                v, (gt_, gp_) = diff_reg(off, off_p)
                record["loss_diff"] = lc.diff * v
                d_off_t.dx += lc.diff * gt_
                d_off_prev.dx += lc.diff * gp_
                if st.knn is not None and (lc.rigid > 0 or lc.rot > 0):
                    x_t, x_p = st.cloud.positions + off.dx, st.cloud.positions + off_p.dx
                    q_t, q_p = st.cloud.raw_rotations + off.dq, st.cloud.raw_rotations + off_p.dq
                    v, (dxt, dxp, dqt, dqp) = rigid_reg(st.knn, x_t, x_p, q_t, q_p)
                    record["loss_rigid"] = lc.rigid * v
                    v2, (dqt2, dqp2) = rot_reg(st.knn, q_t, q_p)
                    record["loss_rot"] = lc.rot * v2
                    d_off_t.dx += lc.rigid * dxt
                    d_off_t.dq += lc.rigid * dqt + lc.rot * dqt2
                    d_off_prev.dx += lc.rigid * dxp
                    d_off_prev.dq += lc.rigid * dqp + lc.rot * dqp2
                    d_cloud["positions"] += lc.rigid * (dxt + dxp)
                    d_cloud["raw_rotations"] += lc.rigid * (dqt + dqp) + lc.rot * (dqt2 + dqp2)
            if flags.optimize_temporal_field:
                self._field_back("temporal", t, d_off_t, cache, grads, flags)
                if d_off_prev is not None and cache_p is not None:
                    self._field_back("temporal", t_prev, d_off_prev, cache_p, grads, flags)
        if flags.optimize_gs:
            for name, g in d_cloud.items():
                self._add(grads, "gs." + name, g)

    # ---- SDS

    def _sds(self, flags: StageFlags, grads: dict, record: dict) -> None:
        st, cfg = self.state, self.cfg
        rng = st.rngs["sds"]
        scfg = self.sds_cfg
        mode = alternate_mode(st.iteration, rng, temporal_available=flags.temporal_sds)
        sds_start = self.plan.points()[1] if flags.phase == "canonical" else flags.start
        sds_total = flags.end - sds_start
        sigma = anneal_sigma(st.iteration - sds_start, sds_total, scfg, rng)
        field_offsets = None
        if mode == MULTI_VIEW:
            if flags.phase == "canonical":
                cloud, cond = st.cloud, self.ds.freeze_frames[self.ds.canonical_frame]
                canon_pose, t = self.ds.freeze_poses[self.ds.canonical_frame], 0.0
            else:
                i = int(rng.integers(len(self.ds.reference_times)))
                t = float(self.ds.reference_times[i])
                field_offsets = self._temporal_offsets(t)
                cloud = apply_offsets(st.cloud, field_offsets[0]) if field_offsets[1] is not None else st.cloud
                cond, canon_pose = self.ds.reference_frames[i], self.ds.reference_pose
            clip = sample_multiview_clip(cloud, self.ds.freeze_poses, canon_pose, scfg, rng, self.bg,
                                         exclude=self.ds.canonical_frame)
            clip.times = np.full(clip.num_frames, t)
            weight = scfg.weight_multi_view
        else:
            clip = sample_temporal_clip(st.cloud, st.temporal, self.ds.reference_pose, scfg, rng, self.bg)
            cond = self.ds.reference_frames[0]
            weight = scfg.weight_temporal
        S = scfg.render_scale(clip.frames.shape[1])
        tf = make_lowres_transform(clip.frames.shape[1:3], scfg.lowres, S, rng)
        low = tf.apply(clip.frames)
        if isinstance(self.denoiser, GroundTruthDenoiser) and self.gt_scene is not None:
            self.denoiser.targets = tf.apply(self._gt_clip(clip))
        from .sds import VideoClip

        value, d_low = sds_loss(VideoClip(low, clip.condition_index, clip.poses, clip.times),
                                tf.apply(cond[None])[0], self.denoiser, sigma, rng)
        self._check_finite(value, f"{mode} SDS")
        record[f"loss_sds_{mode}"] = weight * value
        record["sds_sigma"] = sigma
        d_hi = tf.vjp(weight * d_low)
        for k, rg in enumerate(clip_backward(clip, d_hi)):
            if rg is None:
                continue
            if flags.optimize_gs:
                self._add_cloud(grads, rg)
            off = field_offsets if mode == MULTI_VIEW else clip.offsets[k]
            if flags.optimize_temporal_field and off is not None and off[1] is not None:
                d_off = DeformationOffsets(rg.d_positions, rg.d_raw_rotations, rg.d_log_scales, 0)
                self._field_back("temporal", off[0].frame_tag, d_off, off[1], grads, flags)

    def _gt_clip(self, clip) -> np.ndarray:
        from .oracle import cloud_at

        return np.stack([render(cloud_at(self.gt_scene, t), p, self.bg).pixels for p, t in zip(clip.poses, clip.times)])

    # ---- parameter update

    def _group_of(self, name: str) -> str:
        if name.startswith("gs."):
            return GS_GROUP[name[3:]]
        if name == "pose":
            return "pose"
        return "deform"

    def _apply(self, grads: dict, lrs: dict, flags: StageFlags) -> None:
        st, cfg = self.state, self.cfg
        by_group: dict[str, dict] = {}
        for name, g in grads.items():
            by_group.setdefault(self._group_of(name), {})[name] = g
        clipped = {}
        for group in sorted(by_group):
            clipped.update(clip_by_global_norm(by_group[group], cfg.lr.clip_norm))
        params: dict[str, np.ndarray] = {}
        masks: dict[str, np.ndarray] = {}
        for name in GS_PARAMS:
            params["gs." + name] = getattr(st.cloud, name)
            if flags.frozen_canonical:
                masks["gs." + name] = ~st.frozen
        params["pose"] = st.pose_deltas
        pose_mask = np.ones(self.ds.num_freeze, bool)
        pose_mask[self.ds.canonical_frame] = False
        masks["pose"] = pose_mask
        for prefix, fld in (("perframe", st.perframe), ("temporal", st.temporal)):
            if fld is not None:
                for k, v in fld.weights.items():
                    params[f"{prefix}.{k}"] = v
        lr = {name: lrs[self._group_of(name)] for name in clipped}
        new = adam_step(params, {k: clipped[k] for k in sorted(clipped)}, st.adam, lr, masks)
        st.cloud = GaussianCloud(*(new["gs." + n] for n in GS_PARAMS))
        st.pose_deltas = new["pose"]
        for prefix, fld in (("perframe", st.perframe), ("temporal", st.temporal)):
            if fld is not None:
                for k in fld.weights:
                    fld.weights[k] = new[f"{prefix}.{k}"]

    # ---- densification

    def _dcfg(self, tau_alpha: float) -> DensifyConfig:
        d = self.cfg.densify
        return DensifyConfig(tau_alpha, d.tau_grad, d.split_factor, self.extent, d.interval, d.percent_dense)

    def _remap(self, report) -> None:
        st = self.state
        for name in GS_PARAMS:
            st.adam.remap("gs." + name, report)
        st.frozen = remap_frozen(st.frozen, report)
        st.stats = GradStats.zeros(st.cloud.n)
        for name in GS_PARAMS:
            if "gs." + name in st.adam.m:
                assert st.adam.m["gs." + name].shape[0] == st.cloud.n
        if st.temporal is not None:
            self._rebuild_knn()

    def _densify(self, flags: StageFlags) -> None:
        st = self.state
        rng = st.rngs["densify"]
        if flags.phase == "canonical":
            st.cloud, report = densify_and_prune(st.cloud, st.stats, self._dcfg(self.cfg.densify.tau_alpha),
                                                 st.frozen, rng)
        else:
            st.cloud, report = motion_growth_pass(st.cloud, st.stats, st.frozen,
                                                  self._dcfg(self.cfg.densify.tau_alpha_motion), rng)
        self._remap(report)

    def _seed_growth(self) -> None:
        st = self.state
        st.cloud, report = seed_new_splats(st.cloud, st.stats, st.frozen, self._dcfg(self.cfg.densify.tau_alpha_motion),
                                           st.rngs["densify"])
        self._remap(report)

    # ---- driving

    def run(self, until: int, metrics_path: str | Path | None = None, checkpoint_path: str | Path | None = None,
            checkpoint_every: int = 0, callback=None) -> list[dict]:
        records = []
        fh = open(metrics_path, "a") if metrics_path else None
        try:
            while self.state.iteration < until:
                rec = self.step()
                records.append(rec)
                if fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    fh.flush()
                if callback:
                    callback(self, rec)
                if checkpoint_path and checkpoint_every and self.state.iteration % checkpoint_every == 0:
                    save_checkpoint(self, checkpoint_path)
        finally:
            if fh:
                fh.close()
        if checkpoint_path:
            save_checkpoint(self, checkpoint_path)
        return records

    # ---- evaluation

    def render_canonical(self, pose: CameraPose) -> np.ndarray:
        return render(self.state.cloud, pose, self.bg).pixels

    def render_at(self, pose: CameraPose, t: float) -> np.ndarray:
        return render(deformed_cloud(self.state, t), pose, self.bg).pixels

    def heldout_psnr(self) -> list[float]:
        return [psnr(self.render_canonical(p), img) for p, img in zip(self.ds.heldout_poses, self.ds.heldout_frames)]

    def reference_psnr(self) -> list[float]:
        return [psnr(self.render_at(self.ds.reference_pose, t), img)
                for t, img in zip(self.ds.reference_times, self.ds.reference_frames)]

    def mean_perframe_offset(self) -> float:
        """Mean absolute per-frame offset (position, rotation, scale) over non-canonical frames."""
        st = self.state
        if st.perframe is None:
            return 0.0
        vals = []
        for k in range(self.ds.num_freeze):
            if k == self.ds.canonical_frame:
                continue
            off = deformnet.field_forward(st.perframe, st.cloud.positions, k)
            vals.append(np.mean(np.abs(np.concatenate([off.dx, off.dq, off.ds], axis=1))))
        return float(np.mean(vals))


def deformed_cloud(state: TrainState, t: float) -> GaussianCloud:
    """The cloud at time ``t``; the canonical cloud itself when no temporal field exists or ``t`` is canonical."""
    cloud = state.cloud
    if state.temporal is None:
        return cloud
    off = deformnet.field_forward(state.temporal, cloud.positions, t)
    if np.any(off.dx) or np.any(off.dq) or np.any(off.ds):
        cloud = apply_offsets(cloud, off)
    return cloud


def train_step(trainer: Trainer) -> dict:
    return trainer.step()


# ---------------------------------------------------------------- checkpoints


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def save_checkpoint(trainer: Trainer, path: str | Path) -> None:
    """Atomic ``.npz`` holding everything needed to resume bit-for-bit."""
    st = trainer.state
    arrays = {f"cloud.{n}": getattr(st.cloud, n) for n in GS_PARAMS}
    arrays["frozen"] = st.frozen
    arrays["pose_deltas"] = st.pose_deltas
    arrays["stats.accum"] = st.stats.accum_pos_grad_norm
    arrays["stats.counts"] = st.stats.counts
    arrays["stats.radius"] = st.stats.max_screen_radius
    meta = {
        "format_version": CHECKPOINT_VERSION, "iteration": st.iteration, "config": trainer.cfg.to_dict(),
        "rngs": {k: _rng_state(r) for k, r in st.rngs.items()}, "adam_steps": st.adam.step,
        "fields": [], "background": trainer.dataset_bg.tolist(),
    }
    for name in st.adam.m:
        arrays[f"adam.m.{name}"] = st.adam.m[name]
        arrays[f"adam.v.{name}"] = st.adam.v[name]
    for prefix, fld in (("perframe", st.perframe), ("temporal", st.temporal)):
        if fld is not None:
            meta["fields"].append(prefix)
            meta[f"{prefix}_arch"] = fld.arch()
            for k, v in fld.weights.items():
                arrays[f"{prefix}.{k}"] = v
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, __format__=np.array(CHECKPOINT_TAG), __meta__=np.array(json.dumps(meta)), **arrays)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[TrainState, dict]:
    with np.load(path) as z:
        data = {k: z[k] for k in z.files}
    if str(data.get("__format__")) != CHECKPOINT_TAG:
        raise ValueError(f"{path} is not a training checkpoint")
    meta = json.loads(str(data["__meta__"]))
    if meta["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta['format_version']}")
    cloud = GaussianCloud(*(np.array(data[f"cloud.{n}"]) for n in GS_PARAMS))
    adam = AdamState(step={k: int(v) for k, v in meta["adam_steps"].items()})
    for key, arr in data.items():
        if key.startswith("adam.m."):
            adam.m[key[7:]] = np.array(arr)
        elif key.startswith("adam.v."):
            adam.v[key[7:]] = np.array(arr)
    fields = {}
    for prefix in meta["fields"]:
        arrs = {k[len(prefix) + 1:]: v for k, v in data.items() if k.startswith(prefix + ".")}
        arrs["__format__"] = np.array(deformnet.FORMAT_TAG)
        arrs["__arch__"] = np.array(json.dumps(meta[f"{prefix}_arch"]))
        fields[prefix] = deformnet.field_from_arrays(arrs)
    stats = GradStats(np.array(data["stats.accum"]), np.array(data["stats.counts"]), np.array(data["stats.radius"]))
    state = TrainState(int(meta["iteration"]), cloud, np.array(data["frozen"]), np.array(data["pose_deltas"]), adam,
                       stats, fields.get("perframe"), fields.get("temporal"), None,
                       {k: _restore_rng(s) for k, s in meta["rngs"].items()})
    return state, meta


def resume_trainer(path: str | Path, dataset, config: RunConfig | None = None, denoiser=None, gt_scene=None) -> Trainer:
    state, meta = load_checkpoint(path)
    cfg = config or RunConfig.from_dict(meta["config"])
    tr = Trainer(dataset, cfg, state=state, denoiser=denoiser, gt_scene=gt_scene)
    if state.temporal is not None:
        tr._rebuild_knn()
    return tr
