"""Photometric losses and deformation regularizers.

Every loss returns ``(value, grads)``: the scalar and the gradient with
respect to each of its direct inputs. Sums are normalised to means over
pixels, splats and frames so loss weights carry over between resolutions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import quat_mul, quat_mul_vjp, quat_conjugate, quat_to_rotmat, rotmat_vjp
from .scene import DeformationOffsets

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _pixels(img) -> np.ndarray:
    return np.asarray(getattr(img, "pixels", img), dtype=np.float64)


def l1_recon(rendered, target) -> tuple[float, np.ndarray]:
    r, t = _pixels(rendered), _pixels(target)
    if r.shape != t.shape:
        raise ValueError(f"image shapes differ: {r.shape} vs {t.shape}")
    diff = r - t
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def _gauss_window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


_WINDOW = _gauss_window()


def _blur(x: np.ndarray) -> np.ndarray:
    # zero padding, separable; the kernel is symmetric so this operator is self-adjoint
    y = correlate1d(x, _WINDOW, axis=0, mode="constant")
    return correlate1d(y, _WINDOW, axis=1, mode="constant")


def ssim(a, b) -> tuple[float, np.ndarray]:
    """Mean SSIM over pixels and channels, with its gradient with respect to ``a``."""
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    mu_a, mu_b = _blur(a), _blur(b)
    e_aa, e_bb, e_ab = _blur(a * a), _blur(b * b), _blur(a * b)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    n1 = 2 * mu_a * mu_b + SSIM_C1
    n2 = 2 * cov + SSIM_C2
    d1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    d2 = var_a + var_b + SSIM_C2
    smap = (n1 * n2) / (d1 * d2)
    g = 1.0 / smap.size
    d_mu = g * smap * (2 * mu_b / n1 - 2 * mu_b / n2 - 2 * mu_a / d1 + 2 * mu_a / d2)
    d_eaa = -g * smap / d2
    d_eab = g * smap * 2 / n2
    grad = _blur(d_mu) + 2 * a * _blur(d_eaa) + b * _blur(d_eab)
    return float(np.mean(smap)), grad


def align_loss(rendered, target, ssim_weight: float = 0.2) -> tuple[float, np.ndarray]:
    """``(1 - w) * L1 + w * (1 - SSIM)``."""
    l1, g1 = l1_recon(rendered, target)
    s, gs = ssim(rendered, target)
    return (1 - ssim_weight) * l1 + ssim_weight * (1 - s), (1 - ssim_weight) * g1 - ssim_weight * gs


def _as_list(off) -> list[DeformationOffsets]:
    return [off] if isinstance(off, DeformationOffsets) else list(off)


def small_motion(off, include_scale: bool = True) -> tuple[float, list[DeformationOffsets]]:
    """Sum over frames of the per-coordinate mean |dx| + mean |dq| (+ mean |ds|)."""
    total = 0.0
    grads = []
    for o in _as_list(off):
        total += np.mean(np.abs(o.dx)) + np.mean(np.abs(o.dq))
        gs = np.zeros_like(o.ds)
        if include_scale:
            total += np.mean(np.abs(o.ds))
            gs = np.sign(o.ds) / o.ds.size
        grads.append(DeformationOffsets(np.sign(o.dx) / o.dx.size, np.sign(o.dq) / o.dq.size, gs, o.frame_tag))
    return float(total), grads


def norm_reg(off: DeformationOffsets) -> tuple[float, DeformationOffsets]:
    """``(1/N) sum_i |dx_i|_1 + |dq_i|_1 + |ds_i|_1``."""
    n = off.n
    value = (np.abs(off.dx).sum() + np.abs(off.dq).sum() + np.abs(off.ds).sum()) / n
    grad = DeformationOffsets(np.sign(off.dx) / n, np.sign(off.dq) / n, np.sign(off.ds) / n, off.frame_tag)
    return float(value), grad


def diff_reg(off_t: DeformationOffsets, off_tm1: DeformationOffsets) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Mean Euclidean norm of consecutive position offsets; grads on ``(dx_t, dx_tm1)``."""
    if off_t.n != off_tm1.n:
        raise ValueError(f"splat counts differ: {off_t.n} vs {off_tm1.n}")
    d = off_t.dx - off_tm1.dx
    norm = np.linalg.norm(d, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    g = np.where(norm[:, None] > 0, d / safe[:, None], 0.0) / off_t.n
    return float(norm.mean()), (g, -g)


@dataclass
class KnnGraph:
    neighbor_indices: np.ndarray   # (N, k)
    weights: np.ndarray            # (N, k)
    lambda_w: float
    k: int


def build_knn(positions: np.ndarray, k: int, lambda_w: float, chunk: int = 1024) -> KnnGraph:
    """Exact k nearest neighbours (self excluded, ties to the lower index)."""
    x = np.asarray(positions, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or n <= k:
        raise ValueError(f"need N > k >= 1, got N={n}, k={k}")
    idx = np.empty((n, k), dtype=np.int64)
    dist2 = np.empty((n, k))
    sq = np.sum(x * x, axis=1)
    for start in range(0, n, chunk):
        rows = np.arange(start, min(start + chunk, n))
        d2 = np.sum((x[rows, None, :] - x[None, :, :]) ** 2, axis=2) if n <= 4096 else (
            sq[rows, None] + sq[None, :] - 2 * x[rows] @ x.T)
        d2[np.arange(rows.size), rows] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        idx[rows] = order
        dist2[rows] = np.take_along_axis(d2, order, axis=1)
    dist2 = np.maximum(dist2, 0.0)
    return KnnGraph(idx, np.exp(-lambda_w * dist2), float(lambda_w), int(k))


def rigid_reg(g: KnnGraph, x_t, x_tm1, q_t, q_tm1):
    """Weighted as-rigid-as-possible residual over the kNN graph.

    The residual ``a - R_{i,t-1} R_{i,t}^T b`` is evaluated in the equivalent
    rotated form ``R_{i,t-1}^T a - R_{i,t}^T b`` (same norm), which is exactly
    zero for a static scene. Returns ``(value, (d_x_t, d_x_tm1, d_q_t, d_q_tm1))``.
    """
    x_t, x_tm1 = np.asarray(x_t, float), np.asarray(x_tm1, float)
    R_t = quat_to_rotmat(q_t)
    R_tm1 = quat_to_rotmat(q_tm1)
    n, k = g.neighbor_indices.shape
    i = np.repeat(np.arange(n), k)
    j = g.neighbor_indices.reshape(-1)
    w = g.weights.reshape(-1)
    a = x_tm1[j] - x_tm1[i]
    b = x_t[j] - x_t[i]
    r = np.einsum("pba,pb->pa", R_tm1[i], a) - np.einsum("pba,pb->pa", R_t[i], b)
    norm = np.linalg.norm(r, axis=1)
    scale = 1.0 / (k * n)
    value = scale * np.sum(w * norm)
    safe = np.where(norm > 0, norm, 1.0)
    u = np.where(norm[:, None] > 0, r / safe[:, None], 0.0) * (scale * w)[:, None]
    d_a = np.einsum("pab,pb->pa", R_tm1[i], u)
    d_b = -np.einsum("pab,pb->pa", R_t[i], u)
    d_x_tm1 = np.zeros_like(x_tm1)
    np.add.at(d_x_tm1, j, d_a)
    np.add.at(d_x_tm1, i, -d_a)
    d_x_t = np.zeros_like(x_t)
    np.add.at(d_x_t, j, d_b)
    np.add.at(d_x_t, i, -d_b)
    d_R_tm1 = np.zeros((n, 3, 3))
    d_R_t = np.zeros((n, 3, 3))
    np.add.at(d_R_tm1, i, a[:, :, None] * u[:, None, :])
    np.add.at(d_R_t, i, -b[:, :, None] * u[:, None, :])
    return float(value), (d_x_t, d_x_tm1, rotmat_vjp(q_t, d_R_t), rotmat_vjp(q_tm1, d_R_tm1))


def _normalize_with_norm(q):
    q = np.asarray(q, dtype=np.float64)
    nrm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(nrm <= 1e-12):
        raise ValueError("degenerate quaternion")
    return q / nrm, nrm


def rot_reg(g: KnnGraph, q_t, q_tm1):
    """Weighted disagreement of neighbouring relative rotations ``q_t q_{t-1}^{-1}``.

    ``q_t`` is flipped onto the hemisphere of ``q_{t-1}`` first. Returns
    ``(value, (d_q_t, d_q_tm1))``.
    """
    qt, nt = _normalize_with_norm(q_t)
    qp, np_ = _normalize_with_norm(q_tm1)
    sign = np.where(np.sum(qt * qp, axis=1, keepdims=True) < 0, -1.0, 1.0)
    qt_s = qt * sign
    conj_p = quat_conjugate(qp)                      # inverse of a unit quaternion
    rel = quat_mul(qt_s, conj_p)
    # an unchanged rotation has the identity as its relative rotation; pin it
    # so static splats contribute exactly zero instead of round-off
    rel[np.all(qt_s == qp, axis=1)] = (1.0, 0.0, 0.0, 0.0)
    n, k = g.neighbor_indices.shape
    i = np.repeat(np.arange(n), k)
    j = g.neighbor_indices.reshape(-1)
    w = g.weights.reshape(-1)
    r = rel[j] - rel[i]
    norm = np.linalg.norm(r, axis=1)
    scale = 1.0 / (k * n)
    value = scale * np.sum(w * norm)
    safe = np.where(norm > 0, norm, 1.0)
    u = np.where(norm[:, None] > 0, r / safe[:, None], 0.0) * (scale * w)[:, None]
    d_rel = np.zeros_like(rel)
    np.add.at(d_rel, j, u)
    np.add.at(d_rel, i, -u)
    d_qt_s, d_conj = quat_mul_vjp(qt_s, conj_p, d_rel)
    d_qt = d_qt_s * sign
    d_qp = quat_conjugate(d_conj)
    d_q_t = (d_qt - qt * np.sum(qt * d_qt, axis=1, keepdims=True)) / nt
    d_q_tm1 = (d_qp - qp * np.sum(qp * d_qp, axis=1, keepdims=True)) / np_
    return float(value), (d_q_t, d_q_tm1)
