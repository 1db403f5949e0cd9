"""Quaternion, rotation and positional-encoding helpers.

Quaternions are Hamilton, scalar-first ``(w, x, y, z)``. Every function
accepts a single quaternion of shape ``(4,)`` or a batch ``(..., 4)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_EPS_NORM = 1e-12


def _check_nonzero(norm: np.ndarray) -> None:
    if np.any(norm <= _EPS_NORM):
        raise ValueError("degenerate quaternion")


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    _check_nonzero(n)
    return q / n


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of the normalized quaternion; shape ``(..., 3, 3)``."""
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(R.shape[:-1] + (3, 3))


def rotmat_vjp(q: np.ndarray, d_R: np.ndarray) -> np.ndarray:
    """Pull a gradient on ``quat_to_rotmat(q)`` back onto the raw quaternion ``q``.

    Goes through the normalization, so the result is orthogonal to ``q``.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    _check_nonzero(norm)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    g = np.moveaxis(d_R, (-2, -1), (0, 1))  # (3, 3, ...)
    dw = 2 * (-z * g[0, 1] + y * g[0, 2] + z * g[1, 0] - x * g[1, 2] - y * g[2, 0] + x * g[2, 1])
    dx = 2 * (y * g[0, 1] + z * g[0, 2] + y * g[1, 0] - 2 * x * g[1, 1] - w * g[1, 2]
              + z * g[2, 0] + w * g[2, 1] - 2 * x * g[2, 2])
    dy = 2 * (-2 * y * g[0, 0] + x * g[0, 1] + w * g[0, 2] + x * g[1, 0] + z * g[1, 2]
              - w * g[2, 0] + z * g[2, 1] - 2 * y * g[2, 2])
    dz = 2 * (-2 * z * g[0, 0] - w * g[0, 1] + x * g[0, 2] + w * g[1, 0] - 2 * z * g[1, 1]
              + y * g[1, 2] + x * g[2, 0] + y * g[2, 1])
    d_qn = np.stack([dw, dx, dy, dz], axis=-1)
    return normalize_vjp(qn, norm, d_qn)


def normalize_vjp(qn: np.ndarray, norm: np.ndarray, d_qn: np.ndarray) -> np.ndarray:
    """Gradient through ``q / |q|`` given the normalized value and the norm."""
    return (d_qn - qn * np.sum(qn * d_qn, axis=-1, keepdims=True)) / norm


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_mul_vjp(a: np.ndarray, b: np.ndarray, d_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``quat_mul(a, b)`` with respect to ``a`` and ``b``."""
    # The product is bilinear: out = L(a) b = R(b) a.
    d_a = quat_mul(d_out, quat_conjugate(b))
    d_b = quat_mul(quat_conjugate(a), d_out)
    return d_a, d_b


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_inverse(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n2 = np.sum(q * q, axis=-1, keepdims=True)
    _check_nonzero(np.sqrt(n2))
    return quat_conjugate(q) / n2


def quat_from_axis_angle(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(theta/2)/theta, with its Taylor expansion near zero
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * omega], axis=-1)


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion with non-negative scalar part for a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    m = R.reshape(-1, 3, 3)
    out = np.empty((m.shape[0], 4))
    for i, r in enumerate(m):
        tr = np.trace(r)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
            q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif r[1, 1] > r[2, 2]:
            s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
            q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
            q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        out[i] = q if q[0] >= 0 else -q
    out /= np.linalg.norm(out, axis=-1, keepdims=True)
    return out.reshape(R.shape[:-2] + (4,))


def quat_slerp(q0: np.ndarray, q1: np.ndarray, s: float) -> np.ndarray:
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    d = float(np.dot(q0, q1))
    if d < 0:
        q1, d = -q1, -d
    if d > 1.0 - 1e-12:
        return quat_normalize((1 - s) * q0 + s * q1)
    theta = np.arccos(min(d, 1.0))
    return (np.sin((1 - s) * theta) * q0 + np.sin(s * theta) * q1) / np.sin(theta)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


def so3_exp_derivatives(omega: np.ndarray) -> np.ndarray:
    """``dExp(omega)/d omega_k`` for k = 0, 1, 2, stacked as ``(3, 3, 3)``."""
    omega = np.asarray(omega, dtype=np.float64)
    theta2 = float(omega @ omega)
    E = np.eye(3)
    if theta2 < 1e-16:
        return np.stack([skew(E[k]) for k in range(3)])
    R = so3_exp(omega)
    out = []
    for k in range(3):
        a = omega[k] * skew(omega) + skew(np.cross(omega, (E - R) @ E[k]))
        out.append(a / theta2 @ R)
    return np.stack(out)


@dataclass(frozen=True)
class PosEncConfig:
    num_frequencies: int = 10
    include_input: bool = True

    def out_dim(self, in_dim: int) -> int:
        return in_dim * (2 * self.num_frequencies + int(self.include_input))


def posenc(v: np.ndarray, cfg: PosEncConfig) -> np.ndarray:
    """Frequency encoding ``[v, sin(2^l pi v), cos(2^l pi v), ...]`` along the last axis."""
    v = np.asarray(v, dtype=np.float64)
    parts = [v] if cfg.include_input else []
    for level in range(cfg.num_frequencies):
        f = (2.0**level) * np.pi
        parts.append(np.sin(f * v))
        parts.append(np.cos(f * v))
    if not parts:
        return np.zeros(v.shape[:-1] + (0,))
    return np.concatenate(parts, axis=-1)


def posenc_vjp(v: np.ndarray, cfg: PosEncConfig, d_out: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    d = v.shape[-1]
    grad = np.zeros_like(v)
    col = 0
    if cfg.include_input:
        grad += d_out[..., :d]
        col = d
    for level in range(cfg.num_frequencies):
        f = (2.0**level) * np.pi
        grad += f * np.cos(f * v) * d_out[..., col:col + d]
        grad -= f * np.sin(f * v) * d_out[..., col + d:col + 2 * d]
        col += 2 * d
    return grad
