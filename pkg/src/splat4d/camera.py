"""Pinhole cameras, pose refinement deltas and trajectory sampling.

Camera frame follows the OpenCV convention: x right, y down, z forward.
``rotation``/``translation`` map world points into the camera frame,
``X_cam = R X_world + t``.

Camera files are whitespace-separated text, one frame per line::

    # index qw qx qy qz tx ty tz fx fy cx cy width height
    0 1.0 0.0 0.0 0.0 0.0 0.0 3.5 80.0 80.0 48.0 32.0 96 64

Lines starting with ``#`` are comments. Floats are written with ``repr`` so
a file round-trips exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import (
    quat_from_axis_angle,
    quat_mul,
    quat_normalize,
    quat_slerp,
    quat_to_rotmat,
    rotmat_to_quat,
    so3_exp,
    so3_exp_derivatives,
)


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    fx: float = 100.0
    fy: float = 100.0
    cx: float = 50.0
    cy: float = 50.0
    width: int = 100
    height: int = 100

    def __post_init__(self) -> None:
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(4))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("camera must be at least 8x8 pixels")

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.translation

    def with_intrinsics_of(self, other: CameraPose) -> CameraPose:
        return replace(self, fx=other.fx, fy=other.fy, cx=other.cx, cy=other.cy,
                       width=other.width, height=other.height)

    def scaled(self, factor: float) -> CameraPose:
        """Same extrinsics, image resolution multiplied by ``factor``."""
        return replace(
            self, fx=self.fx * factor, fy=self.fy * factor, cx=self.cx * factor, cy=self.cy * factor,
            width=int(round(self.width * factor)), height=int(round(self.height * factor)),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CameraPose):
            return NotImplemented
        return (
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
            and (self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            == (other.fx, other.fy, other.cx, other.cy, other.width, other.height)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class PoseDelta:
    axis_angle: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dt: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "axis_angle", np.asarray(self.axis_angle, dtype=np.float64).reshape(3))
        object.__setattr__(self, "dt", np.asarray(self.dt, dtype=np.float64).reshape(3))
        if not np.linalg.norm(self.axis_angle) < np.pi:
            raise ValueError("pose delta rotation must be smaller than pi radians")

    @classmethod
    def from_vector(cls, v: np.ndarray) -> PoseDelta:
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3].copy(), v[3:6].copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.axis_angle, self.dt])

    def __neg__(self) -> PoseDelta:
        return PoseDelta(-np.asarray(self.axis_angle), -np.asarray(self.dt))


def look_at(center: np.ndarray, target: np.ndarray, down_hint=(0.0, -1.0, 0.0), **intrinsics) -> CameraPose:
    """Camera at ``center`` whose optical axis passes through ``target``."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    down = np.asarray(down_hint, dtype=np.float64)
    down = down - (down @ fwd) * fwd
    if np.linalg.norm(down) < 1e-9:
        raise ValueError("down hint is parallel to the viewing direction")
    down /= np.linalg.norm(down)
    right = np.cross(down, fwd)
    R = np.stack([right, down, fwd])
    return CameraPose(rotmat_to_quat(R), -R @ center, **intrinsics)


def project(point: np.ndarray, pose: CameraPose) -> tuple[np.ndarray, float]:
    Xc = pose.R @ np.asarray(point, dtype=np.float64) + pose.translation
    z = Xc[2]
    uv = np.array([pose.fx * Xc[0] / z + pose.cx, pose.fy * Xc[1] / z + pose.cy])
    return uv, float(z)


def default_target(pose: CameraPose) -> np.ndarray:
    """Point on the optical axis closest to the world origin (or 1 unit ahead)."""
    c = pose.center
    fwd = pose.R[2]
    depth = float(fwd @ (-c))
    return c + (depth if depth > 1e-6 else 1.0) * fwd


def perturb_pose(p: CameraPose, radius: float, rng: np.random.Generator,
                 target: np.ndarray | None = None) -> CameraPose:
    """Move the camera to a uniform point of a disk in its own image plane and re-aim."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    r = radius * np.sqrt(rng.random())
    phi = 2 * np.pi * rng.random()
    if radius == 0:
        return p
    if target is None:
        target = default_target(p)
    R = p.R
    center = p.center + r * np.cos(phi) * R[0] + r * np.sin(phi) * R[1]
    intr = dict(fx=p.fx, fy=p.fy, cx=p.cx, cy=p.cy, width=p.width, height=p.height)
    return look_at(center, target, down_hint=R[1], **intr)


def interpolate_trajectory(p0: CameraPose, p1: CameraPose, M: int) -> list[CameraPose]:
    if M < 2:
        raise ValueError("a trajectory needs M >= 2 poses")
    poses = [p0]
    same_rot = np.array_equal(p0.rotation, p1.rotation)
    for i in range(1, M - 1):
        s = i / (M - 1)
        q = p0.rotation.copy() if same_rot else quat_slerp(p0.rotation, p1.rotation, s)
        t = p0.translation + s * (p1.translation - p0.translation)
        poses.append(replace(p0, rotation=q, translation=t))
    poses.append(p1.with_intrinsics_of(p0))
    return poses


def apply_pose_delta(p: CameraPose, d: PoseDelta) -> CameraPose:
    """Left-compose the rotation with ``exp(axis_angle)`` and shift the translation."""
    q = quat_normalize(quat_mul(quat_from_axis_angle(d.axis_angle), p.rotation))
    return replace(p, rotation=q, translation=p.translation + np.asarray(d.dt))


def pose_delta_jacobian(p: CameraPose, d: PoseDelta) -> np.ndarray:
    """Jacobian of ``[vec(R'), t']`` (12 values, row-major R) with respect to ``[omega, dt]``."""
    dExp = so3_exp_derivatives(np.asarray(d.axis_angle))
    R0 = p.R
    J = np.zeros((12, 6))
    for k in range(3):
        J[:9, k] = (dExp[k] @ R0).reshape(9)
    J[9:, 3:] = np.eye(3)
    return J


def pose_delta_vjp(p: CameraPose, d: PoseDelta, d_R: np.ndarray, d_t: np.ndarray) -> np.ndarray:
    """Chain a gradient on the refined pose's ``(R, t)`` onto the 6-vector delta."""
    J = pose_delta_jacobian(p, d)
    return J.T @ np.concatenate([np.asarray(d_R).reshape(9), np.asarray(d_t)])


def pose_matrix(p: CameraPose) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = p.R
    T[:3, 3] = p.translation
    return T


def delta_rotation(d: PoseDelta) -> np.ndarray:
    return so3_exp(np.asarray(d.axis_angle))


def scene_extent(poses: list[CameraPose]) -> float:
    """Radius of the camera-centre bounding sphere, padded by 10%."""
    centers = np.stack([p.center for p in poses])
    mid = centers.mean(axis=0)
    return 1.1 * float(np.max(np.linalg.norm(centers - mid, axis=1)))


def write_cameras(poses: list[CameraPose], path: str | Path, indices: list[int] | None = None) -> None:
    if indices is None:
        indices = list(range(len(poses)))
    lines = ["# index qw qx qy qz tx ty tz fx fy cx cy width height"]
    for idx, p in zip(indices, poses):
        vals = [*p.rotation, *p.translation, p.fx, p.fy, p.cx, p.cy]
        lines.append(" ".join([str(idx)] + [repr(float(v)) for v in vals] + [str(p.width), str(p.height)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras(path: str | Path) -> tuple[list[int], list[CameraPose]]:
    indices, poses = [], []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) != 14:
            raise ValueError(f"{path}: expected 14 columns, got {len(tok)}")
        v = [float(x) for x in tok[1:12]]
        indices.append(int(tok[0]))
        poses.append(CameraPose(v[0:4], v[4:7], v[7], v[8], v[9], v[10], int(tok[12]), int(tok[13])))
    return indices, poses
