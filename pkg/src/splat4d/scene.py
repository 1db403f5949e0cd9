"""Canonical Gaussian cloud, deformation offsets and PLY interchange.

PLY layout (binary little-endian, one ``vertex`` element, all ``float``)::

    x y z                 position
    f_dc_0 f_dc_1 f_dc_2  colour as SH degree-0 coefficient, (rgb - 0.5) / 0.28209479177387814
    opacity               opacity logit
    scale_0 scale_1 scale_2   log scales
    rot_0 rot_1 rot_2 rot_3   raw quaternion (w, x, y, z)

The field names follow the files written by the reference 3DGS trainer, so
the export opens in the usual splat viewers. Reading accepts any extra
vertex properties and ignores them.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import quat_to_rotmat

SH_C0 = 0.28209479177387814


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianCloud:
    """N splats with unconstrained (optimizer-facing) parameters."""

    positions: np.ndarray        # (N, 3)
    raw_rotations: np.ndarray    # (N, 4), normalized at use sites
    log_scales: np.ndarray       # (N, 3)
    opacity_logits: np.ndarray   # (N,)
    colors: np.ndarray           # (N, 3)

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.raw_rotations = np.asarray(self.raw_rotations, dtype=np.float64).reshape(-1, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(-1, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(-1)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        if n < 1:
            raise ValueError("a cloud needs at least one splat")
        for name in ("raw_rotations", "log_scales", "opacity_logits", "colors"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")

    PARAM_NAMES = ("positions", "raw_rotations", "log_scales", "opacity_logits", "colors")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def copy(self) -> GaussianCloud:
        return GaussianCloud(**{k: v.copy() for k, v in self.arrays().items()})

    def take(self, index: np.ndarray) -> GaussianCloud:
        return GaussianCloud(**{k: v[index] for k, v in self.arrays().items()})

    @staticmethod
    def concat(clouds: list[GaussianCloud]) -> GaussianCloud:
        return GaussianCloud(**{
            k: np.concatenate([c.arrays()[k] for c in clouds]) for k in GaussianCloud.PARAM_NAMES
        })

    @classmethod
    def from_activated(cls, positions, rotations, scales, opacities, colors) -> GaussianCloud:
        return cls(positions, rotations, np.log(scales), logit(opacities), colors)


@dataclass
class DeformationOffsets:
    """Per-splat offsets for one frame index or time value."""

    dx: np.ndarray
    dq: np.ndarray
    ds: np.ndarray
    frame_tag: int | float = 0

    def __post_init__(self) -> None:
        self.dx = np.asarray(self.dx, dtype=np.float64).reshape(-1, 3)
        n = self.dx.shape[0]
        self.dq = np.asarray(self.dq, dtype=np.float64).reshape(n, 4)
        self.ds = np.asarray(self.ds, dtype=np.float64).reshape(n, 3)

    @property
    def n(self) -> int:
        return self.dx.shape[0]

    @classmethod
    def zeros(cls, n: int, frame_tag: int | float = 0) -> DeformationOffsets:
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), frame_tag)

    def scaled(self, k: float) -> DeformationOffsets:
        return replace(self, dx=self.dx * k, dq=self.dq * k, ds=self.ds * k)

    def __add__(self, other: DeformationOffsets) -> DeformationOffsets:
        return replace(self, dx=self.dx + other.dx, dq=self.dq + other.dq, ds=self.ds + other.ds)


def covariance(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``R diag(s)^2 R^T`` for one splat or a batch."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("scales must be positive")
    R = quat_to_rotmat(q)
    M = R * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def apply_offsets(cloud: GaussianCloud, off: DeformationOffsets) -> GaussianCloud:
    if off.n != cloud.n:
        raise ValueError(f"offsets cover {off.n} splats, cloud has {cloud.n}")
    return GaussianCloud(
        cloud.positions + off.dx,
        cloud.raw_rotations + off.dq,
        cloud.log_scales + off.ds,
        cloud.opacity_logits.copy(),
        cloud.colors.copy(),
    )


_PLY_FIELDS = (
    ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)

_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "<i2", "ushort": "<u2", "int": "<i4", "uint": "<u4",
    "float": "<f4", "double": "<f8", "int8": "i1", "uint8": "u1", "int16": "<i2",
    "uint16": "<u2", "int32": "<i4", "uint32": "<u4", "float32": "<f4", "float64": "<f8",
}


def write_ply(cloud: GaussianCloud, path: str | Path) -> None:
    dtype = np.dtype([(name, "<f4") for name in _PLY_FIELDS])
    data = np.empty(cloud.n, dtype=dtype)
    data["x"], data["y"], data["z"] = cloud.positions.T
    dc = (cloud.colors - 0.5) / SH_C0
    for i in range(3):
        data[f"f_dc_{i}"] = dc[:, i]
        data[f"scale_{i}"] = cloud.log_scales[:, i]
    for i in range(4):
        data[f"rot_{i}"] = cloud.raw_rotations[:, i]
    data["opacity"] = cloud.opacity_logits
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {cloud.n}"]
    header += [f"property float {name}" for name in _PLY_FIELDS]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def read_ply(path: str | Path) -> GaussianCloud:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        n = None
        props: list[tuple[str, str]] = []
        fmt = None
        in_vertex = False
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            tokens = line.decode("ascii").split()
            if not tokens:
                continue
            if tokens[0] == "end_header":
                break
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                in_vertex = tokens[1] == "vertex"
                if in_vertex:
                    n = int(tokens[2])
            elif tokens[0] == "property" and in_vertex:
                if tokens[1] == "list":
                    raise ValueError(f"{path}: list properties on vertices are not supported")
                props.append((tokens[2], _PLY_TYPES[tokens[1]]))
        if fmt != "binary_little_endian" or n is None:
            raise ValueError(f"{path}: expected a binary little-endian vertex element")
        data = np.frombuffer(fh.read(np.dtype(props).itemsize * n), dtype=np.dtype(props), count=n)
    col = lambda name: data[name].astype(np.float64)  # noqa: E731
    return GaussianCloud(
        positions=np.stack([col("x"), col("y"), col("z")], axis=1),
        raw_rotations=np.stack([col(f"rot_{i}") for i in range(4)], axis=1),
        log_scales=np.stack([col(f"scale_{i}") for i in range(3)], axis=1),
        opacity_logits=col("opacity"),
        colors=np.stack([col(f"f_dc_{i}") for i in range(3)], axis=1) * SH_C0 + 0.5,
    )
