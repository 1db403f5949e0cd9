"""Tile-based EWA splatting with an exact, hand-written backward pass.

The forward pass follows the usual 3DGS recipe: each splat's covariance is
pushed through the perspective Jacobian to a 2D conic (plus a 0.3 px^2
low-pass), splats are sorted globally by camera depth, and each 16x16 tile
alpha-composites the splats whose 3-sigma footprint touches it. Pixel
centres sit at integer coordinates: pixel ``(row, col)`` is ``(u, v) = (col, row)``.

Numerical guards: opacity times falloff is clamped to 0.99 and the falloff
is cut to zero outside the 3-sigma ellipse. There is no early termination on
low transmittance, so the backward pass is the exact derivative of what the
forward computes (away from the two cut-offs).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

from .camera import CameraPose
from .geometry import quat_to_rotmat, rotmat_vjp, skew
from .scene import GaussianCloud, sigmoid

TILE = 16
LOWPASS = 0.3
ALPHA_MAX = 0.99
CUTOFF_POWER = -4.5  # 3 sigma: d^T Sigma^-1 d <= 9
# Falloff g(p) = exp(p) - e_c (1 + p - p_c), normalised to g(0) = 1, where p is
# the Gaussian exponent, p_c the 3-sigma contour and e_c = exp(p_c). Value and
# slope both vanish on the contour, so the image is C1 in every parameter
# instead of jumping where a hard cut would drop a pixel.
G_CUT = float(np.exp(CUTOFF_POWER))
G_NORM = 1.0 - G_CUT * (1.0 - CUTOFF_POWER)


def falloff(power: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tapered Gaussian falloff and its derivative with respect to the exponent."""
    inside = power >= CUTOFF_POWER
    e = np.exp(np.minimum(power, 0.0))
    g = np.where(inside, (e - G_CUT * (1.0 + power - CUTOFF_POWER)) / G_NORM, 0.0)
    dg = np.where(inside, (e - G_CUT) / G_NORM, 0.0)
    return g, dg
NEAR = 0.01


@dataclass
class Image:
    pixels: np.ndarray                  # (H, W, 3)
    background: np.ndarray              # (3,)
    alpha: np.ndarray | None = None     # (H, W) accumulated opacity

    @property
    def shape(self) -> tuple[int, ...]:
        return self.pixels.shape


@dataclass
class RenderGrads:
    d_positions: np.ndarray
    d_raw_rotations: np.ndarray
    d_log_scales: np.ndarray
    d_opacity_logits: np.ndarray
    d_colors: np.ndarray
    d_pose_delta: np.ndarray            # (6,) = (omega, dt) at a zero delta
    d_rotation_matrix: np.ndarray       # (3, 3) gradient on the world->camera rotation
    d_translation: np.ndarray           # (3,)
    d_means2d: np.ndarray               # (N, 2) pixel-space gradient
    image_size: tuple[int, int] = (0, 0)

    def cloud_grads(self) -> dict[str, np.ndarray]:
        return {
            "positions": self.d_positions,
            "raw_rotations": self.d_raw_rotations,
            "log_scales": self.d_log_scales,
            "opacity_logits": self.d_opacity_logits,
            "colors": self.d_colors,
        }


@dataclass
class _Projected:
    W: np.ndarray
    R: np.ndarray
    scales: np.ndarray
    M: np.ndarray
    Sigma: np.ndarray
    Xc: np.ndarray
    J: np.ndarray
    T: np.ndarray
    conic: np.ndarray       # (N, 3): A, B, C of [[A, B], [B, C]]
    mean2d: np.ndarray
    radius: np.ndarray
    valid: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray
    order: np.ndarray


@dataclass
class RenderContext:
    proj: _Projected
    tiles: list = field(default_factory=list)
    height: int = 0
    width: int = 0
    background: np.ndarray | None = None

    @property
    def radii(self) -> np.ndarray:
        return np.where(self.proj.valid, self.proj.radius, 0.0)


def _project(cloud: GaussianCloud, pose: CameraPose) -> _Projected:
    W = pose.R
    R = quat_to_rotmat(cloud.raw_rotations)
    s = cloud.scales
    M = R * s[:, None, :]
    Sigma = M @ np.swapaxes(M, 1, 2)
    Xc = cloud.positions @ W.T + pose.translation
    x, y, z = Xc.T
    zs = np.where(z > NEAR, z, 1.0)
    n = cloud.n
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = pose.fx / zs
    J[:, 0, 2] = -pose.fx * x / zs**2
    J[:, 1, 1] = pose.fy / zs
    J[:, 1, 2] = -pose.fy * y / zs**2
    T = J @ W
    cov2 = T @ Sigma @ np.swapaxes(T, 1, 2)
    a = cov2[:, 0, 0] + LOWPASS
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + LOWPASS
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(lam)
    mean2d = np.stack([pose.fx * x / zs + pose.cx, pose.fy * y / zs + pose.cy], axis=1)
    valid = (z > NEAR) & (det > 0)
    valid &= (mean2d[:, 0] + radius >= -0.5) & (mean2d[:, 0] - radius <= pose.width - 0.5)
    valid &= (mean2d[:, 1] + radius >= -0.5) & (mean2d[:, 1] - radius <= pose.height - 0.5)
    order = np.argsort(z, kind="stable")
    order = order[valid[order]]
    return _Projected(W, R, s, M, Sigma, Xc, J, T, conic, mean2d, radius, valid,
                      sigmoid(cloud.opacity_logits), np.clip(cloud.colors, 0.0, 1.0), order)


def _tile_lists(proj: _Projected, height: int, width: int):
    ty = (height + TILE - 1) // TILE
    tx = (width + TILE - 1) // TILE
    o = proj.order
    u, v = proj.mean2d[o, 0], proj.mean2d[o, 1]
    r = proj.radius[o]
    x0 = np.arange(tx) * TILE
    y0 = np.arange(ty) * TILE
    hit_x = (u[:, None] + r[:, None] >= x0[None, :] - 0.5) & (u[:, None] - r[:, None] <= x0[None, :] + TILE - 0.5)
    hit_y = (v[:, None] + r[:, None] >= y0[None, :] - 0.5) & (v[:, None] - r[:, None] <= y0[None, :] + TILE - 0.5)
    for iy in range(ty):
        for ix in range(tx):
            members = o[hit_x[:, ix] & hit_y[:, iy]]
            ys = slice(iy * TILE, min((iy + 1) * TILE, height))
            xs = slice(ix * TILE, min((ix + 1) * TILE, width))
            yield ys, xs, members


def rasterize(cloud: GaussianCloud, pose: CameraPose, background=(0.0, 0.0, 0.0)) -> tuple[Image, RenderContext]:
    """Forward pass returning the image and the context ``render_backward`` reuses."""
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    H, W = pose.height, pose.width
    proj = _project(cloud, pose)
    out = np.empty((H, W, 3))
    acc = np.empty((H, W))
    ctx = RenderContext(proj, [], H, W, bg)
    for ys, xs, idx in _tile_lists(proj, H, W):
        py, px = np.mgrid[ys, xs]
        px = px.reshape(-1).astype(np.float64)
        py = py.reshape(-1).astype(np.float64)
        npix = px.size
        if idx.size == 0:
            out[ys, xs] = bg
            acc[ys, xs] = 0.0
            ctx.tiles.append((ys, xs, idx, None))
            continue
        dx = px[None, :] - proj.mean2d[idx, 0:1]
        dy = py[None, :] - proj.mean2d[idx, 1:2]
        A, B, C = (proj.conic[idx, k:k + 1] for k in range(3))
        power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
        G, E = falloff(power)
        raw = proj.opacity[idx, None] * G
        alpha = np.minimum(raw, ALPHA_MAX)
        trans = np.cumprod(1.0 - alpha, axis=0)
        T_final = trans[-1]
        T = np.vstack([np.ones((1, npix)), trans[:-1]])
        wgt = alpha * T
        color = wgt.T @ proj.colors[idx] + T_final[:, None] * bg
        out[ys, xs] = color.reshape(ys.stop - ys.start, xs.stop - xs.start, 3)
        acc[ys, xs] = (1.0 - T_final).reshape(ys.stop - ys.start, xs.stop - xs.start)
        ctx.tiles.append((ys, xs, idx, (dx, dy, G, raw, alpha, T, T_final, wgt, E)))
    return Image(out, bg, acc), ctx


def render(cloud: GaussianCloud, pose: CameraPose, background=(0.0, 0.0, 0.0)) -> Image:
    return rasterize(cloud, pose, background)[0]


def render_backward(cloud: GaussianCloud, pose: CameraPose, background, d_image: np.ndarray,
                    ctx: RenderContext | None = None) -> RenderGrads:
    """Vector-Jacobian product of ``render`` for every cloud parameter and the pose."""
    if ctx is None:
        ctx = rasterize(cloud, pose, background)[1]
    d_image = np.asarray(d_image, dtype=np.float64)
    if not np.all(np.isfinite(d_image)):
        raise ValueError("d_image must be finite")
    proj = ctx.proj
    bg = ctx.background
    n = cloud.n
    d_col = np.zeros((n, 3))
    d_op = np.zeros(n)
    d_conic = np.zeros((n, 3))
    d_mean = np.zeros((n, 2))
    for ys, xs, idx, cache in ctx.tiles:
        if cache is None:
            continue
        dx, dy, G, raw, alpha, T, T_final, wgt, E = cache
        dC = d_image[ys, xs].reshape(-1, 3)
        cd = proj.colors[idx] @ dC.T
        bgd = dC @ bg
        d_col[idx] += wgt @ dC
        w = cd * wgt
        suffix = w.sum(axis=0)[None, :] - np.cumsum(w, axis=0) + (T_final * bgd)[None, :]
        d_alpha = T * cd - suffix / (1.0 - alpha)
        d_raw = np.where(raw < ALPHA_MAX, d_alpha, 0.0)
        d_op[idx] += np.sum(d_raw * G, axis=1)
        d_power = d_raw * proj.opacity[idx, None] * E
        A, B, C = (proj.conic[idx, k:k + 1] for k in range(3))
        d_conic[idx, 0] += np.sum(-0.5 * dx * dx * d_power, axis=1)
        d_conic[idx, 1] += np.sum(-dx * dy * d_power, axis=1)
        d_conic[idx, 2] += np.sum(-0.5 * dy * dy * d_power, axis=1)
        d_mean[idx, 0] += np.sum(d_power * (A * dx + B * dy), axis=1)
        d_mean[idx, 1] += np.sum(d_power * (B * dx + C * dy), axis=1)

    # conic = inverse(cov2 + lowpass)
    A, B, C = proj.conic.T
    Mc = np.stack([np.stack([A, B], -1), np.stack([B, C], -1)], -2)
    GM = np.stack([np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], -1),
                   np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], -1)], -2)
    G_cov2 = -Mc @ GM @ Mc
    Tm, Sigma = proj.T, proj.Sigma
    G_Sigma = np.swapaxes(Tm, 1, 2) @ G_cov2 @ Tm
    G_T = 2.0 * G_cov2 @ Tm @ Sigma
    G_J = G_T @ proj.W.T
    G_Wrot = np.swapaxes(proj.J, 1, 2) @ G_T

    # Sigma = M M^T, M = R diag(s)
    G_M = 2.0 * G_Sigma @ proj.M
    G_R = G_M * proj.scales[:, None, :]
    d_logs = np.sum(G_M * proj.R, axis=1) * proj.scales
    d_q = rotmat_vjp(cloud.raw_rotations, G_R)

    x, y, z = proj.Xc.T
    zs = np.where(proj.valid, z, 1.0)
    fx, fy = pose.fx, pose.fy
    du, dv = d_mean[:, 0], d_mean[:, 1]
    dXc = np.stack([
        -fx / zs**2 * G_J[:, 0, 2] + fx / zs * du,
        -fy / zs**2 * G_J[:, 1, 2] + fy / zs * dv,
        -fx / zs**2 * G_J[:, 0, 0] + 2 * fx * x / zs**3 * G_J[:, 0, 2]
        - fy / zs**2 * G_J[:, 1, 1] + 2 * fy * y / zs**3 * G_J[:, 1, 2]
        - fx * x / zs**2 * du - fy * y / zs**2 * dv,
    ], axis=1)
    invalid = ~proj.valid
    for arr in (dXc, d_logs, d_q, d_col, G_Wrot):
        arr[invalid] = 0.0
    d_op[invalid] = 0.0
    d_mean[invalid] = 0.0
    d_pos = dXc @ proj.W
    G_W = G_Wrot.sum(axis=0) + dXc.T @ cloud.positions
    d_t = dXc.sum(axis=0)
    d_omega = np.array([np.sum(G_W * (skew(e) @ proj.W)) for e in np.eye(3)])
    op = proj.opacity
    in_range = (cloud.colors >= 0.0) & (cloud.colors <= 1.0)
    return RenderGrads(
        d_positions=d_pos,
        d_raw_rotations=d_q,
        d_log_scales=d_logs,
        d_opacity_logits=d_op * op * (1.0 - op),
        d_colors=d_col * in_range,
        d_pose_delta=np.concatenate([d_omega, d_t]),
        d_rotation_matrix=G_W,
        d_translation=d_t,
        d_means2d=d_mean,
        image_size=(ctx.height, ctx.width),
    )


def downsample(img, factor: int):
    """Area-average pooling by an integer factor (accepts arrays or ``Image``)."""
    if isinstance(img, Image):
        return Image(downsample(img.pixels, factor), img.background,
                     None if img.alpha is None else downsample(img.alpha[..., None], factor)[..., 0])
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape[:2]
    if factor < 1 or H % factor or W % factor:
        raise ValueError(f"{H}x{W} is not divisible by {factor}")
    if factor == 1:
        return img.copy()
    shp = (H // factor, factor, W // factor, factor) + img.shape[2:]
    return img.reshape(shp).mean(axis=(1, 3))


def downsample_vjp(d_small: np.ndarray, factor: int) -> np.ndarray:
    d_small = np.asarray(d_small, dtype=np.float64)
    out = np.repeat(np.repeat(d_small, factor, axis=0), factor, axis=1)
    return out / (factor * factor)


def save_png(path, pixels: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
