"""Image-quality metrics and the evaluation report written by ``eval``."""
from __future__ import annotations

import json
import math

import numpy as np

from .losses import ssim

# Reported in place of an infinite PSNR (identical images).
PSNR_CAP = 100.0


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a = np.asarray(getattr(a, "pixels", a), dtype=np.float64)
    b = np.asarray(getattr(b, "pixels", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def capped(value: float) -> float:
    return PSNR_CAP if value > PSNR_CAP else float(value)


def eval_report(renders: np.ndarray, targets: np.ndarray, names: list[str] | None = None) -> dict:
    """Per-image and mean PSNR/SSIM. Infinite PSNR is reported as ``PSNR_CAP``."""
    renders = np.asarray(renders, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if renders.shape != targets.shape:
        raise ValueError(f"render stack {renders.shape} does not match targets {targets.shape}")
    names = names or [f"{i:03d}" for i in range(len(renders))]
    per = []
    for name, r, t in zip(names, renders, targets):
        p = psnr(r, t)
        per.append({"name": name, "psnr": capped(p), "psnr_infinite": math.isinf(p), "ssim": ssim(r, t)[0]})
    return {
        "count": len(per),
        "psnr_cap": PSNR_CAP,
        "mean_psnr": float(np.mean([e["psnr"] for e in per])) if per else float("nan"),
        "mean_ssim": float(np.mean([e["ssim"] for e in per])) if per else float("nan"),
        "images": per,
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
