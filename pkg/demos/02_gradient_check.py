"""
Checking the rasterizer's hand-written backward pass
====================================================

Every gradient in the package is written by hand, so each one is compared
with central finite differences. This demo does that for the rasterizer on
a small random cloud and prints the agreement per parameter group.
"""
from dataclasses import replace

import numpy as np

from splat4d.camera import look_at
from splat4d.oracle import finite_diff, grad_check
from splat4d.rasterizer import render, render_backward
from splat4d.scene import GaussianCloud

rng = np.random.default_rng(0)
n = 12
cloud = GaussianCloud(
    positions=rng.normal(0.0, 0.3, (n, 3)),
    raw_rotations=rng.normal(size=(n, 4)),
    log_scales=np.log(rng.uniform(0.08, 0.2, (n, 3))),
    opacity_logits=rng.normal(0.0, 1.0, n),
    colors=rng.random((n, 3)),
)
pose = look_at(np.array([0.0, 0.4, -3.0]), np.zeros(3), fx=40.0, fy=40.0, cx=15.5, cy=11.5,
               width=32, height=24)
bg = np.array([0.1, 0.1, 0.12])

# A fixed random projection turns the image into a scalar loss.
w = rng.normal(size=(24, 32, 3))


def loss(c):
    return float(np.sum(w * render(c, pose, bg).pixels))


grads = render_backward(cloud, pose, bg, w).cloud_grads()

for name, analytic in grads.items():
    def f(x, name=name):
        return loss(replace(cloud, **{name: x}))

    numeric = finite_diff(f, getattr(cloud, name))
    ok = grad_check(analytic, numeric)
    err = np.max(np.abs(analytic - numeric))
    print(f"{name:15s} {ok.mean():7.2%} of {ok.size:3d} coordinates agree (max abs diff {err:.1e})")
