"""Deformation fields: an 8x256 ReLU MLP with positional encoding and a skip.

Two conditioning modes share the network:

* ``temporal``: the field is conditioned on ``gamma(t)`` for a scalar time.
* ``perframe``: the field owns a table of learnable per-frame codes
  (zero-initialised) and is conditioned on ``gamma(code[k])``.

At the canonical time / frame the field never runs: ``field_forward``
returns exact zeros. Output heads are zero-initialised so a fresh field
leaves the cloud undeformed.

Checkpoints are ``.npz`` archives holding every weight array under its own
name plus two metadata entries: ``__format__`` (the string
``"splat4d.mlpfield"``) and ``__arch__`` (a JSON string with the
architecture, including ``format_version``).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PosEncConfig, posenc, posenc_vjp
from .scene import DeformationOffsets

FORMAT_TAG = "splat4d.mlpfield"
FORMAT_VERSION = 1
HEADS = (("head_x", 3), ("head_q", 4), ("head_s", 3))


@dataclass
class MlpField:
    kind: str                                # "temporal" or "perframe"
    weights: dict[str, np.ndarray]
    pos_enc: PosEncConfig = PosEncConfig(10, True)
    cond_enc: PosEncConfig = PosEncConfig(6, True)
    depth: int = 8
    width: int = 256
    skip: int = 4
    canonical: float = 0.0                   # canonical time, or canonical frame index
    use_scale: bool = True
    code_dim: int = 0

    @property
    def cond_dim(self) -> int:
        return self.code_dim if self.kind == "perframe" else 1

    @property
    def input_dim(self) -> int:
        return self.pos_enc.out_dim(3) + self.cond_enc.out_dim(self.cond_dim)

    def is_canonical(self, cond) -> bool:
        if self.kind == "perframe":
            return int(cond) == int(self.canonical)
        return float(cond) == float(self.canonical)

    def copy(self) -> MlpField:
        return MlpField(**{**self.__dict__, "weights": {k: v.copy() for k, v in self.weights.items()}})

    def arch(self) -> dict:
        return {
            "format_version": FORMAT_VERSION, "kind": self.kind, "depth": self.depth,
            "width": self.width, "skip": self.skip, "canonical": self.canonical,
            "use_scale": self.use_scale, "code_dim": self.code_dim,
            "pos_enc": [self.pos_enc.num_frequencies, self.pos_enc.include_input],
            "cond_enc": [self.cond_enc.num_frequencies, self.cond_enc.include_input],
        }


def _layer_in_dims(f: MlpField) -> list[int]:
    dims = [f.input_dim]
    for i in range(1, f.depth):
        dims.append(f.width + f.input_dim if i - 1 == f.skip else f.width)
    return dims


def make_field(kind: str, rng: np.random.Generator, *, num_frames: int = 0, code_dim: int = 32,
               canonical: float = 0.0, pos_freqs: int = 10, cond_freqs: int | None = None,
               depth: int = 8, width: int = 256, skip: int = 4, use_scale: bool = True) -> MlpField:
    """Fresh field with PyTorch-style uniform init for hidden layers and zero heads."""
    if kind not in ("temporal", "perframe"):
        raise ValueError(f"unknown field kind {kind!r}")
    if cond_freqs is None:
        cond_freqs = 6 if kind == "temporal" else 0
    if depth < 1 or not 0 <= skip < depth - 1:
        raise ValueError(f"skip layer must lie strictly inside the network, got skip={skip}, depth={depth}")
    f = MlpField(
        kind=kind, weights={}, pos_enc=PosEncConfig(pos_freqs, True),
        cond_enc=PosEncConfig(cond_freqs, True), depth=depth, width=width, skip=skip,
        canonical=canonical, use_scale=use_scale, code_dim=code_dim if kind == "perframe" else 0,
    )
    for i, fan_in in enumerate(_layer_in_dims(f)):
        bound = 1.0 / np.sqrt(fan_in)
        f.weights[f"l{i}.w"] = rng.uniform(-bound, bound, (fan_in, width))
        f.weights[f"l{i}.b"] = rng.uniform(-bound, bound, width)
    for name, dim in HEADS:
        f.weights[f"{name}.w"] = np.zeros((width, dim))
        f.weights[f"{name}.b"] = np.zeros(dim)
    if kind == "perframe":
        f.weights["codes"] = np.zeros((num_frames, code_dim))
    return f


def _cond_vector(f: MlpField, cond) -> np.ndarray:
    if f.kind == "perframe":
        return f.weights["codes"][int(cond)]
    return np.array([float(cond)])


@dataclass
class _Cache:
    positions: np.ndarray
    cond: np.ndarray
    emb: np.ndarray
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    h_last: np.ndarray | None = None


def _forward(f: MlpField, positions: np.ndarray, cond) -> tuple[DeformationOffsets, _Cache | None]:
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if f.is_canonical(cond):
        return DeformationOffsets.zeros(n, cond), None
    cvec = _cond_vector(f, cond)
    cemb = posenc(cvec, f.cond_enc)
    emb = np.concatenate([posenc(positions, f.pos_enc), np.broadcast_to(cemb, (n, cemb.size))], axis=1)
    cache = _Cache(positions, cvec, emb)
    h = emb
    w = f.weights
    for i in range(f.depth):
        cache.inputs.append(h)
        z = h @ w[f"l{i}.w"] + w[f"l{i}.b"]
        cache.pre.append(z)
        h = np.maximum(z, 0.0)
        if i == f.skip:
            h = np.concatenate([emb, h], axis=1)
    cache.h_last = h
    dx = h @ w["head_x.w"] + w["head_x.b"]
    dq = h @ w["head_q.w"] + w["head_q.b"]
    ds = h @ w["head_s.w"] + w["head_s.b"] if f.use_scale else np.zeros((n, 3))
    return DeformationOffsets(dx, dq, ds, cond), cache


def field_forward(f: MlpField, positions: np.ndarray, cond) -> DeformationOffsets:
    return _forward(f, positions, cond)[0]


def field_backward(f: MlpField, positions: np.ndarray, cond, d_offsets: DeformationOffsets,
                   cache: _Cache | None = None):
    """Returns ``(d_weights, d_positions, d_cond)``.

    ``d_weights`` has an entry for every array in ``f.weights``; for a
    per-frame field the gradient on the frame's code row is written into
    ``d_weights["codes"]`` and also returned as ``d_cond``.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    d_w = {k: np.zeros_like(v) for k, v in f.weights.items()}
    if f.is_canonical(cond):
        return d_w, np.zeros_like(positions), np.zeros(f.cond_dim)
    if cache is None:
        cache = _forward(f, positions, cond)[1]
    w = f.weights
    h = cache.h_last
    d_h = np.zeros_like(h)
    heads = [("head_x", d_offsets.dx), ("head_q", d_offsets.dq)]
    if f.use_scale:
        heads.append(("head_s", d_offsets.ds))
    for name, g in heads:
        d_w[f"{name}.w"] = h.T @ g
        d_w[f"{name}.b"] = g.sum(axis=0)
        d_h += g @ w[f"{name}.w"].T
    in_dim = f.input_dim
    d_emb = np.zeros((n, in_dim))
    for i in reversed(range(f.depth)):
        if i == f.skip:
            d_emb += d_h[:, :in_dim]
            d_h = d_h[:, in_dim:]
        d_z = d_h * (cache.pre[i] > 0)
        d_w[f"l{i}.w"] = cache.inputs[i].T @ d_z
        d_w[f"l{i}.b"] = d_z.sum(axis=0)
        d_h = d_z @ w[f"l{i}.w"].T
    d_emb += d_h
    pdim = f.pos_enc.out_dim(3)
    d_pos = posenc_vjp(positions, f.pos_enc, d_emb[:, :pdim])
    d_cond = posenc_vjp(cache.cond, f.cond_enc, d_emb[:, pdim:].sum(axis=0))
    if f.kind == "perframe":
        d_w["codes"][int(cond)] = d_cond
    return d_w, d_pos, d_cond


def evaluate(f: MlpField, positions: np.ndarray, cond):
    """Forward pass that also returns the cache ``field_backward`` accepts."""
    return _forward(f, positions, cond)


def save_field(f: MlpField, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, __format__=np.array(FORMAT_TAG), __arch__=np.array(json.dumps(f.arch())), **f.weights)
    os.replace(tmp, path)


def field_from_arrays(arrays: dict[str, np.ndarray]) -> MlpField:
    if str(arrays["__format__"]) != FORMAT_TAG:
        raise ValueError("not a deformation-field checkpoint")
    arch = json.loads(str(arrays["__arch__"]))
    if arch["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported field format version {arch['format_version']}")
    weights = {k: np.array(v) for k, v in arrays.items() if not k.startswith("__")}
    return MlpField(
        kind=arch["kind"], weights=weights, pos_enc=PosEncConfig(*arch["pos_enc"]),
        cond_enc=PosEncConfig(*arch["cond_enc"]), depth=arch["depth"], width=arch["width"],
        skip=arch["skip"], canonical=arch["canonical"], use_scale=arch["use_scale"],
        code_dim=arch["code_dim"],
    )


def load_field(path: str | Path) -> MlpField:
    with np.load(path) as z:
        return field_from_arrays({k: z[k] for k in z.files})
