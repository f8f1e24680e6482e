"""MLP encoder with a bias-free linear head.

Parameters live in a :class:`~wiselab.checkpoint.Checkpoint` whose layout is
``enc.{i}.weight`` (fan_in x fan_out), ``enc.{i}.bias`` for each encoder layer
and ``head`` (d x k).  The activation is applied between encoder layers, not
after the last one; with ``normalize_features`` the embedding is projected to
the unit sphere before the head.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from . import rng
from .checkpoint import Checkpoint, CheckpointMeta, ParamLayout
from .errors import DataError, DomainError, StructuralError

log = logging.getLogger(__name__)

HEAD = "head"


@dataclass(frozen=True)
class ModelSpec:
    layer_widths: tuple[int, ...] = (16, 64, 32)
    activation: Literal["relu", "identity"] = "relu"
    k: int = 10
    normalize_features: bool = True

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or min(widths) <= 0:
            raise DomainError("layer_widths needs at least (d_in, d), all positive")
        if self.activation not in ("relu", "identity"):
            raise DomainError(f"unknown activation {self.activation!r}")
        if self.k < 1:
            raise DomainError("k must be positive")

    @property
    def d_in(self) -> int:
        return self.layer_widths[0]

    @property
    def d(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1


def layout(spec: ModelSpec) -> ParamLayout:
    shapes = []
    for i, (a, b) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
        shapes.append((f"enc.{i}.weight", (a, b)))
        shapes.append((f"enc.{i}.bias", (b,)))
    shapes.append((HEAD, (spec.d, spec.k)))
    return ParamLayout.from_shapes(shapes)


def is_encoder(name: str) -> bool:
    return name.startswith("enc.")


def init_checkpoint(spec: ModelSpec, seed: int) -> Checkpoint:
    """He-normal encoder weights, zero biases, head scaled by 1/sqrt(d)."""
    lay = layout(spec)
    s = rng.stream(seed, "model.init")
    values = np.zeros(lay.total)
    for e in lay.entries:
        if e.name.endswith(".bias"):
            continue
        fan_in = e.shape[0]
        scale = np.sqrt(2.0 / fan_in) if is_encoder(e.name) else 1.0 / np.sqrt(fan_in)
        values[e.offset : e.offset + e.size] = scale * s.normals(e.size)
    return Checkpoint(lay, values, CheckpointMeta(seed=seed, step=0, tag="init"))


def _check(spec: ModelSpec, c: Checkpoint, x: np.ndarray) -> np.ndarray:
    if c.layout != layout(spec):
        raise StructuralError("checkpoint layout does not match model spec")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.d_in:
        raise StructuralError(f"input has {x.shape[-1]} features, model expects {spec.d_in}")
    return x


def _act(spec: ModelSpec, h: np.ndarray) -> np.ndarray:
    return np.maximum(h, 0.0) if spec.activation == "relu" else h


def forward_cache(spec: ModelSpec, c: Checkpoint, X: np.ndarray) -> dict:
    """Batched forward pass keeping every intermediate needed for backprop."""
    X = np.atleast_2d(_check(spec, c, X))
    params = c.arrays()
    inputs, pre = [], []
    h = X
    for i in range(spec.n_layers):
        inputs.append(h)
        z = h @ params[f"enc.{i}.weight"] + params[f"enc.{i}.bias"]
        pre.append(z)
        h = _act(spec, z) if i < spec.n_layers - 1 else z
    raw = h
    norms = np.linalg.norm(raw, axis=1)
    if spec.normalize_features:
        zero = norms == 0.0
        if zero.any():
            log.warning("%d embeddings have zero norm; left as zero vectors", int(zero.sum()))
        safe = np.where(zero, 1.0, norms)
        emb = raw / safe[:, None]
    else:
        emb = raw
    logits = emb @ params[HEAD]
    return {"inputs": inputs, "pre": pre, "raw": raw, "norms": norms, "emb": emb, "logits": logits}


def backward(spec: ModelSpec, c: Checkpoint, cache: dict, dlogits: np.ndarray) -> np.ndarray:
    """Flat gradient of ``sum(dlogits * logits)`` with respect to the parameters."""
    params = c.arrays()
    lay = c.layout
    grad = np.zeros(lay.total)

    def put(name, g):
        grad[lay.slice(name)] = g.reshape(-1)

    put(HEAD, cache["emb"].T @ dlogits)
    demb = dlogits @ params[HEAD].T
    if spec.normalize_features:
        norms = cache["norms"]
        safe = np.where(norms == 0.0, 1.0, norms)
        emb = cache["emb"]
        # d(r/|r|) = (I - e e^T) / |r|
        dh = (demb - emb * np.sum(demb * emb, axis=1, keepdims=True)) / safe[:, None]
        dh[norms == 0.0] = 0.0
    else:
        dh = demb
    for i in reversed(range(spec.n_layers)):
        if i < spec.n_layers - 1 and spec.activation == "relu":
            dh = dh * (cache["pre"][i] > 0)
        put(f"enc.{i}.weight", cache["inputs"][i].T @ dh)
        put(f"enc.{i}.bias", dh.sum(axis=0))
        if i > 0:
            dh = dh @ params[f"enc.{i}.weight"].T
    return grad


def forward_features(spec: ModelSpec, c: Checkpoint, x: np.ndarray) -> np.ndarray:
    """Embedding of one row (shape d) or a batch (shape N x d)."""
    x_arr = np.asarray(x, dtype=np.float64)
    emb = forward_cache(spec, c, x_arr)["emb"]
    return emb[0] if x_arr.ndim == 1 else emb


def logits(spec: ModelSpec, c: Checkpoint, x: np.ndarray) -> np.ndarray:
    x_arr = np.asarray(x, dtype=np.float64)
    out = forward_cache(spec, c, x_arr)["logits"]
    return out[0] if x_arr.ndim == 1 else out


def predict(scores: np.ndarray) -> np.ndarray | int:
    """Argmax over the last axis; ties go to the lowest index."""
    scores = np.asarray(scores)
    out = np.argmax(scores, axis=-1)
    return int(out) if scores.ndim == 1 else out


def margin(scores: np.ndarray) -> np.ndarray | float:
    """Largest minus second-largest score."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[-1] < 2:
        raise DomainError("margin needs at least two classes")
    top2 = np.sort(scores, axis=-1)[..., -2:]
    out = top2[..., 1] - top2[..., 0]
    return float(out) if scores.ndim == 1 else out


def build_zero_shot_head(prototype_sets: Sequence[np.ndarray]) -> np.ndarray:
    """Column j is the unit-normalized mean of class j's prototype embeddings."""
    cols = []
    for j, protos in enumerate(prototype_sets):
        protos = np.atleast_2d(np.asarray(protos, dtype=np.float64))
        if protos.shape[0] == 0 or protos.size == 0:
            raise DataError(f"class {j} has no prototype embeddings")
        mean = protos.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0.0 or not np.isfinite(norm):
            raise DataError(f"class {j}: prototype mean is the zero vector (degenerate class)")
        cols.append(mean / norm)
    widths = {c.shape[0] for c in cols}
    if len(widths) != 1:
        raise StructuralError("prototype embeddings disagree on dimension")
    return np.stack(cols, axis=1)


def zero_shot_model(spec: ModelSpec, pretrained: Checkpoint, X_proto: np.ndarray, y_proto: np.ndarray) -> Checkpoint:
    """Replace the head of ``pretrained`` by the prototype head built from held-out samples."""
    emb = forward_features(spec, pretrained, np.atleast_2d(X_proto))
    y_proto = np.asarray(y_proto)
    head = build_zero_shot_head([emb[y_proto == j] for j in range(spec.k)])
    return pretrained.with_entry(HEAD, head, tag="zero-shot")
