"""Synthetic reference, shifted and pre-training distributions.

Classes are isotropic Gaussian clusters around means drawn once per
:class:`GenSpec`.  Shifts and pre-training "styles" are deterministic
transforms applied in a fixed order: rotate, displace class means, mask
coordinates, add noise.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .errors import CodecError, DataError, DomainError


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    tag: str = ""
    split: str = "train"

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64, copy=True)
        if x.ndim != 2:
            raise DataError("features must be a 2-D matrix")
        y = np.array(self.labels, copy=True)
        if y.size and not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise DataError("labels must be integers")
        y = y.astype(np.int64).reshape(-1)
        if y.shape[0] != x.shape[0]:
            raise DataError("labels and features disagree on row count")
        if (y < 0).any():
            raise DataError("labels must be non-negative")
        if not np.all(np.isfinite(x)):
            raise DataError("features must be finite")
        if self.split not in ("train", "test"):
            raise DataError(f"split must be 'train' or 'test', got {self.split!r}")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.tag == other.tag
            and self.split == other.split
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and self.labels.tobytes() == other.labels.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True)
class ShiftSpec:
    rotation_angle: float = 0.0
    noise_sigma: float = 0.0
    mean_shift: float = 0.0
    mask_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_fraction < 1.0:
            raise DomainError(f"mask_fraction must lie in [0, 1), got {self.mask_fraction}")
        if self.noise_sigma < 0:
            raise DomainError("noise_sigma must be non-negative")
        if self.mean_shift < 0:
            raise DomainError("mean_shift must be non-negative")
        for name in ("rotation_angle", "noise_sigma", "mean_shift"):
            if not math.isfinite(getattr(self, name)):
                raise DomainError(f"{name} must be finite")

    @property
    def is_identity(self) -> bool:
        return (
            self.rotation_angle == 0.0
            and self.noise_sigma == 0.0
            and self.mean_shift == 0.0
            and self.mask_fraction == 0.0
        )


@dataclass(frozen=True)
class GenSpec:
    k: int = 10
    d_in: int = 16
    per_class_train: int = 60
    per_class_test: int = 100
    cluster_spread: float = 1.0
    pretrain_style_count: int = 6
    seed: int = 0
    # upper bounds for the random pre-training styles; all zero gives identity styles
    style_rotation: float = 1.0
    style_mean_shift: float = 1.0
    style_noise: float = 0.5

    def __post_init__(self):
        for name in ("k", "d_in", "per_class_train", "per_class_test", "pretrain_style_count"):
            if int(getattr(self, name)) <= 0:
                raise DomainError(f"{name} must be positive")
        if self.cluster_spread <= 0:
            raise DomainError("cluster_spread must be positive")
        if min(self.style_rotation, self.style_mean_shift, self.style_noise) < 0:
            raise DomainError("style bounds must be non-negative")


def class_means(spec: GenSpec) -> np.ndarray:
    """The k x d_in matrix of cluster centres, standard normal entries."""
    return rng.stream(spec.seed, "gen.means").normals(spec.k * spec.d_in).reshape(spec.k, spec.d_in)


def sample_clusters(
    spec: GenSpec, per_class: int, purpose: str, sub: int = 0, tag: str = "", split: str = "train"
) -> Dataset:
    """Rows ordered by class; noise drawn row-major from one stream."""
    means = class_means(spec)
    noise = rng.stream(spec.seed, purpose, sub).normals(spec.k * per_class * spec.d_in)
    x = np.repeat(means, per_class, axis=0) + spec.cluster_spread * noise.reshape(-1, spec.d_in)
    y = np.repeat(np.arange(spec.k), per_class)
    return Dataset(x, y, tag, split)


def gen_reference(spec: GenSpec) -> tuple[Dataset, Dataset]:
    train = sample_clusters(spec, spec.per_class_train, "gen.reference.train", tag="reference", split="train")
    test = sample_clusters(spec, spec.per_class_test, "gen.reference.test", tag="reference", split="test")
    return train, test


def style_spec(spec: GenSpec, index: int) -> ShiftSpec:
    """Pre-training style ``index``: each strength uniform in ``[0, bound)``."""
    s = rng.stream(spec.seed, "gen.style", index)
    return ShiftSpec(
        rotation_angle=spec.style_rotation * s.random(),
        mean_shift=spec.style_mean_shift * s.random(),
        noise_sigma=spec.style_noise * s.random(),
        seed=rng.stream_seed(spec.seed, "gen.style.seed", index),
    )


def gen_pretrain_mixture(spec: GenSpec, split: str = "train") -> Dataset:
    """Union of ``pretrain_style_count`` styled copies of the reference clusters.

    ``split="train"`` gives the pre-training set (``per_class_train`` rows per
    class and style); ``split="test"`` gives a disjoint held-out set with
    ``per_class_test`` rows, used for prototype construction.
    """
    per_class = spec.per_class_train if split == "train" else spec.per_class_test
    parts_x, parts_y = [], []
    for s in range(spec.pretrain_style_count):
        base = sample_clusters(spec, per_class, f"gen.pretrain.{split}", sub=s, split=split)
        styled = apply_shift(base, style_spec(spec, s))
        parts_x.append(styled.features)
        parts_y.append(styled.labels)
    return Dataset(np.concatenate(parts_x), np.concatenate(parts_y), "pretrain", split)


def _rotation_plane(d: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    g = rng.stream(seed, "shift.plane").normals(2 * d).reshape(2, d)
    u = g[0] / np.linalg.norm(g[0])
    v = g[1] - (g[1] @ u) * u
    v = v / np.linalg.norm(v)
    return u, v


def apply_shift(d: Dataset, s: ShiftSpec, tag: str | None = None) -> Dataset:
    """Rotate, displace class means, mask, then add noise; labels untouched."""
    x = d.features.copy()
    n, dim = x.shape
    if s.rotation_angle != 0.0:
        if dim < 2:
            raise DomainError("rotation needs at least two feature dimensions")
        u, v = _rotation_plane(dim, s.seed)
        a = x @ u
        b = x @ v
        c, sn = math.cos(s.rotation_angle), math.sin(s.rotation_angle)
        x += np.outer(a * c - b * sn - a, u) + np.outer(a * sn + b * c - b, v)
    if s.mean_shift != 0.0 and n:
        for cls in np.unique(d.labels):
            direction = rng.stream(s.seed, "shift.mean", int(cls)).normals(dim)
            direction /= np.linalg.norm(direction)
            x[d.labels == cls] += s.mean_shift * direction
    if s.mask_fraction != 0.0:
        m = int(math.floor(s.mask_fraction * dim))
        cols = rng.stream(s.seed, "shift.mask").sample_without_replacement(dim, m)
        x[:, sorted(cols)] = 0.0
    if s.noise_sigma != 0.0 and n:
        x += s.noise_sigma * rng.stream(s.seed, "shift.noise").normals(n * dim).reshape(n, dim)
    return Dataset(x, d.labels, d.tag if tag is None else tag, d.split)


def subsample_per_class(d: Dataset, k_shot: int, seed: int) -> Dataset:
    """Exactly ``k_shot`` rows per class, sampled without replacement."""
    if k_shot <= 0:
        raise DomainError("k_shot must be positive")
    rows = []
    for cls in np.unique(d.labels):
        idx = np.flatnonzero(d.labels == cls)
        if idx.size < k_shot:
            raise DataError(f"class {int(cls)} has {idx.size} samples, fewer than k_shot={k_shot}")
        picks = rng.stream(seed, "subsample", int(cls)).sample_without_replacement(idx.size, k_shot)
        rows.extend(idx[picks])
    rows = np.array(rows, dtype=np.int64)
    return Dataset(d.features[rows], d.labels[rows], d.tag, d.split)


def write_dataset(d: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{j}" for j in range(d.d_in)])
        for label, row in zip(d.labels, d.features):
            w.writerow([int(label)] + [repr(float(v)) for v in row])


def read_dataset(path: str | Path, tag: str | None = None, split: str = "train") -> Dataset:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CodecError(f"{path}: empty file")
    header = rows[0]
    if not header or header[0] != "label" or header[1:] != [f"f{j}" for j in range(len(header) - 1)]:
        raise CodecError(f"{path}: bad header")
    dim = len(header) - 1
    labels, feats = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != dim + 1:
            raise CodecError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(row)}")
        try:
            labels.append(int(row[0]))
            feats.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise CodecError(f"{path}:{lineno}: {exc}") from exc
    x = np.array(feats, dtype=np.float64).reshape(len(feats), dim)
    try:
        return Dataset(x, np.array(labels, dtype=np.int64), tag if tag is not None else path.stem, split)
    except DataError as exc:
        raise CodecError(f"{path}: {exc}") from exc
