"""Fine-tuning engine with hand-written gradients.

The objective for a batch is::

    mean_i[(1 - a) * CE_eps(f(x_i), y_i) + a * CE(f(x_i), softmax(f0(x_i)))]
        + lam_init * ||theta - theta_init||^2 + lam_l1 * ||theta||_1

where the last two terms cover trainable parameters only.  Weight decay is
not part of the objective: AdamW applies it as a decoupled multiplicative
shrink.  ``grad_check`` compares the analytic gradient with central finite
differences of the same objective.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Literal

import numpy as np

from . import model as M
from . import rng
from .checkpoint import Checkpoint
from .datagen import Dataset
from .errors import DataError, DomainError, NumericError, StructuralError


@dataclass(frozen=True)
class TrainConfig:
    mode: Literal["end2end", "linear_head"] = "linear_head"
    epochs: int = 10
    batch_size: int = 64
    lr_max: float = 1e-2
    warmup_steps: int = 20
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.1
    l1: float = 0.0
    label_smoothing: float = 0.0
    reg_to_init: float = 0.0
    distill_alpha: float = 0.0
    grad_clip_norm: float = 1.0
    seed: int = 0
    snapshot_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.mode not in ("end2end", "linear_head"):
            raise DomainError(f"unknown mode {self.mode!r}")
        if self.epochs < 0 or self.batch_size <= 0:
            raise DomainError("epochs must be >= 0 and batch_size > 0")
        if not self.lr_max > 0:
            raise DomainError("lr_max must be positive")
        if self.warmup_steps < 0:
            raise DomainError("warmup_steps must be non-negative")
        if len(self.betas) != 2 or not all(0.0 < b < 1.0 for b in self.betas):
            raise DomainError("betas must be two values in (0, 1)")
        if not 0.0 <= self.label_smoothing <= 0.25:
            raise DomainError("label_smoothing must lie in [0, 0.25]")
        if not 0.0 <= self.distill_alpha <= 1.0:
            raise DomainError("distill_alpha must lie in [0, 1]")
        for name in ("eps", "weight_decay", "l1", "reg_to_init", "grad_clip_norm"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DomainError(f"unknown TrainConfig keys: {sorted(unknown)}")
        data = dict(data)
        if "betas" in data:
            data["betas"] = tuple(data["betas"])
        return cls(**data)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["betas"] = list(self.betas)
        return out


@dataclass
class TrainTrace:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    snapshots: dict[int, Checkpoint] = field(default_factory=dict)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "lr", "grad_norm"])
            for row in zip(self.steps, self.loss, self.lr, self.grad_norm):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


# ------------------------------------------------------------------------ losses


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def _smoothed_targets(labels: np.ndarray, k: int, eps: float) -> np.ndarray:
    labels = np.asarray(labels)
    off = eps / (k - 1) if k > 1 else 0.0
    q = np.full((labels.shape[0], k), off)
    q[np.arange(labels.shape[0]), labels] = 1.0 - eps
    return q


def _require_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite logits")


def loss_ce_smoothed(logits: np.ndarray, label: int, eps: float = 0.0) -> float:
    if not 0.0 <= eps < 1.0:
        raise DomainError("label smoothing must lie in [0, 1)")
    z = np.asarray(logits, dtype=np.float64).reshape(1, -1)
    _require_finite(z)
    q = _smoothed_targets(np.array([label]), z.shape[1], eps)
    return float(-(q * log_softmax(z)).sum())


def loss_distill(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    label: int,
    alpha_d: float,
    eps: float = 0.0,
) -> float:
    if not 0.0 <= alpha_d <= 1.0:
        raise DomainError("distill alpha must lie in [0, 1]")
    s = np.asarray(student_logits, dtype=np.float64).reshape(1, -1)
    t = np.asarray(teacher_logits, dtype=np.float64).reshape(1, -1)
    _require_finite(s, t)
    ls = log_softmax(s)
    hard = -(_smoothed_targets(np.array([label]), s.shape[1], eps) * ls).sum()
    soft = -(softmax(t) * ls).sum()
    return float((1.0 - alpha_d) * hard + alpha_d * soft)


def penalty_reg_to_init(
    c: Checkpoint, c0: Checkpoint, lam: float, mode: Literal["end2end", "linear_head"] = "end2end"
) -> float:
    """``lam * ||c - c0||^2``, over the head only in ``linear_head`` mode."""
    if c.layout != c0.layout:
        raise StructuralError("checkpoints have different layouts")
    diff = c.values - c0.values
    if mode == "linear_head":
        diff = diff[c.layout.slice(M.HEAD)]
    return float(lam * (diff @ diff))


def batch_loss_terms(
    z: np.ndarray, labels: np.ndarray, eps: float, alpha_d: float, teacher_z: np.ndarray | None
) -> tuple[float, np.ndarray]:
    """Mean data loss over a batch and its gradient with respect to the logits."""
    _require_finite(z)
    n, k = z.shape
    ls = log_softmax(z)
    p = np.exp(ls)
    q = _smoothed_targets(labels, k, eps)
    loss = -(q * ls).sum(axis=1)
    dz = p - q
    if alpha_d > 0.0:
        if teacher_z is None:
            raise DataError("distillation requires teacher logits")
        pt = softmax(teacher_z)
        loss = (1.0 - alpha_d) * loss - alpha_d * (pt * ls).sum(axis=1)
        dz = (1.0 - alpha_d) * dz + alpha_d * (p - pt)
    return float(loss.mean()), dz / n


# --------------------------------------------------------------------- optimizer


def adamw_step(
    params: np.ndarray,
    grads: np.ndarray,
    moments: tuple[np.ndarray, np.ndarray],
    step: int,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """One AdamW update; ``step`` is the 1-based count including this update."""
    grads = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient", step=step)
    m, v = moments
    b1, b2 = betas
    p = params * (1.0 - lr * weight_decay)
    m = b1 * m + (1.0 - b1) * grads
    v = b2 * v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p, (m, v)


def lr_at(step: int, total_steps: int, warmup_steps: int, lr_max: float) -> float:
    """Linear warmup to ``lr_max``, then cosine decay to zero at ``total_steps``."""
    if step < warmup_steps:
        return lr_max * step / warmup_steps
    if total_steps <= warmup_steps:
        return lr_max
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: np.ndarray) -> float:
    return float(np.linalg.norm(grads))


def clip_global_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    norm = global_norm(grads)
    if norm > max_norm:
        return grads * (max_norm / norm)
    return grads


# ---------------------------------------------------------------------- training


def trainable_mask(spec: M.ModelSpec, mode: str) -> np.ndarray:
    lay = M.layout(spec)
    if mode == "linear_head":
        return lay.mask(lambda name: name == M.HEAD)
    return np.ones(lay.total, dtype=bool)


def objective(
    spec: M.ModelSpec,
    c: Checkpoint,
    X: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    teacher_z: np.ndarray | None = None,
    anchor: Checkpoint | None = None,
) -> tuple[float, np.ndarray]:
    """Loss and flat gradient (zero on frozen parameters)."""
    mask = trainable_mask(spec, config.mode)
    cache = M.forward_cache(spec, c, X)
    loss, dz = batch_loss_terms(cache["logits"], y, config.label_smoothing, config.distill_alpha, teacher_z)
    grad = M.backward(spec, c, cache, dz)
    theta = c.values
    if config.reg_to_init > 0.0:
        if anchor is None:
            raise DataError("reg_to_init needs an anchor checkpoint")
        diff = np.where(mask, theta - anchor.values, 0.0)
        loss += config.reg_to_init * float(diff @ diff)
        grad += 2.0 * config.reg_to_init * diff
    if config.l1 > 0.0:
        loss += config.l1 * float(np.abs(theta[mask]).sum())
        grad += config.l1 * np.where(mask, np.sign(theta), 0.0)
    grad[~mask] = 0.0
    return loss, grad


def finetune(
    spec: M.ModelSpec,
    theta_init: Checkpoint,
    train_data: Dataset,
    config: TrainConfig,
    teacher: Checkpoint | None = None,
    on_step: Callable[[int, Checkpoint], None] | None = None,
) -> tuple[Checkpoint, TrainTrace]:
    """Minibatch AdamW with warmup+cosine schedule and global-norm clipping.

    ``theta_init`` doubles as the anchor for ``reg_to_init``.  In
    ``linear_head`` mode encoder entries are never touched, weight decay
    included.
    """
    if theta_init.layout != M.layout(spec):
        raise StructuralError("theta_init layout does not match model spec")
    if len(train_data) == 0:
        raise DataError("empty training set")
    if (config.distill_alpha > 0.0) != (teacher is not None):
        raise DataError("a teacher is required exactly when distill_alpha > 0")
    X, y = train_data.features, train_data.labels
    if X.shape[1] != spec.d_in:
        raise StructuralError("training features do not match model input width")
    teacher_z = M.logits(spec, teacher, X) if teacher is not None else None

    n = len(train_data)
    per_epoch = math.ceil(n / config.batch_size)
    total = config.epochs * per_epoch
    mask = trainable_mask(spec, config.mode)
    theta = theta_init.values.copy()
    m = np.zeros(int(mask.sum()))
    v = np.zeros_like(m)
    trace = TrainTrace()
    step = 0
    current = theta_init
    for epoch in range(config.epochs):
        order = rng.stream(config.seed, "train.shuffle", epoch).permutation(n)
        for b in range(per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            step += 1
            try:
                loss, grad = objective(
                    spec,
                    current,
                    X[idx],
                    y[idx],
                    config,
                    None if teacher_z is None else teacher_z[idx],
                    theta_init,
                )
            except NumericError as exc:
                raise NumericError(f"{exc} at step {step}", step=step) from exc
            if not math.isfinite(loss):
                raise NumericError(f"loss became non-finite at step {step}", step=step)
            g = grad[mask]
            gnorm = global_norm(g)
            if config.grad_clip_norm > 0:
                g = clip_global_norm(g, config.grad_clip_norm)
            lr = lr_at(step, total, config.warmup_steps, config.lr_max)
            theta[mask], (m, v) = adamw_step(
                theta[mask], g, (m, v), step, lr, config.betas, config.eps, config.weight_decay
            )
            if not np.all(np.isfinite(theta)):
                raise NumericError(f"parameters became non-finite at step {step}", step=step)
            current = theta_init.with_values(theta, step=step, tag="finetune")
            trace.steps.append(step)
            trace.loss.append(loss)
            trace.lr.append(lr)
            trace.grad_norm.append(gnorm)
            if config.snapshot_every and step % config.snapshot_every == 0:
                trace.snapshots[step] = current
            if on_step is not None:
                on_step(step, current)
    return current.with_values(current.values, step=step, tag="finetuned"), trace


_EPS = float(np.finfo(np.float64).eps)


def grad_check(
    spec: M.ModelSpec,
    c: Checkpoint,
    batch: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
    teacher: Checkpoint | None = None,
    anchor: Checkpoint | None = None,
    n_coords: int | None = 64,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Relative error is ``max(|a - n| - r, 0) / max(|a|, |n|, 1e-6)`` where
    ``r = 4 eps (|L+| + |L-|) / (2h)`` bounds the rounding error of the
    difference quotient itself; the floor keeps coordinates whose gradient is
    essentially zero from dominating.
    """
    X, y = batch
    teacher_z = M.logits(spec, teacher, X) if teacher is not None else None
    _, grad = objective(spec, c, X, y, config, teacher_z, anchor)
    coords = np.flatnonzero(trainable_mask(spec, config.mode))
    if n_coords is not None and n_coords < coords.size:
        picks = rng.stream(seed, "grad_check").sample_without_replacement(coords.size, n_coords)
        coords = coords[sorted(picks)]
    worst = 0.0
    for i in coords:
        plus = c.values.copy()
        minus = c.values.copy()
        plus[i] += h
        minus[i] -= h
        lp, _ = objective(spec, c.with_values(plus), X, y, config, teacher_z, anchor)
        lm, _ = objective(spec, c.with_values(minus), X, y, config, teacher_z, anchor)
        numeric = (lp - lm) / (2.0 * h)
        rounding = 4.0 * _EPS * (abs(lp) + abs(lm)) / (2.0 * h)
        err = max(abs(grad[i] - numeric) - rounding, 0.0) / max(abs(grad[i]), abs(numeric), 1e-6)
        worst = max(worst, err)
    return worst
