"""Weight-space and output-space ensembles of two checkpoints."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from . import model as M
from . import rng
from .checkpoint import Checkpoint, interpolate
from .errors import DomainError, StructuralError
from .train import softmax

DEFAULT_ALPHA_GRID = tuple(round(0.05 * i, 2) for i in range(21))


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha


def _pair(theta0: Checkpoint, theta1: Checkpoint) -> None:
    if theta0.layout != theta1.layout:
        raise StructuralError("checkpoints have different layouts")


def wse_predict(spec: M.ModelSpec, theta0: Checkpoint, theta1: Checkpoint, alpha: float, x) -> np.ndarray:
    """Logits of the model whose weights are ``(1 - alpha) * theta0 + alpha * theta1``."""
    return M.logits(spec, interpolate(theta0, theta1, alpha), x)


def ose_logits(spec: M.ModelSpec, theta0: Checkpoint, theta1: Checkpoint, alpha: float, x) -> np.ndarray:
    _pair(theta0, theta1)
    alpha = _check_alpha(alpha)
    return (1.0 - alpha) * M.logits(spec, theta0, x) + alpha * M.logits(spec, theta1, x)


def ose_softmax(spec: M.ModelSpec, theta0: Checkpoint, theta1: Checkpoint, alpha: float, x) -> np.ndarray:
    _pair(theta0, theta1)
    alpha = _check_alpha(alpha)
    return (1.0 - alpha) * softmax(M.logits(spec, theta0, x)) + alpha * softmax(M.logits(spec, theta1, x))


def random_interp_choices(n: int, alpha: float, seed: int) -> np.ndarray:
    """Per-sample Bernoulli(alpha) draws; True selects the fine-tuned model."""
    s = rng.stream(seed, "ensemble.random_interp")
    return np.array([s.random() < alpha for _ in range(n)], dtype=bool)


def random_interp_predict(
    spec: M.ModelSpec, theta0: Checkpoint, theta1: Checkpoint, alpha: float, x, seed: int
) -> np.ndarray:
    _pair(theta0, theta1)
    alpha = _check_alpha(alpha)
    x = np.asarray(x, dtype=np.float64)
    X = np.atleast_2d(x)
    pick = random_interp_choices(X.shape[0], alpha, seed)
    out = np.where(pick[:, None], M.logits(spec, theta1, X), M.logits(spec, theta0, X))
    return out[0] if x.ndim == 1 else out


def verify_linear_equivalence(
    spec: M.ModelSpec,
    theta0: Checkpoint,
    theta1: Checkpoint,
    alpha_grid: Iterable[float],
    eval_data: np.ndarray,
) -> float:
    """Largest ``|wse - ose_logits|`` over every sample and grid point."""
    X = np.atleast_2d(np.asarray(eval_data, dtype=np.float64))
    z0 = M.logits(spec, theta0, X)
    z1 = M.logits(spec, theta1, X)
    worst = 0.0
    for alpha in alpha_grid:
        alpha = _check_alpha(alpha)
        ose = (1.0 - alpha) * z0 + alpha * z1
        wse = wse_predict(spec, theta0, theta1, alpha, X)
        worst = max(worst, float(np.max(np.abs(wse - ose))))
    return worst


def find_nonlinear_witness(
    spec: M.ModelSpec,
    theta0: Checkpoint,
    theta1: Checkpoint,
    alpha_grid: Iterable[float] = DEFAULT_ALPHA_GRID,
    n_candidates: int = 256,
    scale: float = 1.0,
    seed: int = 0,
) -> tuple[np.ndarray, float]:
    """Search Gaussian inputs for the one with the largest weight/output-space gap."""
    X = scale * rng.stream(seed, "ensemble.witness").normals(n_candidates * spec.d_in).reshape(-1, spec.d_in)
    z0 = M.logits(spec, theta0, X)
    z1 = M.logits(spec, theta1, X)
    gaps = np.zeros(n_candidates)
    for alpha in alpha_grid:
        alpha = _check_alpha(alpha)
        wse = wse_predict(spec, theta0, theta1, alpha, X)
        gaps = np.maximum(gaps, np.max(np.abs(wse - ((1.0 - alpha) * z0 + alpha * z1)), axis=1))
    best = int(np.argmax(gaps))
    return X[best], float(gaps[best])
