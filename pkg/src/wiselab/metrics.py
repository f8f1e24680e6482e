"""Accuracy intervals, effective robustness, and diversity between two classifiers."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Literal, Sequence

import numpy as np

from . import rng
from .errors import DomainError, FitError, UndefinedMetricError
from .model import margin, predict
from .train import log_softmax

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ accuracy + CI


@lru_cache(maxsize=64)
def _log_binom(n: int) -> np.ndarray:
    i = np.arange(n + 1)
    return np.array([math.lgamma(n + 1) - math.lgamma(j + 1) - math.lgamma(n - j + 1) for j in i])


def _log_pmf(n: int, p: float) -> np.ndarray:
    i = np.arange(n + 1)
    return _log_binom(n) + i * math.log(p) + (n - i) * math.log1p(-p)


def _logsumexp(values: np.ndarray) -> float:
    top = float(np.max(values))
    return top + math.log(math.fsum(np.exp(values - top)))


def log_tail_upper(c: int, n: int, p: float) -> float:
    """log P(X >= c) for X ~ Binomial(n, p), 0 < p < 1."""
    return _logsumexp(_log_pmf(n, p)[c:])


def log_tail_lower(c: int, n: int, p: float) -> float:
    """log P(X <= c) for X ~ Binomial(n, p), 0 < p < 1."""
    return _logsumexp(_log_pmf(n, p)[: c + 1])


def _bisect(f, increasing: bool, tol: float = 1e-13) -> float:
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if (f(mid) < 0) == increasing:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def clopper_pearson(correct: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    """Exact binomial interval by bisection on log-space tail sums."""
    if int(correct) != correct or int(n) != n:
        raise DomainError("counts must be integers")
    return _clopper_pearson(int(correct), int(n), float(confidence))


@lru_cache(maxsize=4096)
def _clopper_pearson(correct: int, n: int, confidence: float) -> tuple[float, float]:
    if n < 1 or not 0 <= correct <= n:
        raise DomainError(f"need 0 <= correct <= n and n >= 1, got ({correct}, {n})")
    if not 0.0 < confidence < 1.0:
        raise DomainError("confidence must lie in (0, 1)")
    target = math.log((1.0 - confidence) / 2.0)
    if correct == 0:
        low = 0.0
    else:
        low = _bisect(lambda p: log_tail_upper(correct, n, p) - target, increasing=True)
    if correct == n:
        high = 1.0
    else:
        high = _bisect(lambda p: log_tail_lower(correct, n, p) - target, increasing=False)
    return low, high


@dataclass(frozen=True)
class EvalResult:
    tag: str
    n: int
    correct: int
    accuracy: float
    ci_low: float
    ci_high: float


def evaluate(preds: np.ndarray, labels: np.ndarray, tag: str = "") -> EvalResult:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise DomainError("predictions and labels differ in shape")
    n = int(labels.size)
    correct = int(np.sum(preds == labels))
    low, high = clopper_pearson(correct, n)
    return EvalResult(tag, n, correct, correct / n, low, high)


# ------------------------------------------------------------ effective robustness


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise DomainError("logit is defined on (0, 1) only")
    out = np.log(p / (1.0 - p))
    return float(out) if out.ndim == 0 else out


def sigmoid(t):
    t = np.asarray(t, dtype=np.float64)
    out = np.where(t >= 0, 1.0 / (1.0 + np.exp(-np.abs(t))), np.exp(-np.abs(t)) / (1.0 + np.exp(-np.abs(t))))
    return float(out) if out.ndim == 0 else out


def clamp_accuracy(acc: float, n: int) -> float:
    """Pull 0 or 1 into ``[1/(2n), 1 - 1/(2n)]`` so the logit stays finite."""
    lo, hi = 1.0 / (2 * n), 1.0 - 1.0 / (2 * n)
    if acc < lo or acc > hi:
        log.warning("accuracy %r clamped into [%r, %r] for logit scaling", acc, lo, hi)
        return min(max(acc, lo), hi)
    return acc


@dataclass(frozen=True)
class RobustnessFit:
    slope: float
    intercept: float
    points: tuple[tuple[float, float], ...]
    residuals: tuple[float, ...]

    def baseline(self, acc_ref: float) -> float:
        return sigmoid(self.slope * logit(acc_ref) + self.intercept)

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "points": [list(p) for p in self.points],
            "residuals": list(self.residuals),
        }


def fit_baseline(points: Sequence[tuple[float, float]]) -> RobustnessFit:
    """Least-squares line through ``(logit(acc_ref), logit(acc_shift))``.

    Sums use ``math.fsum`` so the fit does not depend on point order.
    """
    pts = [(float(a), float(b)) for a, b in points]
    if len(pts) < 2:
        raise FitError("need at least two points")
    for a, b in pts:
        if not (0.0 < a < 1.0 and 0.0 < b < 1.0):
            raise DomainError(
                f"accuracy {a if not 0 < a < 1 else b} is outside (0, 1); clamp it with clamp_accuracy first"
            )
    xs = [logit(a) for a, _ in pts]
    ys = [logit(b) for _, b in pts]
    n = len(pts)
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    sxx = math.fsum((x - mx) ** 2 for x in xs)
    if sxx == 0.0:
        raise FitError("all reference accuracies are equal; the slope is undefined")
    sxy = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    slope = sxy / sxx
    intercept = my - slope * mx
    residuals = tuple(y - (slope * x + intercept) for x, y in zip(xs, ys))
    return RobustnessFit(slope, intercept, tuple(pts), residuals)


def effective_robustness(fit: RobustnessFit, acc_ref: float, acc_shift: float) -> float:
    """Shift accuracy above the baseline's prediction, in accuracy units."""
    return acc_shift - fit.baseline(acc_ref)


# --------------------------------------------------------------------- diversity


def prediction_diversity(preds_f, preds_g, labels) -> float:
    f = np.asarray(preds_f)
    g = np.asarray(preds_g)
    y = np.asarray(labels)
    fc, gc = f == y, g == y
    return float(np.mean(fc != gc))


def cohens_kappa_complement(preds_f, preds_g, k: int) -> float:
    f = np.asarray(preds_f)
    g = np.asarray(preds_g)
    n = f.size
    if n == 0:
        raise UndefinedMetricError("no samples")
    p_o = float(np.mean(f == g))
    nf = np.bincount(f, minlength=k)
    ng = np.bincount(g, minlength=k)
    p_e = float(nf @ ng) / (n * n)
    if p_e >= 1.0:
        raise UndefinedMetricError("expected agreement is 1; Cohen's kappa is undefined")
    return (1.0 - p_o) / (1.0 - p_e)


def mean_kl(logits_f, logits_g) -> float:
    lf = log_softmax(np.atleast_2d(logits_f))
    lg = log_softmax(np.atleast_2d(logits_g))
    return float(np.mean(np.sum(np.exp(lf) * (lf - lg), axis=1)))


def ckac(features_f, features_g, cap: int = 10_000, seed: int = 0) -> float:
    """One minus linear CKA between two feature matrices over the same samples."""
    sf = np.asarray(features_f, dtype=np.float64)
    sg = np.asarray(features_g, dtype=np.float64)
    if sf.shape[0] != sg.shape[0]:
        raise DomainError("feature matrices must cover the same samples")
    if sf.shape[0] < 2:
        raise DomainError("need at least two samples")
    if sf.shape[0] > cap:
        rows = sorted(rng.stream(seed, "metrics.ckac").sample_without_replacement(sf.shape[0], cap))
        sf, sg = sf[rows], sg[rows]
    sf = sf - sf.mean(axis=0)
    sg = sg - sg.mean(axis=0)
    nff = np.linalg.norm(sf.T @ sf)
    ngg = np.linalg.norm(sg.T @ sg)
    if nff == 0.0 or ngg == 0.0:
        raise UndefinedMetricError("a centered feature matrix is zero; CKA is undefined")
    cka = np.linalg.norm(sg.T @ sf) ** 2 / (nff * ngg)
    return float(1.0 - cka)


def override_analysis(
    preds_zero,
    preds_ft,
    preds_ensemble,
    denominator: Literal["all", "disagreement"] = "all",
) -> tuple[float, float, float]:
    """Fractions where, on disagreement, the ensemble sides with zero-shot / fine-tuned / neither.

    Returns ``(overrides, overridden, neither)``: "overrides" counts samples
    where the ensemble matches the zero-shot model, "overridden" where it
    matches the fine-tuned model.
    """
    z = np.asarray(preds_zero)
    f = np.asarray(preds_ft)
    e = np.asarray(preds_ensemble)
    disagree = z != f
    counts = (
        int(np.sum(disagree & (e == z))),
        int(np.sum(disagree & (e == f))),
        int(np.sum(disagree & (e != z) & (e != f))),
    )
    if denominator == "all":
        total = z.size
    elif denominator == "disagreement":
        total = int(disagree.sum())
    else:
        raise DomainError(f"unknown denominator {denominator!r}")
    if total == 0:
        return 0.0, 0.0, 0.0
    return tuple(c / total for c in counts)


def margin_stats(logit_rows) -> float:
    return float(np.mean(margin(np.atleast_2d(logit_rows))))


@dataclass(frozen=True)
class DiversityReport:
    pd: float
    cc: float | None
    kl_mean: float
    ckac: float | None
    margin_zero_shot: float
    margin_finetuned: float
    frac_overrides: float
    frac_overridden: float
    frac_neither: float

    def to_dict(self) -> dict:
        return asdict(self)


def diversity_report(
    logits_zero: np.ndarray,
    logits_ft: np.ndarray,
    logits_ensemble: np.ndarray,
    features_zero: np.ndarray,
    features_ft: np.ndarray,
    labels: np.ndarray,
    k: int,
    ckac_seed: int = 0,
) -> DiversityReport:
    """All pairwise measures between the zero-shot and fine-tuned classifiers.

    Undefined CC or CKAC values are reported as ``None``.
    """
    pz, pf, pe = predict(logits_zero), predict(logits_ft), predict(logits_ensemble)
    try:
        cc = cohens_kappa_complement(pz, pf, k)
    except UndefinedMetricError:
        cc = None
    try:
        ck = ckac(features_zero, features_ft, seed=ckac_seed)
    except UndefinedMetricError:
        ck = None
    over, overridden, neither = override_analysis(pz, pf, pe)
    return DiversityReport(
        pd=prediction_diversity(pz, pf, labels),
        cc=cc,
        kl_mean=mean_kl(logits_zero, logits_ft),
        ckac=ck,
        margin_zero_shot=margin_stats(logits_zero),
        margin_finetuned=margin_stats(logits_ft),
        frac_overrides=over,
        frac_overridden=overridden,
        frac_neither=neither,
    )


# -------------------------------------------------------------- linear connectivity


@dataclass(frozen=True)
class Observation1Result:
    worst_margin: float
    worst_alpha: float
    best_alpha: float
    best_accuracy: float
    beats_both: bool

    def to_dict(self) -> dict:
        return asdict(self)


def observation1_check(alpha_accs: Sequence[tuple[float, float]], acc0: float, acc1: float) -> Observation1Result:
    """Compare the interpolation curve with the straight line between its endpoints.

    ``worst_margin`` is ``min_alpha acc(alpha) - ((1 - alpha) acc0 + alpha acc1)``;
    negative values are violations.  ``beats_both`` records whether some
    alpha reaches ``max(acc0, acc1)``.
    """
    if not alpha_accs:
        raise DomainError("empty curve")
    margins = [(acc - ((1.0 - a) * acc0 + a * acc1), a) for a, acc in alpha_accs]
    worst_margin, worst_alpha = min(margins, key=lambda t: t[0])
    best_acc, neg_alpha = max((acc, -a) for a, acc in alpha_accs)
    return Observation1Result(
        worst_margin=worst_margin,
        worst_alpha=worst_alpha,
        best_alpha=-neg_alpha,
        best_accuracy=best_acc,
        beats_both=best_acc >= max(acc0, acc1),
    )
