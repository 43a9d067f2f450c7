"""Detection (FPR95, AUROC) and calibration (ECE, SCE) metrics.

Scores follow the "higher means in-distribution" convention; ID is the
positive class.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .numcore import ContractError

DEFAULT_BINS = 15


@dataclass(frozen=True)
class ScoreSet:
    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.id_scores, dtype=np.float64).ravel()
        ood = np.asarray(self.ood_scores, dtype=np.float64).ravel()
        if ids.size == 0 or ood.size == 0:
            raise ContractError("both ID and OOD scores must be non-empty")
        if not (np.all(np.isfinite(ids)) and np.all(np.isfinite(ood))):
            raise ContractError("scores must be finite")
        object.__setattr__(self, "id_scores", ids)
        object.__setattr__(self, "ood_scores", ood)


def _scores(scores, ood=None) -> ScoreSet:
    if ood is not None:
        return ScoreSet(scores, ood)
    return scores if isinstance(scores, ScoreSet) else ScoreSet(*scores)


def tpr95_threshold(id_scores: np.ndarray) -> float:
    """Largest threshold that still accepts at least 95% of ID scores."""
    n = id_scores.size
    need = (95 * n + 99) // 100  # ceil(0.95 n) in integers
    return float(np.sort(id_scores)[::-1][need - 1])


def fpr_at_95_tpr(scores, ood=None) -> float:
    """Fraction of OOD scores >= the 95%-TPR threshold.

    Accepts a ScoreSet or ``(id_scores, ood_scores)``.
    """
    s = _scores(scores, ood)
    lam = tpr95_threshold(s.id_scores)
    return float(np.count_nonzero(s.ood_scores >= lam) / s.ood_scores.size)


def auroc(scores, ood=None) -> float:
    """P(id > ood) + 0.5 P(id == ood) via the Mann-Whitney rank statistic."""
    s = _scores(scores, ood)
    n1, n0 = s.id_scores.size, s.ood_scores.size
    ranks = rankdata(np.concatenate([s.id_scores, s.ood_scores]))
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


@dataclass(frozen=True)
class CalibrationInput:
    probs: np.ndarray
    labels: np.ndarray
    num_bins: int = DEFAULT_BINS

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if p.ndim != 2 or y.shape != (p.shape[0],) or p.shape[0] == 0:
            raise ContractError("probs must be (N, C) with N >= 1 labels")
        if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9) or np.any(p < 0):
            raise ContractError("probability rows must be non-negative and sum to 1")
        if self.num_bins < 1:
            raise ContractError("num_bins must be >= 1")
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "labels", y)


def bin_index(values: np.ndarray, num_bins: int) -> np.ndarray:
    """Equal-width bins on [0, 1], right-inclusive: (0, 1/B], ..., ((B-1)/B, 1].

    Zero goes to the first bin.
    """
    idx = np.ceil(values * num_bins).astype(np.int64) - 1
    return np.clip(idx, 0, num_bins - 1)


def _binned_gap(conf: np.ndarray, hit: np.ndarray, num_bins: int) -> float:
    bins = bin_index(conf, num_bins)
    n = conf.size
    counts = np.bincount(bins, minlength=num_bins)
    conf_sum = np.bincount(bins, weights=conf, minlength=num_bins)
    hit_sum = np.bincount(bins, weights=hit.astype(np.float64), minlength=num_bins)
    nz = counts > 0
    return float(np.sum(np.abs(hit_sum[nz] - conf_sum[nz])) / n)


def reliability_bins(cal: CalibrationInput) -> list[tuple[int, int, float, float]]:
    """Per-bin (bin, count, accuracy, confidence) for the top-label ECE."""
    conf = cal.probs.max(axis=1)
    hit = cal.probs.argmax(axis=1) == cal.labels
    bins = bin_index(conf, cal.num_bins)
    rows = []
    for b in range(cal.num_bins):
        sel = bins == b
        if sel.any():
            rows.append((b, int(sel.sum()), float(hit[sel].mean()), float(conf[sel].mean())))
    return rows


def ece(cal: CalibrationInput) -> float:
    conf = cal.probs.max(axis=1)
    hit = cal.probs.argmax(axis=1) == cal.labels
    return _binned_gap(conf, hit, cal.num_bins)


def sce(cal: CalibrationInput) -> float:
    """Class-wise ECE averaged over all classes, binning each class's probability."""
    C = cal.probs.shape[1]
    total = 0.0
    for c in range(C):
        total += _binned_gap(cal.probs[:, c], cal.labels == c, cal.num_bins)
    return total / C
