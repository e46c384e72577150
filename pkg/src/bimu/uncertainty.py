"""Monte-Carlo uncertainty scores over a set of K softmax vectors.

Entropies are in nats and ``0 log 0`` is taken as 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PREDICTIVE = "predictive"
ALEATORIC = "aleatoric"
EPISTEMIC = "epistemic"
VR = "vr"
VR_TRUE = "vr_true"
SCORE_KINDS = (PREDICTIVE, ALEATORIC, EPISTEMIC, VR, VR_TRUE)


@dataclass(frozen=True)
class PredictionSet:
    """K softmax vectors over C classes, shape ``(K, C)``."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"need a (K, C) array, got shape {v.shape}")
        if np.any(v < 0) or np.any(np.abs(v.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("each vector must be a probability distribution")
        object.__setattr__(self, "vectors", v)

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def C(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class UncertaintyReport:
    predictive: float
    aleatoric: float
    epistemic: float
    vr: float
    mode_class: int


def entropy(p, axis: int = -1):
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


def _votes(probs):
    """Argmax vote counts per example: ``(K, B, C) -> (B, C)``."""
    K, B, C = probs.shape
    pred = probs.argmax(axis=-1)
    counts = np.zeros((B, C), dtype=np.int64)
    for k in range(K):
        counts[np.arange(B), pred[k]] += 1
    return counts, pred


def score_batch(probs) -> dict[str, np.ndarray]:
    """Vectorized scores for ``probs`` of shape ``(K, B, C)``.

    Returns arrays of length B keyed by score kind, plus ``"mode_class"``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3:
        raise ValueError("expected (K, B, C) probabilities")
    K = probs.shape[0]
    predictive = entropy(probs.mean(axis=0))
    aleatoric = entropy(probs).mean(axis=0)
    counts, _ = _votes(probs)
    return {
        PREDICTIVE: predictive,
        ALEATORIC: aleatoric,
        EPISTEMIC: predictive - aleatoric,
        # (K - f_mode) / K keeps VR an exact multiple of 1/K, so a threshold
        # n/K compares exactly (1 - 8/10 would round below 0.2)
        VR: (K - counts.max(axis=1)) / K,
        # argmax returns the first maximum, i.e. the lowest tied class
        "mode_class": counts.argmax(axis=1),
    }


def score(v: PredictionSet) -> UncertaintyReport:
    s = score_batch(v.vectors[:, None, :])
    return UncertaintyReport(
        float(s[PREDICTIVE][0]),
        float(s[ALEATORIC][0]),
        float(s[EPISTEMIC][0]),
        float(s[VR][0]),
        int(s["mode_class"][0]),
    )


def vr_true_batch(probs, labels) -> np.ndarray:
    """Fraction of MC predictors disagreeing with the true label, per example."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= probs.shape[-1]):
        raise ValueError("label out of range")
    K = probs.shape[0]
    hits = (probs.argmax(axis=-1) == labels[None, :]).sum(axis=0)
    return (K - hits) / K


def vr_true(v: PredictionSet, y: int) -> float:
    """``1 - (1/K) sum_k [argmax_k == y]``; needs the label, so diagnostic only."""
    return float(vr_true_batch(v.vectors[:, None, :], [y])[0])


def roc_auc(scores_in, scores_out, thresholds: int = 1000) -> float:
    """Trapezoidal ROC-AUC with OOD as the positive class (higher = more OOD).

    The curve is traced at ``thresholds`` uniformly spaced cut points from the
    smallest to the largest score of either group, closed at (0, 0).
    """
    a = np.asarray(scores_in, dtype=np.float64).ravel()
    b = np.asarray(scores_out, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both score sets must be non-empty")
    if thresholds < 2:
        raise ValueError("thresholds must be >= 2")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    cuts = np.linspace(lo, hi, thresholds)
    # counts of scores >= each cut via sorted search
    fpr = (a.size - np.searchsorted(np.sort(a), cuts, side="left")) / a.size
    tpr = (b.size - np.searchsorted(np.sort(b), cuts, side="left")) / b.size
    fpr = np.concatenate([fpr[::-1], [1.0]])
    tpr = np.concatenate([tpr[::-1], [1.0]])
    fpr = np.concatenate([[0.0], fpr])
    tpr = np.concatenate([[0.0], tpr])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))
