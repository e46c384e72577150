"""Evaluation metrics over accuracy matrices and query logs.

Accuracies are fractions in [0, 1]. An accuracy matrix ``am`` is a ``(T, T)``
array with ``am[t, i]`` the test accuracy on task ``i`` after training through
task ``t``; entries for tasks not yet seen are NaN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MMRR_EPSILON = 1e-3
TIMING_PARTS = 100
TIMING_EDGES = (25, 74)


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    if preds.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(preds == labels))


@dataclass(frozen=True)
class ClassAccuracy:
    per_class: np.ndarray  # NaN for classes absent from the test set
    overall: float
    balanced: float
    low_freq: float  # NaN when the group is empty
    high_freq: float


def per_class_accuracy(preds, labels, num_classes: int, low_freq=()) -> ClassAccuracy:
    """Accuracy within each class, then means over the low- and high-frequency groups."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    overall = accuracy(preds, labels)
    hits = np.bincount(labels, weights=(preds == labels).astype(np.float64), minlength=num_classes)
    counts = np.bincount(labels, minlength=num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        per = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
    low = np.zeros(num_classes, dtype=bool)
    low[list(low_freq)] = True

    def group_mean(mask):
        vals = per[mask & (counts > 0)]
        return float(vals.mean()) if vals.size else float("nan")

    return ClassAccuracy(per, overall, group_mean(np.ones_like(low)), group_mean(low), group_mean(~low))


def mean_last_k(values, k: int) -> float:
    values = np.asarray(values, dtype=np.float64)
    if not 1 <= k <= values.size:
        raise ValueError(f"k={k} outside 1..{values.size}")
    return float(values[-k:].mean())


def mmrr(per_task_acc, epsilon: float = MMRR_EPSILON) -> float:
    """``1 / (a_max - a_T + epsilon)`` with ``a_max`` the best accuracy over the stream."""
    a = np.asarray(per_task_acc, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty accuracy vector")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    gap = a.max() - a[-1] + epsilon
    return float("inf") if gap == 0 else float(1.0 / gap)


def bwt(am) -> float:
    """Mean over ``i < T`` of ``a[T, i] - a[i, i]``."""
    am = np.asarray(am, dtype=np.float64)
    if am.ndim != 2 or am.shape[0] != am.shape[1]:
        raise ValueError("accuracy matrix must be square")
    T = am.shape[0]
    if T < 2:
        raise ValueError("BWT needs at least two tasks")
    return float(np.mean(am[T - 1, : T - 1] - np.diag(am)[: T - 1]))


def hpo_cost(acc0: float, mean_acc: float, acc_t: float, w1: float, w2: float, w3: float) -> float:
    return w1 * acc0 + w2 * mean_acc + w3 * acc_t


@dataclass(frozen=True)
class QueryTiming:
    fractions: np.ndarray  # (tasks, 3): first quarter, middle, last quarter
    empty: np.ndarray  # per task, True when nothing was queried


def query_timing(query_log, edges=TIMING_EDGES, parts: int = TIMING_PARTS) -> QueryTiming:
    """Share of each task's queries falling in parts ``[0, e0)``, ``[e0, e1)``, ``[e1, parts)``.

    Each task's events are split into ``parts`` equal parts; event ``j`` of
    ``n`` falls in part ``floor(j * parts / n)``.
    """
    lo, hi = edges
    if not 0 < lo < hi < parts:
        raise ValueError("edges must satisfy 0 < e0 < e1 < parts")
    rows, empty = [], []
    for q in query_log:
        q = np.asarray(q, dtype=bool)
        n = q.size
        part = (np.arange(n) * parts) // max(n, 1)
        counts = np.array([q[part < lo].sum(), q[(part >= lo) & (part < hi)].sum(), q[part >= hi].sum()], float)
        total = counts.sum()
        empty.append(total == 0)
        rows.append(counts / total if total else counts)
    return QueryTiming(np.array(rows).reshape(-1, 3), np.array(empty, dtype=bool))
