"""Hot numeric kernels with numba and pure-numpy implementations.

Each public name is bound to the numba variant when acceleration is enabled
(see :mod:`skillmem._accel`) and to the numpy variant otherwise.  Both
variants are importable under ``*_nb`` / ``*_np`` so tests and the benchmark
can compare them directly.
"""
from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

__all__ = [
    "topk_rows",
    "joint_log_prob_rows",
    "kmeans_assign",
    "USE_NUMBA",
]


# -- ordered top-k -----------------------------------------------------------


def topk_rows_np(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row, in descending order.

    Ties resolve to the lower index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


@njit
def topk_rows_nb(scores, k):
    n, m = scores.shape
    out = np.empty((n, k), dtype=np.int64)
    taken = np.zeros(m, dtype=np.bool_)
    for r in range(n):
        taken[:] = False
        for j in range(k):
            best = -1
            best_val = 0.0
            for i in range(m):
                if taken[i]:
                    continue
                v = scores[r, i]
                if best < 0 or v > best_val:
                    best = i
                    best_val = v
            taken[best] = True
            out[r, j] = best
    return out


# -- joint log-probability of ordered draws without replacement ---------------


def joint_log_prob_rows_np(probs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    n, k = actions.shape
    rows = np.arange(n)
    picked = probs[rows[:, None], actions]
    # remaining mass before the j-th draw, summed over the complement so that
    # small remainders keep full relative precision
    mask = np.ones_like(probs, dtype=bool)
    out = np.zeros(n)
    for j in range(k):
        remaining = np.where(mask, probs, 0.0).sum(axis=1)
        out += np.log(picked[:, j]) - np.log(remaining)
        mask[rows, actions[:, j]] = False
    return out


@njit
def joint_log_prob_rows_nb(probs, actions):
    n, k = actions.shape
    m = probs.shape[1]
    out = np.zeros(n)
    taken = np.zeros(m, dtype=np.bool_)
    for r in range(n):
        taken[:] = False
        acc = 0.0
        for j in range(k):
            remaining = 0.0
            for i in range(m):
                if not taken[i]:
                    remaining += probs[r, i]
            a = actions[r, j]
            acc += np.log(probs[r, a]) - np.log(remaining)
            taken[a] = True
        out[r] = acc
    return out


# -- k-means assignment step --------------------------------------------------


def kmeans_assign_np(points: np.ndarray, centroids: np.ndarray):
    """Nearest-centroid labels and squared distances (ties -> lower label)."""
    diff = points[:, None, :] - centroids[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    labels = np.argmin(d2, axis=1).astype(np.int64)
    return labels, d2[np.arange(len(points)), labels]


@njit
def kmeans_assign_nb(points, centroids):
    n, dim = points.shape
    c = centroids.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n)
    for i in range(n):
        best = -1
        best_d = 0.0
        for j in range(c):
            d = 0.0
            for t in range(dim):
                diff = points[i, t] - centroids[j, t]
                d += diff * diff
            if best < 0 or d < best_d:
                best = j
                best_d = d
        labels[i] = best
        dists[i] = best_d
    return labels, dists


if USE_NUMBA:
    topk_rows = topk_rows_nb
    joint_log_prob_rows = joint_log_prob_rows_nb
    kmeans_assign = kmeans_assign_nb
else:
    topk_rows = topk_rows_np
    joint_log_prob_rows = joint_log_prob_rows_np
    kmeans_assign = kmeans_assign_np
