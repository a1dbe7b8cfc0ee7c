"""Clustering evaluation: accuracy under optimal label matching, NMI, ARI,
and a scale-free cluster-compactness diagnostic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class MetricReport:
    acc: float
    nmi: float
    ari: float
    contingency: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "contingency", np.asarray(self.contingency, dtype=np.int64))


def _check_labelings(pred, truth):
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"pred has length {pred.shape[0]}, truth has {truth.shape[0]}")
    if pred.size == 0:
        raise ValueError("empty labelings")
    if pred.min() < 0 or truth.min() < 0:
        raise ValueError("labels must be nonnegative")
    return pred, truth


def contingency_matrix(pred, truth) -> np.ndarray:
    """K_pred x K_true count matrix over the distinct labels of each side."""
    pred, truth = _check_labelings(pred, truth)
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    table = np.zeros((pi.max() + 1, ti.max() + 1), dtype=np.int64)
    np.add.at(table, (pi, ti), 1)
    return table


def clustering_accuracy(pred, truth) -> float:
    """Fraction matched under the best bijection between predicted and true labels.

    The contingency matrix is zero-padded square so the optimal assignment is
    defined even when the two sides use different numbers of clusters.
    """
    pred, truth = _check_labelings(pred, truth)
    table = contingency_matrix(pred, truth)
    k = max(table.shape)
    padded = np.zeros((k, k), dtype=np.int64)
    padded[: table.shape[0], : table.shape[1]] = table
    rows, cols = linear_sum_assignment(padded, maximize=True)
    return float(padded[rows, cols].sum()) / pred.size


def nmi(pred, truth) -> float:
    """Mutual information normalized by the geometric mean of the two entropies."""
    pred, truth = _check_labelings(pred, truth)
    table = contingency_matrix(pred, truth).astype(np.float64)
    n = table.sum()
    joint = table / n
    p_row = joint.sum(axis=1)
    p_col = joint.sum(axis=0)
    h_row = -np.sum(p_row * np.log(p_row, where=p_row > 0, out=np.zeros_like(p_row)))
    h_col = -np.sum(p_col * np.log(p_col, where=p_col > 0, out=np.zeros_like(p_col)))
    if h_row <= 0 or h_col <= 0:
        # at least one side is a single cluster; identical partitions score 1
        return 1.0 if h_row == h_col else 0.0
    nz = joint > 0
    mi = np.sum(joint[nz] * np.log(joint[nz] / np.outer(p_row, p_col)[nz]))
    return float(mi / np.sqrt(h_row * h_col))


def ari(pred, truth) -> float:
    """Adjusted Rand index from contingency pair counts."""
    pred, truth = _check_labelings(pred, truth)
    table = contingency_matrix(pred, truth)

    def pairs(x):
        x = x.astype(np.float64)
        return (x * (x - 1) / 2).sum()

    n = pred.size
    index = pairs(table)
    row_pairs = pairs(table.sum(axis=1))
    col_pairs = pairs(table.sum(axis=0))
    total_pairs = n * (n - 1) / 2
    expected = row_pairs * col_pairs / total_pairs if total_pairs > 0 else 0.0
    max_index = (row_pairs + col_pairs) / 2
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def compactness(latents, labels) -> float:
    """Mean distance to own-cluster centroid over mean distance between centroids.

    Scale-free: rescaling all latents by a positive constant leaves it unchanged.
    """
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if latents.ndim != 2 or latents.shape[0] != labels.shape[0]:
        raise ValueError(
            f"latents {latents.shape} incompatible with labels of length {labels.shape[0]}"
        )
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ValueError("compactness needs at least 2 distinct clusters")
    centroids = np.stack([latents[labels == c].mean(axis=0) for c in uniq])
    own = centroids[np.searchsorted(uniq, labels)]
    within = np.linalg.norm(latents - own, axis=1).mean()
    iu = np.triu_indices(len(uniq), k=1)
    between = np.linalg.norm(centroids[iu[0]] - centroids[iu[1]], axis=1).mean()
    return float(within / between)


def evaluate(pred, truth) -> MetricReport:
    return MetricReport(
        acc=clustering_accuracy(pred, truth),
        nmi=nmi(pred, truth),
        ari=ari(pred, truth),
        contingency=contingency_matrix(pred, truth),
    )
