"""Clustering and covariance recovery scores against a known truth."""

from dataclasses import dataclass, field
from math import comb

import numpy as np
from scipy.optimize import linear_sum_assignment

from .exceptions import DomainError


@dataclass
class ScoreReport:
    ari: float
    error_pct: float
    mse_omega: list = field(default_factory=list)
    confusion: np.ndarray = None
    matching: dict = field(default_factory=dict)


def _check_pair(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise DomainError(f"label vectors differ in shape: {a.shape} vs {b.shape}")
    return a, b


def confusion_matrix(est, truth):
    """Counts of (true class, estimated cluster) pairs.

    Rows follow the sorted distinct true labels, columns the sorted distinct
    estimated labels.
    """
    est, truth = _check_pair(est, truth)
    t_lab, t_idx = np.unique(truth, return_inverse=True)
    e_lab, e_idx = np.unique(est, return_inverse=True)
    out = np.zeros((len(t_lab), len(e_lab)), dtype=int)
    np.add.at(out, (t_idx, e_idx), 1)
    return out


def adjusted_rand_index(a, b):
    """Hubert-Arabie adjusted Rand index (pair counts in exact integers)."""
    a, b = _check_pair(a, b)
    n = len(a)
    if n < 2:
        raise DomainError("need at least two observations")
    table = confusion_matrix(a, b)
    sum_ij = sum(comb(int(x), 2) for x in table.ravel())
    sum_a = sum(comb(int(x), 2) for x in table.sum(axis=1))
    sum_b = sum(comb(int(x), 2) for x in table.sum(axis=0))
    total = comb(n, 2)
    # ARI = (sum_ij - sum_a sum_b / total) / (0.5 (sum_a + sum_b) - sum_a sum_b / total),
    # scaled by 2 * total to stay in integers
    num = 2 * (total * sum_ij - sum_a * sum_b)
    den = total * (sum_a + sum_b) - 2 * sum_a * sum_b
    if den == 0:
        return 1.0
    return num / den


def match_clusters(est, truth):
    """Optimal one-to-one map ``{estimated label: true label}`` maximising agreement."""
    est, truth = _check_pair(est, truth)
    t_lab = np.unique(truth)
    e_lab = np.unique(est)
    table = confusion_matrix(est, truth)
    rows, cols = linear_sum_assignment(-table)
    return {e_lab[c].item(): t_lab[r].item() for r, c in zip(rows, cols)}


def misclassification_rate(est, truth):
    """Percentage of observations misclassified under the best label matching.

    Estimated clusters left unmatched (more clusters than classes) count as errors.
    """
    est, truth = _check_pair(est, truth)
    table = confusion_matrix(est, truth)
    rows, cols = linear_sum_assignment(-table)
    correct = table[rows, cols].sum()
    return 100.0 * (len(est) - correct) / len(est)


def mse_omega(omega_draws, truth_omegas, matching=None):
    """Monte-Carlo MSE of the cluster covariances over the upper triangle.

    ``omega_draws`` has shape (M, K, p, p) (retained draws by estimated
    cluster); ``matching`` maps estimated cluster index to true cluster index
    (identity when None).  Returns ``{estimated cluster: mse}`` for matched
    clusters.
    """
    omega_draws = np.asarray(omega_draws, dtype=float)
    M, K, p, _ = omega_draws.shape
    if matching is None:
        matching = {k: k for k in range(min(K, len(truth_omegas)))}
    iu = np.triu_indices(p)
    out = {}
    for k, j in matching.items():
        diff = omega_draws[:, k][:, iu[0], iu[1]] - np.asarray(truth_omegas[j])[iu]
        out[k] = float(np.mean(np.sum(diff * diff, axis=1)) / (p * (p + 1) / 2))
    return out


def mse_omega_from_moments(mean, second_moment, truth_omega):
    """Same quantity as :func:`mse_omega` from the per-entry first and second moments."""
    p = mean.shape[0]
    iu = np.triu_indices(p)
    t = np.asarray(truth_omega)[iu]
    val = second_moment[iu] - 2.0 * t * mean[iu] + t * t
    return float(np.sum(val) / (p * (p + 1) / 2))
