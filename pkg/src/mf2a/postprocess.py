"""Identification of the raw trace: mode filtering on K_plus, relabelling by
clustering the draws in a point-process feature space, mode filtering on the
active factor counts and posterior summaries of the cluster covariances.
"""

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans

from .exceptions import DataError, PostprocessError
from .stats import lowrank_logpdf_rows


@dataclass
class IdentifiedPosterior:
    K_hat: int
    H_hat: np.ndarray
    M_retained: int
    mu_mean: np.ndarray
    omega_mean: np.ndarray
    omega_second_moment: np.ndarray
    draws: list
    draw_iters: list
    attrition: dict = field(default_factory=dict)
    allocation: np.ndarray = None
    H_relabelled: np.ndarray = None


def _mode(values):
    """Most frequent value; ties go to the smallest."""
    counts = Counter(int(v) for v in values)
    best = max(counts.values())
    return min(v for v, c in counts.items() if c == best)


def select_mode_Kplus(trace):
    """Modal number of filled clusters and the draws that have exactly that many."""
    if not trace:
        raise DataError("empty trace")
    K_hat = _mode(d.K_plus for d in trace)
    return K_hat, [d for d in trace if d.K_plus == K_hat]


def draw_features(draw):
    """Per-cluster feature rows ``(mu, log|Omega|, log tr Omega, log(v_max / v_min))``."""
    omegas = draw.omegas()
    eig = np.linalg.eigvalsh(omegas)
    logdet = np.sum(np.log(eig), axis=1)
    logtr = np.log(np.trace(omegas, axis1=1, axis2=2))
    cond = np.log(eig[:, -1] / eig[:, 0])
    return np.column_stack([draw.mu, logdet, logtr, cond])


def relabel_draws(filtered, K_hat, seed=0, n_init=10):
    """Resolve label switching among draws with ``K_plus == K_hat``.

    Returns the relabelled draws (only those whose cluster-to-centre map is a
    permutation) and the number removed.
    """
    if not filtered:
        raise PostprocessError("no draws to relabel", {"in": 0})
    feats = np.vstack([draw_features(d) for d in filtered])
    sd = feats.std(axis=0)
    sd[sd == 0] = 1.0
    z = (feats - feats.mean(axis=0)) / sd
    km = KMeans(n_clusters=K_hat, n_init=n_init, random_state=seed).fit(z)
    labels = km.labels_.reshape(len(filtered), K_hat)
    target = np.arange(K_hat)
    out = []
    for d, rho in zip(filtered, labels):
        if np.array_equal(np.sort(rho), target):
            # cluster j of the draw belongs to centre rho[j]; new slot c holds old argwhere(rho == c)
            out.append(d.permuted(np.argsort(rho)))
    return out, len(filtered) - len(out)


def select_mode_H(draws):
    """Per-cluster modal active-factor counts and the draws matching all of them."""
    if not draws:
        raise DataError("no draws")
    Hk = np.array([d.H_k for d in draws])
    H_hat = np.array([_mode(Hk[:, k]) for k in range(Hk.shape[1])])
    keep = np.all(Hk == H_hat, axis=1)
    return H_hat, [d for d, ok in zip(draws, keep) if ok]


def extract_active_loadings(draw, H_hat=None):
    """Loading matrices restricted to their active (slab) columns, order preserved."""
    out = [draw.lam[k][:, draw.indicator[k] == 1] for k in range(draw.K_plus)]
    if H_hat is not None and [m.shape[1] for m in out] != [int(h) for h in H_hat]:
        raise DataError("draw does not match the modal active-factor counts")
    return out


def posterior_covariance(draws):
    """Average of ``lam lam' + diag(xi2)`` (full H columns) over the draws, per cluster."""
    if not draws:
        raise DataError("no draws")
    return np.mean([d.omegas() for d in draws], axis=0)


def modal_allocation(draws, K_hat, T=None):
    """Most frequent cluster per observation over draws that carry allocations."""
    allocs = [d.alloc for d in draws if d.alloc is not None]
    if not allocs:
        return None
    A = np.array(allocs)
    counts = np.zeros((A.shape[1], K_hat), dtype=int)
    for k in range(K_hat):
        counts[:, k] = np.sum(A == k, axis=0)
    return np.argmax(counts, axis=1)


def draw_loglik(draw, Y):
    """Observed-data log likelihood with plug-in weights ``counts / T``."""
    w = draw.counts[: draw.K_plus] / np.sum(draw.counts)
    logp = np.column_stack([
        np.log(w[k]) + lowrank_logpdf_rows(Y, draw.mu[k], draw.lam[k], draw.xi2[k])
        for k in range(draw.K_plus)
    ])
    top = logp.max(axis=1)
    return float(np.sum(top + np.log(np.sum(np.exp(logp - top[:, None]), axis=1))))


def identify(trace, seed=0, min_draws=2):
    """Full pipeline from a raw trace to an :class:`IdentifiedPosterior`."""
    attrition = {"input": len(trace)}
    K_hat, filtered = select_mode_Kplus(trace)
    attrition["removed_Kplus_mode"] = len(trace) - len(filtered)
    attrition["after_Kplus_mode"] = len(filtered)
    relabelled, removed = relabel_draws(filtered, K_hat, seed=seed)
    attrition["removed_not_permutation"] = removed
    attrition["after_relabel"] = len(relabelled)
    if len(relabelled) < min_draws:
        raise PostprocessError("too few draws survive relabelling", attrition)
    H_hat, final = select_mode_H(relabelled)
    attrition["removed_H_mode"] = len(relabelled) - len(final)
    attrition["final"] = len(final)
    if len(final) < 1:
        raise PostprocessError("no draws left after the factor-count filter", attrition)
    omegas = np.array([d.omegas() for d in final])
    return IdentifiedPosterior(
        K_hat=K_hat,
        H_hat=H_hat,
        M_retained=len(final),
        mu_mean=np.mean([d.mu for d in final], axis=0),
        omega_mean=omegas.mean(axis=0),
        omega_second_moment=np.mean(omegas * omegas, axis=0),
        draws=final,
        draw_iters=[d.iter for d in final],
        attrition=attrition,
        allocation=modal_allocation(final, K_hat),
        H_relabelled=np.array([d.H_k for d in relabelled]),
    )
