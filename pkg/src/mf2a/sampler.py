"""Telescoping Gibbs sampler for the dynamic mixture of finite mixtures of factor analysers.

One iteration runs four blocks:

1. allocations ``S_t`` given weights and component densities (marginal over the
   factors), followed by a stable relabelling that puts filled components first;
2. (a) for every filled component: factors, loading rows, idiosyncratic
   precisions, mean, spike/slab indicators, slab probabilities and column
   variances; (b) the shared hyperparameters ``b_xi``, ``b_0``, ``b_theta``
   and ``alpha_B``;
3. the number of components ``K >= K_plus`` and the Dirichlet parameter
   ``alpha_M``;
4. fresh empty components drawn from the prior, then new weights.

Posterior-parameter helpers (``*_posterior``) are pure functions so they can be
checked against closed forms independently of the random draws.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import gammaln
from sklearn.cluster import KMeans

from .exceptions import ConfigError, DataError, NumericalError
from .model import ClusterParams, DrawRecord, Hyperparams, MixtureState, validate
from .stats import (
    RngStream,
    cholesky_spd,
    log_bnb_pmf,
    log_f_density,
    log_gamma_density,
    log_mv_t_isotropic,
    lowrank_logpdf_rows,
    sample_categorical_from_logits,
    sample_categorical_rows,
    stream_id,
)

logger = logging.getLogger(__name__)

BLOCK_INIT, BLOCK_MAIN, BLOCK_CLUSTER = 1, 2, 3

TAIL_RATIO = 1e-12
# tau is only used for reporting and for the conditional alpha_B update; keep it
# strictly inside (0, 1) when a tiny Beta shape underflows.
_TAU_EPS = 1e-300


@dataclass
class ChainConfig:
    hyper: Hyperparams = field(default_factory=Hyperparams)
    seed: int = 0
    chain_id: int = 0
    record_alloc_every: int = 1
    k_max_cap: int = 500
    mh_target_diag: bool = False
    threads: int = 1
    check_invariants: bool = False

    def __post_init__(self):
        if self.record_alloc_every < 1:
            raise ConfigError("record_alloc_every must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.hyper.K_init is not None and self.k_max_cap < self.hyper.K_init:
            raise ConfigError(f"k_max_cap={self.k_max_cap} is below K_init={self.hyper.K_init}")


@dataclass
class MhDiagnostics:
    accept_count_alpha_M: int = 0
    accept_count_alpha_B: int = 0
    proposals_alpha_M: int = 0
    proposals_alpha_B: int = 0
    applied_step_alpha_B: float = float("nan")

    @property
    def rate_alpha_M(self):
        return self.accept_count_alpha_M / max(self.proposals_alpha_M, 1)

    @property
    def rate_alpha_B(self):
        return self.accept_count_alpha_B / max(self.proposals_alpha_B, 1)

    def as_dict(self):
        return {
            "accept_count_alpha_M": self.accept_count_alpha_M,
            "accept_count_alpha_B": self.accept_count_alpha_B,
            "proposals_alpha_M": self.proposals_alpha_M,
            "proposals_alpha_B": self.proposals_alpha_B,
            "acceptance_rate_alpha_M": self.rate_alpha_M,
            "acceptance_rate_alpha_B": self.rate_alpha_B,
            "applied_step_alpha_B": self.applied_step_alpha_B,
        }


# ---------------------------------------------------------------------------
# Conjugate posterior parameters (pure)
# ---------------------------------------------------------------------------

def factor_posterior(lam, xi2, resid):
    """Posterior of the factor scores given centred observations ``resid`` (n x p).

    Returns the (n, H) posterior means and the lower Cholesky factor of the
    shared precision ``I + lam' diag(1/xi2) lam``.
    """
    A = lam / xi2[:, None]
    prec = np.eye(lam.shape[1]) + lam.T @ A
    L, _ = cholesky_spd(prec)
    mean = cho_solve((L, True), A.T @ resid.T, check_finite=False).T
    return mean, L


def loading_row_posterior(F, resid, xi2, theta):
    """Posterior of every row of the loading matrix.

    ``F`` is (n, H), ``resid`` the (n, p) observations minus the cluster mean.
    Row ``i`` has precision ``diag(1/theta) + F'F / xi2_i`` and mean
    ``precision^{-1} F' resid_i / xi2_i``.  Returns means (p, H) and the
    stacked lower Cholesky factors (p, H, H).
    """
    FtF = F.T @ F
    prec = np.diag(1.0 / theta)[None] + FtF[None] / xi2[:, None, None]
    rhs = (F.T @ resid).T / xi2[:, None]
    L, _ = cholesky_spd(prec)
    mean = np.linalg.solve(prec, rhs[..., None])[..., 0]
    return mean, L


def idio_precision_posterior(Y, mu, lam, F, a_xi, b_xi):
    """Gamma(shape, rate) posterior of ``1 / xi2_i`` for each variable."""
    E = Y - mu - F @ lam.T
    return a_xi + 0.5 * Y.shape[0], b_xi + 0.5 * np.sum(E * E, axis=0)


def cluster_mean_posterior(Y, lam, F, xi2, b0_mean, B0_diag):
    """Normal posterior (mean, diagonal variance) of the cluster mean."""
    n = Y.shape[0]
    var = 1.0 / (1.0 / B0_diag + n / xi2)
    s = np.sum(Y - F @ lam.T, axis=0)
    return var * (b0_mean / B0_diag + s / xi2), var


def indicator_log_odds(lam, alpha_B, a_theta, b_theta, a0, b0):
    """log P(I_h = 1 | column h) - log P(I_h = 0 | column h), one value per column."""
    H = lam.shape[1]
    slab = np.log(alpha_B / (alpha_B + H)) + log_mv_t_isotropic(lam, 2 * a_theta, b_theta / a_theta)
    spike = np.log(H / (alpha_B + H)) + log_mv_t_isotropic(lam, 2 * a0, b0 / a0)
    return np.atleast_1d(slab - spike)


def slab_prob_posterior(indicator, alpha_B, H):
    """Beta parameters of the slab probabilities given the indicators."""
    return alpha_B / H + indicator, 2.0 - indicator


def theta_posterior(lam, indicator, a_theta, b_theta, a0, b0):
    """Inverse-gamma (shape, rate) of each column variance given its indicator."""
    p = lam.shape[0]
    ss = 0.5 * np.sum(lam * lam, axis=0)
    on = indicator.astype(bool)
    shape = np.where(on, a_theta, a0) + 0.5 * p
    rate = np.where(on, b_theta, b0) + ss
    return shape, rate


def b_xi_posterior(xi2_filled, a_g, b_g, a_xi):
    """Gamma posterior of ``b_xi`` given the (K+, p) idiosyncratic variances."""
    return a_g + xi2_filled.shape[0] * a_xi, b_g + np.sum(1.0 / xi2_filled, axis=0)


def active_counts(indicators, H):
    """``(H_pp, H_inf)``: total active and inactive columns over filled clusters."""
    H_pp = int(np.sum(indicators))
    return H_pp, H * len(indicators) - H_pp


def b0_spike_posterior(theta, indicators, a0, a1, b1, H):
    _, H_inf = active_counts(indicators, H)
    off = ~np.asarray(indicators, dtype=bool)
    return a1 + H_inf * a0, b1 + np.sum(1.0 / np.asarray(theta)[off])


def b_theta_posterior(theta, indicators, a_theta, a2, b2, H):
    H_pp, _ = active_counts(indicators, H)
    on = np.asarray(indicators, dtype=bool)
    return a2 + H_pp * a_theta, b2 + np.sum(1.0 / np.asarray(theta)[on])


def log_target_alpha_B(alpha, H_pp, H_inf, H, a_alpha, b_alpha):
    """Log posterior of alpha_B with the slab probabilities integrated out."""
    return (H_pp * np.log(alpha / (alpha + H)) + H_inf * np.log(H / (alpha + H))
            + log_gamma_density(alpha, a_alpha, b_alpha))


def log_target_alpha_M(alpha, counts_filled, K, T, nu_l, nu_r):
    """Log posterior of alpha_M given the partition and K (weights integrated out)."""
    counts_filled = np.asarray(counts_filled, dtype=float)
    a = alpha / K
    return (log_f_density(alpha, nu_l, nu_r) + len(counts_filled) * np.log(alpha)
            + gammaln(alpha) - gammaln(T + alpha)
            + np.sum(gammaln(counts_filled + a) - gammaln(1.0 + a)))


def log_K_weights(K_values, counts_filled, alpha_M, bnb):
    """Unnormalised log p(K | partition, alpha_M) for each entry of ``K_values``."""
    K = np.asarray(K_values, dtype=float)
    n = np.asarray(counts_filled, dtype=float)
    Kp = len(n)
    a = alpha_M / K
    out = (log_bnb_pmf(K_values, bnb) + Kp * np.log(alpha_M) + gammaln(K + 1.0)
           - Kp * np.log(K) - gammaln(K - Kp + 1.0))
    out = out + np.sum(gammaln(n[None, :] + a[:, None]) - gammaln(1.0 + a[:, None]), axis=1)
    return out


# ---------------------------------------------------------------------------
# Metropolis-Hastings on the log scale
# ---------------------------------------------------------------------------

def log_acceptance_ratio(current, proposal, log_target):
    """Log acceptance ratio of a log-scale random walk (Jacobian included)."""
    return (log_target(proposal) - log_target(current)
            + np.log(proposal) - np.log(current))


def rw_log_mh(current, log_target, scale, rng):
    """One random-walk MH step on ``log(x)``; returns (value, accepted)."""
    proposal = current * np.exp(scale * rng.standard_normal())
    log_u = np.log(rng.random())
    if proposal > 0 and np.isfinite(proposal) and log_u < log_acceptance_ratio(current, proposal, log_target):
        return float(proposal), True
    return float(current), False


# ---------------------------------------------------------------------------
# Block 1
# ---------------------------------------------------------------------------

def _relabel_filled_first(state):
    counts = np.bincount(state.alloc, minlength=state.K)
    filled = counts > 0
    order = np.concatenate([np.flatnonzero(filled), np.flatnonzero(~filled)])
    inverse = np.empty_like(order)
    inverse[order] = np.arange(len(order))
    state.clusters = [state.clusters[j] for j in order]
    state.weights = state.weights[order]
    state.alloc = inverse[state.alloc]
    state.counts = counts[order]
    state.K_plus = int(filled.sum())
    return state


def allocation_logits(state, data):
    """(T, K) unnormalised log allocation probabilities."""
    with np.errstate(divide="ignore"):
        logw = np.log(state.weights)
    out = np.empty((data.T, state.K))
    for k, cl in enumerate(state.clusters):
        out[:, k] = logw[k] + lowrank_logpdf_rows(data.values, cl.mu, cl.lam, cl.xi2)
    return out


def update_allocations(state, data, rng):
    """Block 1: draw every allocation, recount, and relabel filled components first."""
    logits = allocation_logits(state, data)
    top = logits.max(axis=1)
    if not np.all(np.isfinite(top)):
        t = int(np.flatnonzero(~np.isfinite(top))[0])
        raise NumericalError("no component has finite density", observation=t)
    state.alloc = sample_categorical_rows(logits, rng)
    return _relabel_filled_first(state)


# ---------------------------------------------------------------------------
# Block 2a: per-cluster factor-analytic updates
# ---------------------------------------------------------------------------

def _draw_from_precision_chol(mean, L, rng):
    """mean + L^{-T} z for a single or stacked lower Cholesky factor."""
    z = rng.standard_normal(mean.shape)
    if L.ndim == 2:
        if mean.ndim == 1:
            return mean + solve_triangular(L.T, z, lower=False, check_finite=False)
        return mean + solve_triangular(L.T, z.T, lower=False, check_finite=False).T
    Lt = np.swapaxes(L, -1, -2)
    return mean + np.linalg.solve(Lt, z[..., None])[..., 0]


def _cluster_data(k, state, data):
    return data.values[state.alloc == k]


def sample_factors(k, state, data, rng):
    cl = state.clusters[k]
    Y = _cluster_data(k, state, data)
    mean, L = factor_posterior(cl.lam, cl.xi2, Y - cl.mu)
    cl.factors = _draw_from_precision_chol(mean, L, rng)
    cl.members = np.flatnonzero(state.alloc == k)
    return cl


def sample_loading_rows(k, state, data, rng):
    cl = state.clusters[k]
    Y = _cluster_data(k, state, data)
    mean, L = loading_row_posterior(cl.factors, Y - cl.mu, cl.xi2, cl.theta)
    cl.lam = _draw_from_precision_chol(mean, L, rng)
    return cl


def sample_idio_precisions(k, state, data, rng, hyper):
    cl = state.clusters[k]
    Y = _cluster_data(k, state, data)
    shape, rate = idio_precision_posterior(Y, cl.mu, cl.lam, cl.factors, hyper.a_xi, state.b_xi)
    cl.xi2 = 1.0 / rng.gamma(shape, 1.0 / rate)
    return cl


def sample_cluster_mean(k, state, data, rng, hyper):
    cl = state.clusters[k]
    Y = _cluster_data(k, state, data)
    mean, var = cluster_mean_posterior(Y, cl.lam, cl.factors, cl.xi2, hyper.b0_mean, hyper.B0_diag)
    cl.mu = mean + np.sqrt(var) * rng.standard_normal(len(mean))
    return cl


def sample_indicators(k, state, rng, hyper):
    cl = state.clusters[k]
    lo = indicator_log_odds(cl.lam, state.alpha_B, hyper.a_theta, state.b_theta, hyper.a0, state.b_0_spike)
    # P(I=1) = sigmoid(lo), evaluated without overflow
    p1 = np.exp(-np.logaddexp(0.0, -lo))
    cl.indicator = (rng.random(len(lo)) < p1).astype(int)
    return cl


def sample_slab_probs(k, state, rng):
    cl = state.clusters[k]
    a, b = slab_prob_posterior(cl.indicator, state.alpha_B, cl.H)
    cl.tau = np.clip(rng.beta(a, b), _TAU_EPS, 1.0 - 1e-16)
    return cl


def sample_thetas(k, state, rng, hyper):
    cl = state.clusters[k]
    shape, rate = theta_posterior(cl.lam, cl.indicator, hyper.a_theta, state.b_theta, hyper.a0, state.b_0_spike)
    cl.theta = 1.0 / rng.gamma(shape, 1.0 / rate)
    return cl


def update_cluster(cl, Y, hyper, b_xi, b_theta, b0, alpha_B, rng):
    """All seven factor-analytic steps for one filled cluster with data ``Y``."""
    resid = Y - cl.mu
    mean, L = factor_posterior(cl.lam, cl.xi2, resid)
    F = _draw_from_precision_chol(mean, L, rng)
    mean, L = loading_row_posterior(F, resid, cl.xi2, cl.theta)
    lam = _draw_from_precision_chol(mean, L, rng)
    shape, rate = idio_precision_posterior(Y, cl.mu, lam, F, hyper.a_xi, b_xi)
    xi2 = 1.0 / rng.gamma(shape, 1.0 / rate)
    m, v = cluster_mean_posterior(Y, lam, F, xi2, hyper.b0_mean, hyper.B0_diag)
    mu = m + np.sqrt(v) * rng.standard_normal(len(m))
    lo = indicator_log_odds(lam, alpha_B, hyper.a_theta, b_theta, hyper.a0, b0)
    indicator = (rng.random(len(lo)) < np.exp(-np.logaddexp(0.0, -lo))).astype(int)
    a, b = slab_prob_posterior(indicator, alpha_B, lam.shape[1])
    tau = np.clip(rng.beta(a, b), _TAU_EPS, 1.0 - 1e-16)
    shape, rate = theta_posterior(lam, indicator, hyper.a_theta, b_theta, hyper.a0, b0)
    theta = 1.0 / rng.gamma(shape, 1.0 / rate)
    cl.factors, cl.lam, cl.xi2, cl.mu = F, lam, xi2, mu
    cl.indicator, cl.tau, cl.theta = indicator, tau, theta
    return cl


# ---------------------------------------------------------------------------
# Block 2b: shared hyperparameters
# ---------------------------------------------------------------------------

def update_shared_hyperparams(state, rng, hyper, diag=None):
    """Update b_xi, b_0, b_theta and alpha_B from the filled clusters."""
    diag = MhDiagnostics() if diag is None else diag
    filled = state.clusters[: state.K_plus]
    H = hyper.H
    xi2 = np.array([c.xi2 for c in filled])
    shape, rate = b_xi_posterior(xi2, hyper.a_g, hyper.b_g, hyper.a_xi)
    state.b_xi = rng.gamma(shape, 1.0 / rate)

    ind = np.array([c.indicator for c in filled])
    theta = np.array([c.theta for c in filled])
    H_pp, H_inf = active_counts(ind, H)
    shape, rate = b0_spike_posterior(theta, ind, hyper.a0, hyper.a1, hyper.b1, H)
    state.b_0_spike = rng.gamma(shape, 1.0 / rate)
    shape, rate = b_theta_posterior(theta, ind, hyper.a_theta, hyper.a2, hyper.b2, H)
    state.b_theta = rng.gamma(shape, 1.0 / rate)

    if hyper.alpha_B_update == "gibbs":
        tau = np.array([c.tau for c in filled])
        rate = hyper.b_alpha - np.sum(np.log(tau)) / H
        state.alpha_B = rng.gamma(hyper.a_alpha + H * state.K_plus, 1.0 / rate)
        return diag

    step = hyper.step_alpha_B

    def target(a):
        return log_target_alpha_B(a, H_pp, H_inf, H, hyper.a_alpha, hyper.b_alpha)

    state.alpha_B, accepted = rw_log_mh(state.alpha_B, target, step, rng)
    diag.proposals_alpha_B += 1
    diag.accept_count_alpha_B += int(accepted)
    diag.applied_step_alpha_B = step
    return diag


# ---------------------------------------------------------------------------
# Block 3
# ---------------------------------------------------------------------------

def sample_K(counts, K_plus, alpha_M, bnb, cap, rng, chunk=512):
    """Draw ``K >= K_plus`` from its conditional given the partition.

    The support is cut where the unnormalised weight falls below
    ``TAIL_RATIO`` times the running maximum (past the mode), or at ``cap``.
    """
    if cap < K_plus:
        raise ConfigError(f"cap={cap} is below K_plus={K_plus}")
    counts = np.asarray(counts)[:K_plus]
    logw = np.empty(0)
    start = K_plus
    cut = None
    while cut is None and start <= cap:
        stop = min(start + chunk, cap + 1)
        logw = np.concatenate([logw, log_K_weights(np.arange(start, stop), counts, alpha_M, bnb)])
        top = np.argmax(logw)
        small = np.flatnonzero(logw[top:] - logw[top] < np.log(TAIL_RATIO))
        if small.size:
            cut = top + small[0]
        start = stop
    if cut is not None:
        logw = logw[:cut]
    return K_plus + sample_categorical_from_logits(logw, rng)


def update_alpha_M(state, counts, K, T, hyper, rng, diag=None):
    diag = MhDiagnostics() if diag is None else diag
    filled = np.asarray(counts)[np.asarray(counts) > 0]

    def target(a):
        return log_target_alpha_M(a, filled, K, T, hyper.nu_l, hyper.nu_r)

    state.alpha_M, accepted = rw_log_mh(state.alpha_M, target, hyper.mh_scale_alpha_M, rng)
    diag.proposals_alpha_M += 1
    diag.accept_count_alpha_M += int(accepted)
    return diag


# ---------------------------------------------------------------------------
# Block 4
# ---------------------------------------------------------------------------

def draw_component_from_prior(p, hyper, b_xi, b_theta, b0, alpha_B, rng):
    """A component with every parameter drawn from its prior given the hyperparameters."""
    H = hyper.H
    mu = hyper.b0_mean + np.sqrt(hyper.B0_diag) * rng.standard_normal(p)
    xi2 = 1.0 / rng.gamma(hyper.a_xi, 1.0 / np.asarray(b_xi))
    tau = np.clip(rng.beta(alpha_B / H, 1.0, size=H), _TAU_EPS, 1.0 - 1e-16)
    indicator = (rng.random(H) < tau).astype(int)
    shape = np.where(indicator == 1, hyper.a_theta, hyper.a0)
    rate = np.where(indicator == 1, b_theta, b0)
    theta = 1.0 / rng.gamma(shape, 1.0 / rate)
    lam = rng.standard_normal((p, H)) * np.sqrt(theta)
    return ClusterParams(mu=mu, lam=lam, xi2=xi2, theta=theta, tau=tau, indicator=indicator)


def add_empty_components(state, K_new, rng, hyper):
    """Replace all empty components by ``K_new - K_plus`` fresh prior draws."""
    p = len(state.b_xi)
    new = [draw_component_from_prior(p, hyper, state.b_xi, state.b_theta, state.b_0_spike,
                                     state.alpha_B, rng)
           for _ in range(K_new - state.K_plus)]
    state.clusters = state.clusters[: state.K_plus] + new
    counts = np.zeros(K_new, dtype=int)
    counts[: state.K_plus] = state.counts[: state.K_plus]
    state.counts = counts
    return state


def sample_weights(counts, alpha_M, K, rng):
    """Dirichlet(alpha_M / K + counts) weights."""
    conc = alpha_M / K + np.asarray(counts, dtype=float)
    with np.errstate(under="ignore"):
        w = rng.dirichlet(conc)
    return w / w.sum()


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------

def initial_covariance(Y, v0=3.0):
    """Shrinkage covariance ``(v0 + T/2)^{-1} (v0 I + 0.5 sum_t y_t y_t')`` for standardised data."""
    T, p = Y.shape
    return (v0 * np.eye(p) + 0.5 * Y.T @ Y) / (v0 + 0.5 * T)


def factorize_covariance(omega, H, floor=1e-4):
    """Loadings from the leading ``H`` eigenpairs of ``omega`` and the matching diagonal.

    Eigenvalues are reduced by the mean of the discarded ones (half the
    smallest one when ``H >= p``) before taking square roots, so that a
    covariance of the form low-rank-plus-isotropic is reproduced exactly.
    """
    p = omega.shape[0]
    vals, vecs = np.linalg.eigh(omega)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    h = min(H, p)
    noise = vals[h:].mean() if h < p else 0.5 * vals[-1]
    lam = np.zeros((p, H))
    lam[:, :h] = vecs[:, :h] * np.sqrt(np.clip(vals[:h] - noise, 0.0, None))
    xi2 = np.maximum(np.diag(omega) - np.sum(lam * lam, axis=1), floor)
    return lam, xi2


def init_state(data, cfg, hyper=None):
    """Starting state: k-means partition, shared shrinkage covariance, prior-mean scalars."""
    hyper = cfg.hyper.resolve(data) if hyper is None else hyper
    K, H = hyper.K_init, hyper.H
    if K > data.T:
        raise ConfigError(f"K_init={K} exceeds the number of observations")
    rng = RngStream(cfg.seed, stream_id(cfg.chain_id, BLOCK_INIT)).generator()
    for attempt in range(5):
        km = KMeans(n_clusters=K, n_init=10, random_state=int(rng.integers(2**31 - 1)))
        labels = km.fit_predict(data.values)
        if np.all(np.bincount(labels, minlength=K) > 0):
            break
        logger.warning("k-means produced an empty cluster (attempt %d)", attempt + 1)
    else:
        raise DataError("k-means initialisation kept producing empty clusters")

    lam0, xi20 = factorize_covariance(initial_covariance(data.values, hyper.v0), H)
    alpha_M = hyper.nu_r / (hyper.nu_r - 2.0) if hyper.nu_r > 2 else 1.0
    alpha_B = hyper.a_alpha / hyper.b_alpha
    b_theta = hyper.a2 / hyper.b2
    b0 = hyper.a1 / hyper.b1
    clusters = []
    for k in range(K):
        tau = np.clip(rng.beta(alpha_B / H, 1.0, size=H), _TAU_EPS, 1.0 - 1e-16)
        ind = (rng.random(H) < tau).astype(int)
        theta = np.where(ind == 1, b_theta / (hyper.a_theta - 1.0), b0 / (hyper.a0 - 1.0))
        clusters.append(ClusterParams(mu=km.cluster_centers_[k].copy(), lam=lam0.copy(),
                                      xi2=xi20.copy(), theta=theta, tau=tau, indicator=ind))
    weights = rng.dirichlet(np.full(K, 1.0 / K))
    state = MixtureState(
        weights=weights / weights.sum(), alloc=labels.astype(int), clusters=clusters,
        alpha_M=alpha_M, alpha_B=alpha_B, b_xi=hyper.a_g / hyper.b_g,
        b_theta=b_theta, b_0_spike=b0,
    )
    return _relabel_filled_first(state)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def _block2(state, data, hyper, cfg, iteration):
    def work(k):
        rng = RngStream(cfg.seed, stream_id(cfg.chain_id, BLOCK_CLUSTER, iteration, k)).generator()
        members = np.flatnonzero(state.alloc == k)
        try:
            update_cluster(state.clusters[k], data.values[members], hyper, state.b_xi,
                           state.b_theta, state.b_0_spike, state.alpha_B, rng)
        except NumericalError as err:
            raise NumericalError(str(err), iteration=iteration, cluster=k) from err
        state.clusters[k].members = members

    if cfg.threads > 1 and state.K_plus > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            list(pool.map(work, range(state.K_plus)))
    else:
        for k in range(state.K_plus):
            work(k)


def gibbs_sweep(state, data, hyper, cfg, iteration, rng, diag, allocate=True):
    """One full iteration (Blocks 1-4) in place.

    ``allocate=False`` skips Block 1 and keeps the current partition.
    """
    if allocate:
        update_allocations(state, data, rng)
        _check(state, data, cfg, iteration, "block 1")
    _block2(state, data, hyper, cfg, iteration)
    update_shared_hyperparams(state, rng, hyper, diag)
    K_new = sample_K(state.counts, state.K_plus, state.alpha_M, hyper.bnb, cfg.k_max_cap, rng)
    update_alpha_M(state, state.counts, K_new, data.T, hyper, rng, diag)
    add_empty_components(state, K_new, rng, hyper)
    state.weights = sample_weights(state.counts, state.alpha_M, K_new, rng)
    _check(state, data, cfg, iteration, "block 4")
    return state


def _check(state, data, cfg, iteration, where):
    if cfg.check_invariants:
        problems = validate(state, data)
        if problems:
            raise NumericalError(f"invariant violation after {where}: {problems}", iteration=iteration)


def run_chain(data, cfg, callback=None):
    """Run one chain and return ``(trace, diagnostics)``.

    A :class:`DrawRecord` is emitted for every post-burn-in iteration whose
    index (counted after burn-in) is a multiple of ``thin``.  ``callback``,
    if given, receives each record as it is produced (e.g. to stream it to disk).
    """
    hyper = cfg.hyper.resolve(data)
    if cfg.k_max_cap < hyper.K_init:
        raise ConfigError(f"k_max_cap={cfg.k_max_cap} is below K_init={hyper.K_init}")
    diag = MhDiagnostics(applied_step_alpha_B=hyper.step_alpha_B)
    trace = []
    if hyper.iters == 0:
        return trace, diag
    state = init_state(data, cfg, hyper)
    rng = RngStream(cfg.seed, stream_id(cfg.chain_id, BLOCK_MAIN)).generator()
    for it in range(hyper.iters):
        gibbs_sweep(state, data, hyper, cfg, it, rng, diag, allocate=it > 0)
        if it < hyper.burnin or (it - hyper.burnin) % hyper.thin:
            continue
        rec = DrawRecord.from_state(it, state, with_alloc=it % cfg.record_alloc_every == 0)
        if callback is None:
            trace.append(rec)
        else:
            callback(rec)
    if cfg.mh_target_diag:
        logger.info("chain %d acceptance: alpha_M %.3f, alpha_B %.3f",
                    cfg.chain_id, diag.rate_alpha_M, diag.rate_alpha_B)
    return trace, diag


# ---------------------------------------------------------------------------
# Prior simulation (used for joint-distribution tests)
# ---------------------------------------------------------------------------

def draw_prior_state(T, p, hyper, rng, k_cap=None):
    """Draw a complete state from the joint prior (K truncated at ``k_cap``)."""
    k_cap = k_cap or 500
    ks = np.arange(1, k_cap + 1)
    K = int(ks[sample_categorical_from_logits(log_bnb_pmf(ks, hyper.bnb), rng)])
    alpha_M = rng.f(hyper.nu_l, hyper.nu_r)
    with np.errstate(under="ignore"):
        w = rng.dirichlet(np.full(K, alpha_M / K))
    if not np.all(np.isfinite(w)) or w.sum() <= 0:
        w = np.eye(K)[rng.integers(K)]
    w = w / w.sum()
    b_xi = rng.gamma(hyper.a_g, 1.0 / hyper.b_g)
    b_theta = rng.gamma(hyper.a2, 1.0 / hyper.b2)
    b0 = rng.gamma(hyper.a1, 1.0 / hyper.b1)
    alpha_B = rng.gamma(hyper.a_alpha, 1.0 / hyper.b_alpha)
    clusters = [draw_component_from_prior(p, hyper, b_xi, b_theta, b0, alpha_B, rng) for _ in range(K)]
    alloc = sample_categorical_rows(np.broadcast_to(np.log(np.maximum(w, 1e-320)), (T, K)), rng)
    state = MixtureState(weights=w, alloc=alloc, clusters=clusters, alpha_M=alpha_M,
                         alpha_B=alpha_B, b_xi=b_xi, b_theta=b_theta, b_0_spike=b0)
    return _relabel_filled_first(state)


def simulate_data(state, rng):
    """Observations drawn from the state's filled components given the allocations."""
    T = len(state.alloc)
    p = len(state.b_xi)
    Y = np.empty((T, p))
    for k in range(state.K_plus):
        idx = np.flatnonzero(state.alloc == k)
        cl = state.clusters[k]
        f = rng.standard_normal((len(idx), cl.H))
        Y[idx] = cl.mu + f @ cl.lam.T + rng.standard_normal((len(idx), p)) * np.sqrt(cl.xi2)
    return Y
