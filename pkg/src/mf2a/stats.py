"""Densities, random draws and small linear-algebra helpers used by the sampler.

Conventions
-----------
* Gamma distributions are parameterised by shape and *rate* (mean ``shape / rate``).
* ``InvGamma(a, b)`` is the law of ``1 / X`` with ``X ~ Gamma(a, rate=b)``; its
  mean is ``b / (a - 1)`` for ``a > 1``.
* Every draw function takes a :class:`numpy.random.Generator`.  Reproducible,
  thread-independent generators are obtained from :class:`RngStream`.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import betaln, gammaln

from .exceptions import DomainError, NumericalError

LOG_2PI = float(np.log(2.0 * np.pi))

JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)


# ---------------------------------------------------------------------------
# Random number streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    The generator is a counter-based Philox keyed through
    :class:`numpy.random.SeedSequence`, so independent streams can be handed
    to worker threads without coordination.  Calling :meth:`generator` twice
    returns two generators that replay the same sequence.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            value = getattr(self, name)
            if not 0 <= int(value) < 2**64:
                raise DomainError(f"{name} must be a 64-bit unsigned integer, got {value}")

    def generator(self):
        seq = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.Philox(seq))


def stream_id(chain=0, block=0, iteration=0, component=0):
    """Pack ``(chain, block, iteration, component)`` into one 64-bit stream id.

    Bit layout: 8 bits chain, 4 bits block, 36 bits iteration, 16 bits component.
    """
    if not (0 <= chain < 2**8 and 0 <= block < 2**4
            and 0 <= iteration < 2**36 and 0 <= component < 2**16):
        raise DomainError("stream id field out of range")
    return (chain << 56) | (block << 52) | (iteration << 16) | component


# ---------------------------------------------------------------------------
# Log densities
# ---------------------------------------------------------------------------

@dataclass
class BnbParams:
    """Beta-negative-binomial prior on ``K - 1``."""

    alpha_lambda: float = 1.0
    a_pi: float = 4.0
    b_pi: float = 3.0

    def __post_init__(self):
        if min(self.alpha_lambda, self.a_pi, self.b_pi) <= 0:
            raise DomainError(f"BNB parameters must be positive, got {self}")

    def mean(self):
        """Prior mean of K; infinite unless ``a_pi > 1``."""
        if self.a_pi <= 1:
            return np.inf
        return 1.0 + self.alpha_lambda * self.b_pi / (self.a_pi - 1.0)


def log_bnb_pmf(k, params):
    """Log pmf of K under the translated BNB prior, ``K - 1 ~ BNB``.

    Accepts a scalar or an integer array of component counts ``k >= 1``.
    """
    k_arr = np.asarray(k)
    if np.any(k_arr < 1):
        raise DomainError(f"K must be >= 1, got {k}")
    al, a, b = params.alpha_lambda, params.a_pi, params.b_pi
    if min(al, a, b) <= 0:
        raise DomainError("BNB parameters must be positive")
    k_arr = k_arr.astype(float)
    out = (gammaln(al + k_arr - 1.0) + betaln(al + a, k_arr - 1.0 + b)
           - gammaln(al) - gammaln(k_arr) - betaln(a, b))
    return out if out.ndim else float(out)


@dataclass
class LowRankGaussian:
    """Gaussian with covariance ``loadings @ loadings.T + diag(idio_var)``."""

    mean: np.ndarray
    loadings: np.ndarray
    idio_var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.loadings = np.asarray(self.loadings, dtype=float)
        self.idio_var = np.asarray(self.idio_var, dtype=float)
        p = self.mean.shape[0]
        if self.loadings.ndim != 2 or self.loadings.shape[0] != p or self.idio_var.shape != (p,):
            raise DomainError("inconsistent LowRankGaussian dimensions")
        if not np.all(self.idio_var > 0):
            raise DomainError("idiosyncratic variances must be strictly positive")

    def covariance(self):
        return self.loadings @ self.loadings.T + np.diag(self.idio_var)


def lowrank_logpdf_rows(Y, mean, loadings, idio_var):
    """Unchecked row-wise log density of ``Y`` (n x p) under a low-rank Gaussian.

    Uses the Woodbury identity and the matrix determinant lemma; the p x p
    covariance is never formed.
    """
    p, H = loadings.shape
    prec = 1.0 / idio_var
    R = Y - mean
    quad = (R * R) @ prec
    logdet = np.sum(np.log(idio_var))
    if H:
        A = loadings * prec[:, None]
        inner = np.eye(H) + loadings.T @ A
        L, _ = cholesky_spd(inner)
        V = solve_triangular(L, A.T @ R.T, lower=True, check_finite=False)
        quad = quad - np.einsum("ij,ij->j", V, V)
        logdet += 2.0 * np.sum(np.log(np.diag(L)))
    return -0.5 * (p * LOG_2PI + logdet + quad)


def log_mvn_lowrank(y, g):
    """Log density of ``y`` under ``N(g.mean, g.loadings g.loadings' + diag(g.idio_var))``.

    ``y`` may be a single vector or an (n, p) array of rows.
    """
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise DomainError("non-finite observation")
    if not np.all(g.idio_var > 0):
        raise DomainError("idiosyncratic variances must be strictly positive")
    if y.shape[-1] != g.mean.shape[0]:
        raise DomainError(f"dimension mismatch: y has {y.shape[-1]}, mean has {g.mean.shape[0]}")
    out = lowrank_logpdf_rows(np.atleast_2d(y), g.mean, g.loadings, g.idio_var)
    return float(out[0]) if y.ndim == 1 else out


def log_mv_t_isotropic(x, dof, scale):
    """Central multivariate Student-t log density with scale matrix ``scale * I_p``.

    ``x`` is a vector of length p, or an array whose *first* axis is p (so each
    column of a loading matrix can be evaluated at once).
    """
    if dof <= 0 or scale <= 0:
        raise DomainError(f"dof and scale must be positive, got {dof}, {scale}")
    x = np.asarray(x, dtype=float)
    p = x.shape[0]
    ss = np.sum(x * x, axis=0)
    out = (gammaln(0.5 * (dof + p)) - gammaln(0.5 * dof)
           - 0.5 * p * np.log(dof * np.pi * scale)
           - 0.5 * (dof + p) * np.log1p(ss / (dof * scale)))
    return out if np.ndim(out) else float(out)


def log_f_density(x, nu_l, nu_r):
    """Log density of the F(nu_l, nu_r) distribution at ``x > 0``."""
    if np.any(np.asarray(x) <= 0):
        raise DomainError(f"F density needs x > 0, got {x}")
    if nu_l <= 0 or nu_r <= 0:
        raise DomainError("F degrees of freedom must be positive")
    x = np.asarray(x, dtype=float)
    d1, d2 = nu_l, nu_r
    out = (0.5 * d1 * np.log(d1 / d2) + (0.5 * d1 - 1.0) * np.log(x)
           - 0.5 * (d1 + d2) * np.log1p(d1 * x / d2) - betaln(0.5 * d1, 0.5 * d2))
    return out if out.ndim else float(out)


def log_gamma_density(x, shape, rate):
    """Gamma(shape, rate) log density."""
    x = np.asarray(x, dtype=float)
    out = shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Draws
# ---------------------------------------------------------------------------

def _check_positive(**kwargs):
    for name, value in kwargs.items():
        if not np.all(np.asarray(value) > 0):
            raise DomainError(f"{name} must be positive, got {value}")


def draw_gamma(shape, rate, rng, size=None):
    _check_positive(shape=shape, rate=rate)
    return rng.gamma(shape, 1.0 / np.asarray(rate, dtype=float), size=size)


def draw_inverse_gamma(shape, rate_of_inverse, rng, size=None):
    """Draw from InvGamma(shape, b): the reciprocal of a Gamma(shape, rate=b)."""
    _check_positive(shape=shape, rate_of_inverse=rate_of_inverse)
    return 1.0 / rng.gamma(shape, 1.0 / np.asarray(rate_of_inverse, dtype=float), size=size)


def draw_beta(a, b, rng, size=None):
    _check_positive(a=a, b=b)
    return rng.beta(a, b, size=size)


def draw_dirichlet(concentrations, rng):
    conc = np.asarray(concentrations, dtype=float)
    _check_positive(concentrations=conc)
    w = rng.dirichlet(conc)
    return w / w.sum()


def draw_mvn_chol(mean, chol, rng):
    """Draw ``mean + chol @ z`` with ``z ~ N(0, I)``; ``chol`` is lower triangular."""
    chol = np.asarray(chol, dtype=float)
    if np.any(np.diag(chol) <= 0):
        raise DomainError("covariance factor must have a positive diagonal")
    z = rng.standard_normal(chol.shape[0])
    return np.asarray(mean, dtype=float) + chol @ z


def sample_categorical_from_logits(logits, rng):
    """Draw one index with probability ``softmax(logits)``."""
    logits = np.asarray(logits, dtype=float)
    return int(sample_categorical_rows(logits[None, :], rng)[0])


def sample_categorical_rows(logits, rng):
    """Draw one index per row of an (n, K) logit array (inverse-CDF, one uniform per row)."""
    logits = np.asarray(logits, dtype=float)
    top = logits.max(axis=1)
    if not np.all(np.isfinite(top)):
        bad = int(np.flatnonzero(~np.isfinite(top))[0])
        raise DomainError(f"row {bad} has no finite logit")
    with np.errstate(under="ignore"):
        probs = np.exp(logits - top[:, None])
    cum = np.cumsum(probs, axis=1)
    u = rng.random(logits.shape[0]) * cum[:, -1]
    idx = np.sum(cum <= u[:, None], axis=1)
    return np.minimum(idx, logits.shape[1] - 1)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def cholesky_spd(matrix, jitter_policy=JITTER_LADDER):
    """Lower Cholesky factor of ``matrix + j I`` for the first jitter ``j`` that works.

    Works on a single matrix or a stack ``(..., n, n)``.  Returns the factor and
    the jitter that was applied.
    """
    matrix = np.asarray(matrix, dtype=float)
    eye = np.eye(matrix.shape[-1])
    for jitter in jitter_policy:
        try:
            return np.linalg.cholesky(matrix + jitter * eye if jitter else matrix), jitter
        except np.linalg.LinAlgError:
            continue
    with np.errstate(all="ignore"):
        eig = np.linalg.eigvalsh(0.5 * (matrix + np.swapaxes(matrix, -1, -2)))
    raise NumericalError(
        "Cholesky failed at maximum jitter",
        min_eigenvalue=float(np.min(eig)) if np.all(np.isfinite(eig)) else float("nan"),
        max_eigenvalue=float(np.max(eig)) if np.all(np.isfinite(eig)) else float("nan"),
        max_jitter=jitter_policy[-1],
    )
