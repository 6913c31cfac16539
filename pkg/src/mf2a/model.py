"""Data containers for the sampler: dataset, hyperparameters, state and trace records."""

import dataclasses
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ConfigError, DataError
from .stats import BnbParams


@dataclass
class Dataset:
    """T x p observations plus optional ground truth and standardisation metadata.

    ``center`` and ``scale`` describe the map from the raw data, i.e.
    ``values = (raw - center) / scale`` when ``standardized`` is true.
    """

    values: np.ndarray
    truth_labels: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    standardized: bool = False
    columns: Optional[list] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise DataError("dataset values must be a 2-d array")
        if not np.all(np.isfinite(self.values)):
            raise DataError("dataset contains non-finite values")
        T, p = self.values.shape
        if self.truth_labels is not None:
            self.truth_labels = np.asarray(self.truth_labels, dtype=int)
            if self.truth_labels.shape != (T,):
                raise DataError("truth_labels must have one entry per observation")
        if self.center is None:
            self.center = np.zeros(p)
        if self.scale is None:
            self.scale = np.ones(p)
        self.center = np.asarray(self.center, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        if self.standardized and not np.all(self.scale > 0):
            raise DataError("standardisation scale must be strictly positive")
        if T <= p:
            warnings.warn(f"only T={T} observations for p={p} variables; "
                          "expect unreliable estimates", stacklevel=2)

    @property
    def T(self):
        return self.values.shape[0]

    @property
    def p(self):
        return self.values.shape[1]


def default_H(p, override_p_max=10):
    """Maximum number of factors per cluster.

    Largest integer not exceeding ``(p - 1) / 2``, except that small problems
    (``p <= override_p_max``) use ``H = p``, which mixes better.
    """
    if p <= override_p_max:
        return p
    return max(1, (p - 1) // 2)


@dataclass
class Hyperparams:
    """Prior constants and sampler controls.

    Defaults reproduce the published prior set-up.  ``b0_mean``, ``B0_diag``
    and ``b_g`` are data dependent (median, squared range and ``100 / range**2``
    of each variable) and are filled in by :meth:`resolve` when left as None;
    so are ``H`` and ``burnin``.
    """

    b0_mean: Optional[np.ndarray] = None
    B0_diag: Optional[np.ndarray] = None
    bnb: BnbParams = field(default_factory=BnbParams)
    nu_l: float = 6.0
    nu_r: float = 3.0
    a_alpha: float = 6.0
    b_alpha: float = 2.0
    a_xi: float = 1.0
    a_g: float = 3.0
    b_g: Optional[np.ndarray] = None
    a_theta: float = 3.0
    a2: float = 2.0
    b2: float = 1.0
    a0: float = 21.0
    a1: float = 1.0
    b1: float = 1.0
    H: Optional[int] = None
    H_override_p_max: int = 10
    K_init: Optional[int] = None
    expected_clusters: Optional[int] = None
    iters: int = 50_000
    burnin: Optional[int] = None
    burnin_frac: float = 0.2
    thin: int = 1
    mh_scale_alpha_M: float = 0.75
    alpha1_step: float = 2.0
    alpha2_step: float = 0.11
    v0: float = 3.0
    alpha_B_update: str = "mh"

    def __post_init__(self):
        if isinstance(self.bnb, dict):
            self.bnb = BnbParams(**self.bnb)
        if self.a0 <= self.a_theta:
            raise ConfigError(f"spike dof a0={self.a0} must exceed slab dof a_theta={self.a_theta}")
        for name in ("nu_l", "nu_r", "a_alpha", "b_alpha", "a_xi", "a_g", "a_theta",
                     "a2", "b2", "a0", "a1", "b1", "mh_scale_alpha_M", "v0"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.H is not None and self.H < 1:
            raise ConfigError("H must be >= 1")
        if self.K_init is not None and self.K_init < 1:
            raise ConfigError("K_init must be >= 1")
        if self.iters < 0 or self.thin < 1:
            raise ConfigError("iters must be >= 0 and thin >= 1")
        if not 0 <= self.burnin_frac < 1:
            raise ConfigError("burnin_frac must lie in [0, 1)")
        if self.alpha_B_update not in ("mh", "gibbs"):
            raise ConfigError("alpha_B_update must be 'mh' or 'gibbs'")

    @property
    def step_alpha_B(self):
        """Random-walk scale for log(alpha_B); shrinks geometrically with H."""
        return 1.0 + self.alpha1_step * (1.0 - self.alpha2_step) ** self.H

    def resolve(self, data):
        """Return a copy with every data-dependent default filled in."""
        y = data.values
        rng_ = np.ptp(y, axis=0)
        if np.any(rng_ <= 0):
            raise DataError("a variable has zero range")
        upd = {}
        if self.b0_mean is None:
            upd["b0_mean"] = np.median(y, axis=0)
        if self.B0_diag is None:
            upd["B0_diag"] = rng_ ** 2
        if self.b_g is None:
            upd["b_g"] = 100.0 / rng_ ** 2
        if self.H is None:
            upd["H"] = default_H(data.p, self.H_override_p_max)
        if self.K_init is None:
            upd["K_init"] = 3 * self.expected_clusters if self.expected_clusters else 10
        if self.burnin is None:
            upd["burnin"] = int(round(self.burnin_frac * self.iters))
        out = dataclasses.replace(self, **upd)
        for name in ("b0_mean", "B0_diag", "b_g"):
            arr = np.broadcast_to(np.asarray(getattr(out, name), dtype=float), (data.p,)).copy()
            setattr(out, name, arr)
        if np.any(out.B0_diag <= 0) or np.any(out.b_g <= 0):
            raise ConfigError("B0_diag and b_g must be positive")
        return out


@dataclass
class ClusterParams:
    """Parameters of one mixture component.

    ``factors`` holds the scores of the observations currently assigned to
    the component (rows follow ``members``).
    """

    mu: np.ndarray
    lam: np.ndarray
    xi2: np.ndarray
    theta: np.ndarray
    tau: np.ndarray
    indicator: np.ndarray
    factors: np.ndarray = None
    members: np.ndarray = None

    def __post_init__(self):
        H = self.lam.shape[1]
        if self.factors is None:
            self.factors = np.zeros((0, H))
        if self.members is None:
            self.members = np.zeros(0, dtype=int)

    @property
    def H(self):
        return self.lam.shape[1]

    @property
    def active(self):
        return int(np.sum(self.indicator))

    def covariance(self):
        return self.lam @ self.lam.T + np.diag(self.xi2)


@dataclass
class MixtureState:
    """Full sampler state.  Filled components always occupy slots ``0..K_plus-1``."""

    weights: np.ndarray
    alloc: np.ndarray
    clusters: list
    alpha_M: float
    alpha_B: float
    b_xi: np.ndarray
    b_theta: float
    b_0_spike: float
    K_plus: int = 0
    counts: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.bincount(self.alloc, minlength=self.K)
            self.K_plus = int(np.sum(self.counts > 0))

    @property
    def K(self):
        return len(self.clusters)


def validate(state, data):
    """Return a list of human-readable invariant violations (empty when valid)."""
    out = []
    K = state.K
    if len(state.weights) != K or len(state.counts) != K:
        out.append("shape: weights/counts length differs from K")
        return out
    if not np.isclose(np.sum(state.weights), 1.0, atol=1e-10) or np.any(state.weights < 0):
        out.append("simplex: weights do not sum to 1")
    if len(state.alloc) != data.T:
        out.append("alloc: length differs from T")
    elif np.any(state.alloc < 0) or np.any(state.alloc >= K):
        out.append("alloc: label outside 0..K-1")
    elif not np.array_equal(np.bincount(state.alloc, minlength=K), state.counts):
        out.append("counts: inconsistent with alloc")
    if int(np.sum(state.counts)) != data.T:
        out.append("counts: do not sum to T")
    filled = state.counts > 0
    if state.K_plus != int(filled.sum()):
        out.append("K_plus: differs from number of filled components")
    if state.K_plus > K:
        out.append("K_plus: exceeds K")
    if np.any(~filled[: state.K_plus]) or np.any(filled[state.K_plus:]):
        out.append("order: empty component before filled")
    H = None
    for k, cl in enumerate(state.clusters):
        H = cl.H if H is None else H
        if cl.H != H:
            out.append(f"cluster {k}: H differs between clusters")
        if not np.all(cl.xi2 > 0) or not np.all(cl.theta > 0):
            out.append(f"cluster {k}: non-positive variance")
        if not np.all((cl.tau > 0) & (cl.tau < 1)):
            out.append(f"cluster {k}: slab probability outside (0, 1)")
        if not np.all(np.isin(cl.indicator, (0, 1))):
            out.append(f"cluster {k}: non-binary indicator")
        if cl.lam.shape != (data.p, H) or cl.mu.shape != (data.p,):
            out.append(f"cluster {k}: parameter shape")
    for name in ("alpha_M", "alpha_B", "b_theta", "b_0_spike"):
        if not getattr(state, name) > 0:
            out.append(f"{name}: not positive")
    if not np.all(state.b_xi > 0):
        out.append("b_xi: not positive")
    return out


@dataclass
class DrawRecord:
    """One retained MCMC draw.  Per-cluster arrays are stacked over the K_plus
    filled clusters: ``mu`` (K+, p), ``lam`` (K+, p, H), ``xi2`` (K+, p),
    ``theta``/``tau``/``indicator`` (K+, H).  ``alloc`` is 0-based and may be None.
    """

    iter: int
    K: int
    K_plus: int
    counts: np.ndarray
    alpha_M: float
    alpha_B: float
    b_theta: float
    b_0: float
    mu: np.ndarray
    lam: np.ndarray
    xi2: np.ndarray
    theta: np.ndarray
    tau: np.ndarray
    indicator: np.ndarray
    alloc: Optional[np.ndarray] = None

    @classmethod
    def from_state(cls, iteration, state, with_alloc=True):
        filled = state.clusters[: state.K_plus]
        return cls(
            iter=int(iteration),
            K=state.K,
            K_plus=state.K_plus,
            counts=state.counts.copy(),
            alpha_M=float(state.alpha_M),
            alpha_B=float(state.alpha_B),
            b_theta=float(state.b_theta),
            b_0=float(state.b_0_spike),
            mu=np.array([c.mu for c in filled]),
            lam=np.array([c.lam for c in filled]),
            xi2=np.array([c.xi2 for c in filled]),
            theta=np.array([c.theta for c in filled]),
            tau=np.array([c.tau for c in filled]),
            indicator=np.array([c.indicator for c in filled], dtype=int),
            alloc=state.alloc.copy() if with_alloc else None,
        )

    @property
    def H_k(self):
        return self.indicator.sum(axis=1)

    def omegas(self):
        """Cluster covariances ``lam lam' + diag(xi2)`` for every filled cluster."""
        out = np.einsum("kih,kjh->kij", self.lam, self.lam)
        idx = np.arange(out.shape[1])
        out[:, idx, idx] += self.xi2
        return out

    def permuted(self, order):
        """Draw with cluster ``order[j]`` moved to slot ``j`` (and alloc relabelled)."""
        order = np.asarray(order)
        inverse = np.empty_like(order)
        inverse[order] = np.arange(len(order))
        alloc = None if self.alloc is None else inverse[self.alloc]
        counts = self.counts.copy()
        counts[: len(order)] = self.counts[order]
        return dataclasses.replace(
            self, counts=counts, mu=self.mu[order], lam=self.lam[order],
            xi2=self.xi2[order], theta=self.theta[order], tau=self.tau[order],
            indicator=self.indicator[order], alloc=alloc,
        )

    def __eq__(self, other):
        if not isinstance(other, DrawRecord):
            return NotImplemented
        for f in dataclasses.fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if a is None or b is None:
                if a is not b:
                    return False
            elif not np.array_equal(a, b):
                return False
        return True
