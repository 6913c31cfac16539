"""Synthetic data from mixtures of factor analysers with known ground truth."""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .exceptions import DataError
from .model import Dataset

# The published weight vector for the second design ends in 0.5 (sum 1.45);
# the reported cluster sizes only fit a final weight of 0.05.
STUDY2_WEIGHTS = (0.25, 0.25, 0.2, 0.15, 0.1, 0.05)
STUDY2_NOTE = "last weight read as 0.05 (printed 0.5); vector renormalised"


@dataclass
class SimTruth:
    """Generating parameters; arrays are indexed by true cluster."""

    labels: np.ndarray
    mu: list
    lam: list
    xi2: list
    weights: np.ndarray
    H_true: list
    note: str = ""

    @property
    def K_true(self):
        return len(self.weights)

    @property
    def omega(self):
        return [l @ l.T + np.diag(x) for l, x in zip(self.lam, self.xi2)]

    def to_dict(self):
        return {
            "K_true": self.K_true,
            "weights": self.weights.tolist(),
            "H_true": [int(h) for h in self.H_true],
            "labels": self.labels.tolist(),
            "mu": [m.tolist() for m in self.mu],
            "lambda": [l.tolist() for l in self.lam],
            "xi2": [x.tolist() for x in self.xi2],
            "omega": [o.tolist() for o in self.omega],
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            labels=np.asarray(d["labels"], dtype=int),
            mu=[np.asarray(m, dtype=float) for m in d["mu"]],
            lam=[np.asarray(l, dtype=float).reshape(len(d["mu"][0]), -1) for l in d["lambda"]],
            xi2=[np.asarray(x, dtype=float) for x in d["xi2"]],
            weights=np.asarray(d["weights"], dtype=float),
            H_true=list(d["H_true"]),
            note=d.get("note", ""),
        )


def _generate(p, T, weights, H_list, rng, note=""):
    K = len(weights)
    labels = rng.choice(K, size=T, p=weights)
    mus, lams, xi2s = [], [], []
    for k in range(K):
        offset = 2 * (k + 1) - K - 1
        mus.append(offset + rng.standard_normal(p))
        lams.append(rng.standard_normal((p, H_list[k])))
        xi2s.append(1.0 / rng.gamma(2.0, 1.0, size=p))
    Y = np.empty((T, p))
    for k in range(K):
        idx = np.flatnonzero(labels == k)
        f = rng.standard_normal((len(idx), H_list[k]))
        eps = rng.standard_normal((len(idx), p)) * np.sqrt(xi2s[k])
        Y[idx] = mus[k] + f @ lams[k].T + eps
    truth = SimTruth(labels=labels, mu=mus, lam=lams, xi2=xi2s,
                     weights=np.asarray(weights, dtype=float), H_true=list(H_list), note=note)
    return Dataset(Y, truth_labels=labels), truth


def gen_study1(p=10, T=100, seed=0):
    """Three equally weighted, overlapping clusters with four factors each.

    Cluster ``k`` (1-based) has mean ``N_p((2k - 4) 1, I)``, loadings with
    standard normal entries and idiosyncratic variances ``InvGamma(2, 1)``.
    """
    rng = np.random.default_rng(seed)
    return _generate(p, T, np.full(3, 1.0 / 3.0), [4, 4, 4], rng)


def gen_study2(seed=0, T=700):
    """Six unbalanced clusters (p=20, T=700), each with 1..5 factors drawn uniformly.

    ``T`` is only meant to be changed for large-sample checks of the generator.
    """
    rng = np.random.default_rng(seed)
    w = np.asarray(STUDY2_WEIGHTS)
    w = w / w.sum()
    H_list = [int(h) for h in rng.integers(1, 6, size=len(w))]
    return _generate(20, T, w, H_list, rng, note=STUDY2_NOTE)


def standardize(data, truth=None):
    """Centre every variable and scale it to unit (n-1) sample variance.

    Returns the transformed dataset and, if given, the ground truth mapped to
    the new scale (loadings ``S^-1 Lambda``, means ``S^-1 (mu - m)``,
    idiosyncratic variances ``xi2 / s^2``).
    """
    Y = data.values
    m = Y.mean(axis=0)
    s = Y.std(axis=0, ddof=1)
    if np.any(s <= 0):
        raise DataError("cannot standardise a constant variable")
    out = dataclasses.replace(
        data, values=(Y - m) / s,
        center=data.center + data.scale * m, scale=data.scale * s, standardized=True,
    )
    if truth is None:
        return out, None
    t = dataclasses.replace(
        truth,
        mu=[(mu - m) / s for mu in truth.mu],
        lam=[l / s[:, None] for l in truth.lam],
        xi2=[x / s**2 for x in truth.xi2],
    )
    return out, t
