import warnings

import numpy as np
import pytest

from mf2a.model import Dataset, Hyperparams
from mf2a.sampler import ChainConfig, init_state
from mf2a.simulate import gen_study1, standardize


@pytest.fixture(scope="session")
def small_data():
    data, truth = gen_study1(p=6, T=60, seed=4)
    return standardize(data, truth)


@pytest.fixture
def fresh_state(small_data):
    data, _ = small_data
    hyper = Hyperparams(iters=10, K_init=5).resolve(data)
    cfg = ChainConfig(hyper=hyper, seed=1)
    return init_state(data, cfg, hyper), data, hyper, cfg


def random_dataset(rng, T, p):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return Dataset(rng.normal(size=(T, p)))


def make_record(mu, H=2, indicator=None, K=None, alloc=None, iteration=0, lam_scale=0.3, seed=0):
    """A DrawRecord with the given cluster means and simple, well-conditioned parameters."""
    from mf2a.model import DrawRecord

    rng = np.random.default_rng(seed)
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    Kp, p = mu.shape
    ind = np.ones((Kp, H), dtype=int) if indicator is None else np.asarray(indicator, dtype=int)
    if alloc is None:
        alloc = np.repeat(np.arange(Kp), 3)
    counts = np.bincount(alloc, minlength=K or Kp)
    return DrawRecord(
        iter=iteration, K=K or Kp, K_plus=Kp, counts=counts, alpha_M=1.0, alpha_B=1.0,
        b_theta=1.0, b_0=1.0, mu=mu, lam=lam_scale * rng.normal(size=(Kp, p, H)),
        xi2=rng.gamma(5.0, 0.2, size=(Kp, p)), theta=np.ones((Kp, H)),
        tau=np.full((Kp, H), 0.5), indicator=ind, alloc=np.asarray(alloc),
    )


@pytest.fixture(scope="session")
def study1_trace():
    """A short Study-1 fit (p=10, T=100) used by the post-processing tests."""
    data, truth = standardize(*gen_study1(p=10, T=100, seed=1))
    from mf2a.sampler import run_chain
    trace, _ = run_chain(data, ChainConfig(hyper=Hyperparams(iters=2000, thin=2), seed=1))
    return trace, data, truth
