from types import SimpleNamespace

import numpy as np
import pytest

from conftest import make_record
from mf2a.exceptions import DataError, PostprocessError
from mf2a.postprocess import (
    draw_features, draw_loglik, extract_active_loadings, identify, modal_allocation,
    posterior_covariance, relabel_draws, select_mode_H, select_mode_Kplus,
)


def _kp(values):
    return [SimpleNamespace(K_plus=v) for v in values]


def test_mode_Kplus_examples():
    K_hat, kept = select_mode_Kplus(_kp([3, 3, 3, 2]))
    assert K_hat == 3 and len(kept) == 3
    assert select_mode_Kplus(_kp([2, 2, 3, 3]))[0] == 2
    with pytest.raises(DataError):
        select_mode_Kplus([])


def _separated_trace(n=40, flip_every=3):
    recs = []
    for m in range(n):
        mu = [[-5.0, -5.0], [5.0, 5.0]]
        if m % flip_every == 0:
            mu = mu[::-1]
        recs.append(make_record(np.array(mu) + 0.05 * np.random.default_rng(m).normal(size=(2, 2)),
                                iteration=m, seed=m))
    return recs


def test_relabel_sorts_switched_labels():
    trace = _separated_trace()
    out, removed = relabel_draws(trace, 2)
    assert removed == 0 and len(out) == len(trace)
    first = np.sign(out[0].mu[0, 0])
    assert all(np.sign(d.mu[0, 0]) == first for d in out)


def test_relabel_drops_non_permutation():
    trace = _separated_trace()
    trace.append(make_record([[5.0, 5.0], [5.1, 4.9]], iteration=99, seed=99))
    out, removed = relabel_draws(trace, 2)
    assert removed == 1
    assert 99 not in [d.iter for d in out]


def test_relabel_inverse_restores_draw():
    trace = _separated_trace()
    out, _ = relabel_draws(trace, 2)
    by_iter = {d.iter: d for d in trace}
    for d in out:
        orig = by_iter[d.iter]
        # recover the permutation from the means and invert it
        order = [int(np.flatnonzero(np.all(orig.mu == d.mu[j], axis=1))[0]) for j in range(2)]
        assert d.permuted(np.argsort(order)) == orig


def test_relabel_needs_draws():
    with pytest.raises(PostprocessError):
        relabel_draws([], 2)


def test_features_finite():
    f = draw_features(make_record([[0.0, 1.0, 2.0]], H=2))
    assert f.shape == (1, 6) and np.all(np.isfinite(f))


def test_mode_H_examples():
    same = [make_record([[0.0]], H=5, indicator=[[1, 1, 1, 1, 0]]) for _ in range(3)]
    H_hat, kept = select_mode_H(same)
    assert list(H_hat) == [4] and len(kept) == 3
    mixed = same[:2] + [make_record([[0.0]], H=5, indicator=[[1, 1, 1, 1, 1]])]
    H_hat, kept = select_mode_H(mixed)
    assert list(H_hat) == [4] and len(kept) == 2
    tie = same[:1] + [make_record([[0.0]], H=5, indicator=[[1, 1, 1, 1, 1]])]
    assert list(select_mode_H(tie)[0]) == [4]


def test_extract_active_loadings():
    d = make_record([[0.0] * 4], H=5, indicator=[[1, 0, 1, 0, 0]])
    (lam,) = extract_active_loadings(d, [2])
    np.testing.assert_array_equal(lam, d.lam[0][:, [0, 2]])
    none = make_record([[0.0] * 4], H=3, indicator=[[0, 0, 0]])
    (empty,) = extract_active_loadings(none, [0])
    assert empty.shape == (4, 0)
    np.testing.assert_allclose(empty @ empty.T + np.diag(none.xi2[0]), np.diag(none.xi2[0]))
    with pytest.raises(DataError):
        extract_active_loadings(d, [3])


def test_active_loadings_differ_by_spike_outer_products(study1_trace):
    trace, _, _ = study1_trace
    for d in trace[::50]:
        for k, act in enumerate(extract_active_loadings(d)):
            full = d.lam[k] @ d.lam[k].T
            spike = d.lam[k][:, d.indicator[k] == 0]
            np.testing.assert_allclose(full - act @ act.T, spike @ spike.T, atol=1e-12)
            H, p = d.lam.shape[2], d.lam.shape[1]
            theta_spike = d.theta[k][d.indicator[k] == 0]
            if theta_spike.size:
                # loose bound from the spike variances (entries are O(theta) in size)
                assert np.abs(spike @ spike.T).max() <= 50 * H * p * theta_spike.max()


def test_posterior_covariance_single_and_pair():
    a = make_record([[0.0, 0.0, 0.0]], seed=1)
    b = make_record([[0.0, 0.0, 0.0]], seed=2)
    np.testing.assert_allclose(posterior_covariance([a]), a.omegas(), atol=1e-15)
    two = posterior_covariance([a, b])
    np.testing.assert_allclose(two, 0.5 * (a.omegas() + b.omegas()), atol=1e-12)
    np.testing.assert_allclose(two, np.swapaxes(two, 1, 2))
    assert np.linalg.eigvalsh(two[0]).min() >= 0


def test_modal_allocation():
    d1 = make_record([[0.0], [1.0]], alloc=np.array([0, 0, 1, 1]))
    d2 = make_record([[0.0], [1.0]], alloc=np.array([0, 1, 1, 1]))
    d3 = make_record([[0.0], [1.0]], alloc=np.array([0, 1, 1, 0]))
    assert list(modal_allocation([d1, d2, d3], 2)) == [0, 1, 1, 1]


def test_identify_on_study1_trace(study1_trace):
    trace, data, truth = study1_trace
    post = identify(trace, seed=0)
    a = post.attrition
    assert a["input"] == len(trace)
    assert a["input"] == a["after_Kplus_mode"] + a["removed_Kplus_mode"]
    assert a["after_Kplus_mode"] == a["after_relabel"] + a["removed_not_permutation"]
    assert a["after_relabel"] == a["final"] + a["removed_H_mode"]
    assert post.M_retained == a["final"] > 0
    assert post.K_hat == 3
    assert a["removed_not_permutation"] < 0.05 * a["after_Kplus_mode"]
    assert all(d.K_plus == post.K_hat and np.array_equal(d.H_k, post.H_hat) for d in post.draws)
    assert post.H_relabelled.shape == (a["after_relabel"], post.K_hat)


def test_relabelling_preserves_loglik(study1_trace):
    trace, data, _ = study1_trace
    K_hat, filtered = select_mode_Kplus(trace)
    out, _ = relabel_draws(filtered, K_hat)
    by_iter = {d.iter: d for d in filtered}
    for d in out:
        assert draw_loglik(d, data.values) == pytest.approx(draw_loglik(by_iter[d.iter], data.values), abs=1e-9)


def test_identify_errors_with_report():
    trace = [make_record([[0.0, 0.0], [5.0, 5.0]], seed=0)]
    with pytest.raises(PostprocessError) as err:
        identify(trace, min_draws=2)
    assert err.value.report["after_relabel"] <= 1
