"""Estimator identities, closed-form oracles, and statistical checks."""

import numpy as np
import pytest

from flowgrad import (
    GmmTarget,
    SelfTarget,
    UsageError,
    estimate,
    finite_difference_gradient,
    flow_forward,
    grad_forward_gdreg,
    grad_forward_mle,
    grad_forward_path,
    grad_reverse_path_baseline,
    grad_reverse_path_fast,
    grad_reverse_standard,
    score_expectation,
    standard_normal,
)
from flowgrad.estimators import score_terms
from flowgrad.metrics import nll
from flowgrad.targets import ShiftedTarget

from conftest import make_flow, make_mixed_flow, scale_flow


def chunked_mean_and_se(fn, n_chunks, chunk_size, seed=0):
    """Mean gradient over independent chunks plus its per-coordinate SE."""
    rng = np.random.default_rng(seed)
    means = np.stack([fn(rng, chunk_size) for _ in range(n_chunks)])
    mean = means.mean(axis=0)
    se = means.std(axis=0, ddof=1) / np.sqrt(n_chunks)
    return mean, se


# ---------------------------------------------------------------------------
# closed-form scale-flow oracles
# ---------------------------------------------------------------------------
#
# Flow x = s * x0 with standard normal base and target:
#   reverse KL(s)  = (s^2 - 1)/2 - log s      d/ds = s - 1/s
#   forward KL(s)  = log s + 1/(2 s^2) - 1/2  d/ds = 1/s - 1/s^3


def test_reverse_estimators_match_closed_form_gradient():
    s = 2.0
    model = scale_flow(s)
    target = SelfTarget(standard_normal(1))
    want = s - 1.0 / s

    for tag in ("rev_std", "rev_path_fast", "rev_path_baseline"):
        mean, se = chunked_mean_and_se(
            lambda rng, n, tag=tag: estimate(tag, model, target,
                                             batch_size=n, rng=rng).grad,
            n_chunks=100, chunk_size=1000, seed=7)
        assert abs(mean[0] - want) <= 3 * se[0], (tag, mean, se)


def test_forward_estimators_match_closed_form_gradient():
    s = 2.0
    model = scale_flow(s)
    base = standard_normal(1)
    target = SelfTarget(base)
    want = 1.0 / s - 1.0 / s ** 3

    def run(tag):
        def fn(rng, n):
            data = base.sample(rng, n)  # target == base here
            return estimate(tag, model, target, data=data).grad
        return chunked_mean_and_se(fn, n_chunks=100, chunk_size=1000, seed=8)

    for tag in ("fwd_mle", "fwd_path", "fwd_gdreg"):
        mean, se = run(tag)
        assert abs(mean[0] - want) <= 3 * se[0], (tag, mean, se)


# ---------------------------------------------------------------------------
# per-batch identities
# ---------------------------------------------------------------------------


def test_fast_equals_baseline_per_batch_explicit(rng):
    model = make_flow(d=4, n_layers=4, hidden=(8,), seed=3, jitter=0.4,
                      global_scale=True)
    target = GmmTarget(4, 0.5)
    x0 = model.base.sample(rng, 256)
    fast = grad_reverse_path_fast(model, target, x0=x0)
    base = grad_reverse_path_baseline(model, target, x0=x0)
    scale = np.abs(fast.grad).max()
    assert np.abs(fast.grad - base.grad).max() / scale < 1e-8


def test_fwd_path_equals_gdreg_per_batch(rng):
    model = make_flow(d=4, n_layers=4, hidden=(8,), seed=5, jitter=0.4)
    target = GmmTarget(4, 0.5)
    data = target.sample(rng, 256)
    a = grad_forward_path(model, target, data)
    b = grad_forward_gdreg(model, target, data)
    scale = np.abs(a.grad).max()
    assert np.abs(a.grad - b.grad).max() / scale < 1e-8


def test_fwd_identity_holds_loosely_on_implicit_flow(rng):
    model = make_mixed_flow(seed=6, jitter=0.25)
    target = GmmTarget(4, 0.5)
    data = target.sample(rng, 64)
    a = grad_forward_path(model, target, data, tol=1e-11)
    b = grad_forward_gdreg(model, target, data, tol=1e-11)
    scale = np.abs(a.grad).max()
    assert np.abs(a.grad - b.grad).max() / scale < 1e-5


def test_standard_equals_path_plus_score_per_batch(rng):
    model = make_flow(d=4, n_layers=3, hidden=(8,), seed=9, jitter=0.4)
    target = GmmTarget(4, 0.5)
    x0 = model.base.sample(rng, 128)
    std = grad_reverse_standard(model, target, x0=x0)
    path = grad_reverse_path_fast(model, target, x0=x0)
    score = score_terms(model, flow_forward(model, x0)[0])[0]
    scale = np.abs(std.grad).max()
    assert np.abs(std.grad - (path.grad + score)).max() / scale < 1e-8


def test_unbiasedness_consistency_across_estimators():
    # fixed flow/target; all three reverse means agree within 4 combined SEs
    model = make_flow(d=2, n_layers=2, hidden=(4,), seed=11, jitter=0.4)
    target = GmmTarget(2, 0.5)

    def rev(tag):
        return chunked_mean_and_se(
            lambda rng, n: estimate(tag, model, target, batch_size=n, rng=rng).grad,
            n_chunks=100, chunk_size=1000, seed=13)

    means, ses = zip(*(rev(t) for t in ("rev_std", "rev_path_fast",
                                        "rev_path_baseline")))
    for i in range(1, 3):
        gap = np.abs(means[0] - means[i])
        tol = 4 * np.sqrt(ses[0] ** 2 + ses[i] ** 2)
        assert np.all(gap <= tol)

    def fwd(tag):
        def fn(rng, n):
            return estimate(tag, model, target, data=target.sample(rng, n)).grad
        return chunked_mean_and_se(fn, n_chunks=100, chunk_size=1000, seed=17)

    means, ses = zip(*(fwd(t) for t in ("fwd_mle", "fwd_path", "fwd_gdreg")))
    for i in range(1, 3):
        gap = np.abs(means[0] - means[i])
        tol = 4 * np.sqrt(ses[0] ** 2 + ses[i] ** 2)
        assert np.all(gap <= tol)


# ---------------------------------------------------------------------------
# perfect-fit behavior
# ---------------------------------------------------------------------------


def test_sticking_the_landing_per_sample(rng):
    base = standard_normal(4)
    target = SelfTarget(base)
    model = make_flow(d=4, jitter=0.0)
    x0 = base.sample(rng, 512)
    data = base.sample(rng, 512)

    path = grad_reverse_path_fast(model, target, x0=x0)
    assert path.per_sample_norm_mean < 1e-10
    fwd = grad_forward_path(model, target, data)
    assert fwd.per_sample_norm_mean < 1e-10

    std = grad_reverse_standard(model, target, x0=x0)
    mle = grad_forward_mle(model, data)
    assert std.per_sample_norm_mean > 1e-3
    assert mle.per_sample_norm_mean > 1e-3
    # means still vanish statistically: |mean| <= 4 SE estimated from chunks
    mean, se = chunked_mean_and_se(
        lambda r, n: grad_reverse_standard(model, target, batch_size=n, rng=r).grad,
        n_chunks=50, chunk_size=500, seed=23)
    assert np.all(np.abs(mean) <= 4 * se + 1e-12)


def test_gdreg_identity_flow_exactly_zero(rng):
    base = standard_normal(4)
    model = make_flow(d=4, jitter=0.0)
    data = base.sample(rng, 64)
    est = grad_forward_gdreg(model, SelfTarget(base), data)
    assert est.per_sample_norm_mean < 1e-12
    assert np.allclose(est.grad, 0.0, atol=1e-13)


def test_rev_std_identity_integrand_is_zero(rng):
    # log(q/p) vanishes pointwise; only the score term remains
    base = standard_normal(3)
    model = make_flow(d=3, n_layers=2, hidden=(6,), jitter=0.0)
    target = SelfTarget(base)
    x0 = base.sample(rng, 256)
    x, lq = flow_forward(model, x0)
    assert np.allclose(lq + (-target.energy(x)) - 2 * lq, 0.0, atol=1e-12)
    est = grad_reverse_standard(model, target, x0=x0)
    assert est.per_sample_norm_mean > 0.0


# ---------------------------------------------------------------------------
# forward-KL specifics
# ---------------------------------------------------------------------------


def test_mle_single_point_pulls_shift_toward_point():
    model = make_flow(d=2, n_layers=2, hidden=(6,), jitter=0.0)
    point = np.array([[1.0, -0.5]])
    est = grad_forward_mle(model, point)
    layer = model.layers[0]
    slots = list(layer.mlp.layer_slots(layer.offset))[-1]
    k = layer.k
    mu_slot = slots["b"].start + k  # [scale-pre bias | shift bias]
    tr = int(layer.trans[0])
    assert np.sign(est.grad[mu_slot]) == -np.sign(point[0, tr])
    assert abs(est.grad[mu_slot] - (-point[0, tr])) < 1e-10


def test_mle_matches_finite_differences_of_nll(rng):
    model = make_flow(d=3, n_layers=2, hidden=(6,), seed=29, jitter=0.4)
    data = rng.normal(0, 1, (16, 3))
    est = grad_forward_mle(model, data)
    fd = finite_difference_gradient(
        lambda p: nll(model.with_params(p), data), model.params, 1e-5)
    assert np.allclose(est.grad, fd, rtol=1e-5, atol=1e-7)


def test_empty_batch_is_usage_error():
    model = make_flow(d=2, n_layers=2, hidden=(4,), jitter=0.0)
    with pytest.raises(UsageError):
        grad_forward_mle(model, np.zeros((0, 2)))


# ---------------------------------------------------------------------------
# score expectation
# ---------------------------------------------------------------------------


def test_score_expectation_vanishes_statistically():
    model = make_flow(d=2, n_layers=2, hidden=(4,), seed=31, jitter=0.4)
    mean, se = chunked_mean_and_se(
        lambda r, n: score_expectation(model, n, r), n_chunks=100,
        chunk_size=1000, seed=37)
    assert np.all(np.abs(mean) <= 4 * se + 1e-12)


def test_score_zero_for_parameters_the_density_never_touches(rng):
    # at identity initialization the hidden weights are invisible to log q
    model = make_flow(d=2, n_layers=1, hidden=(6,), seed=41, jitter=0.0)
    layer = model.layers[0]
    slots = list(layer.mlp.layer_slots(layer.offset))
    x = rng.normal(0, 1, (64, 2))
    grad, _ = score_terms(model, x)
    hidden_w = grad[slots[0]["w"]]
    assert np.array_equal(hidden_w, np.zeros_like(hidden_w))
    assert np.abs(grad[slots[-1]["b"]]).max() > 0.0


def test_score_variance_positive_for_generic_flow(rng):
    model = make_flow(d=2, n_layers=2, hidden=(4,), seed=43, jitter=0.4)
    x0 = model.base.sample(rng, 1000)
    x, _ = flow_forward(model, x0)
    mean, sqn = score_terms(model, x)
    var = sqn.mean() - float(mean @ mean)
    assert var > 1e-4


# ---------------------------------------------------------------------------
# invariances
# ---------------------------------------------------------------------------


def test_energy_shift_leaves_all_estimators_bitwise_unchanged(rng):
    model = make_flow(d=4, n_layers=2, hidden=(6,), seed=47, jitter=0.4)
    target = GmmTarget(4, 0.5)
    shifted = ShiftedTarget(target, 123.456)
    x0 = model.base.sample(rng, 64)
    data = target.sample(rng, 64)
    for tag in ("rev_std", "rev_path_fast", "rev_path_baseline"):
        a = estimate(tag, model, target, x0=x0).grad
        b = estimate(tag, model, shifted, x0=x0).grad
        assert np.array_equal(a, b), tag
    for tag in ("fwd_mle", "fwd_path", "fwd_gdreg"):
        a = estimate(tag, model, target, data=data).grad
        b = estimate(tag, model, shifted, data=data).grad
        assert np.array_equal(a, b), tag


def test_threaded_estimation_matches_mean(rng, monkeypatch):
    model = make_flow(d=4, n_layers=2, hidden=(6,), seed=53, jitter=0.4)
    target = GmmTarget(4, 0.5)
    x0 = model.base.sample(rng, 128)
    serial = grad_reverse_path_fast(model, target, x0=x0)
    monkeypatch.setenv("FLOWGRAD_THREADS", "4")
    threaded = grad_reverse_path_fast(model, target, x0=x0)
    assert np.allclose(serial.grad, threaded.grad, rtol=1e-12, atol=1e-14)
    assert abs(serial.per_sample_norm_mean - threaded.per_sample_norm_mean) < 1e-12


def test_estimate_rejects_unknown_tag():
    model = make_flow(d=2, n_layers=2, hidden=(4,), jitter=0.0)
    with pytest.raises(UsageError):
        estimate("nonsense", model, None, batch_size=4,
                 rng=np.random.default_rng(0))
