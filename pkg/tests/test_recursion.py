"""Density-gradient recursion: hand cases, oracles, and the dense reference."""

import numpy as np
import pytest

from flowgrad import (
    BISECTION_EVALS,
    CouplingStepQuantities,
    GmmTarget,
    RecursionState,
    SelfTarget,
    Tape,
    flow_forward,
    flow_inverse_logq,
    forward_with_G,
    inverse_with_G,
    recursion_init,
    recursion_step_affine,
    recursion_step_coupling,
    recursion_step_dense,
    standard_normal,
    uniform_interval,
)
from flowgrad.flows import SCALE_CLAMP, apply_layer_forward, inverse_pass
from flowgrad.recursion import set_corruption
from flowgrad.tape import mlp_apply

from conftest import make_flow, make_mixed_flow, scale_flow, zero_conditioner_hidden, set_conditioner_bias


def conditioner_jacobian(layer, params, xc):
    """Exact batched Jacobian of the conditioner via basis-seeded VJPs."""
    tape = Tape(params)
    eid = tape.leaf(xc)
    h, hid = mlp_apply(layer.mlp, params, xc, tape, layer.offset, eid)
    out_w = layer.mlp.widths[-1]
    jac = np.empty((xc.shape[0], out_w, xc.shape[1]))
    for j in range(out_w):
        seed = np.zeros((xc.shape[0], out_w))
        seed[:, j] = 1.0
        jac[:, j, :] = tape.backward(
            {hid: seed}, want_param_grad=False, want_entries=(eid,)).entry_grads[eid]
    return h, jac


def affine_quantities(layer, params, x):
    """Dense per-layer quantities for the generic step (test path)."""
    xc = x[:, layer.cond]
    xt = x[:, layer.trans]
    k = layer.k
    h, jac = conditioner_jacobian(layer, params, xc)
    s_pre = h[:, :k]
    sigma = np.exp(np.clip(s_pre, -SCALE_CLAMP, SCALE_CLAMP))
    mask = (np.abs(s_pre) < SCALE_CLAMP).astype(float)
    dsig = sigma[:, :, None] * mask[:, :, None] * jac[:, :k, :]
    dmu = jac[:, k:, :]
    return sigma, dsig, dmu, xt


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def test_recursion_init_zero_point():
    base = standard_normal(2)
    st = recursion_init(base, np.zeros((1, 2)), np.array([0]), np.array([1]))
    assert np.array_equal(st.g_trans, np.zeros((1, 1)))
    assert np.array_equal(st.g_cond, np.zeros((1, 1)))


def test_recursion_init_scatters_base_gradient():
    base = standard_normal(2)
    st = recursion_init(base, np.array([[1.0, 2.0]]), np.array([0]), np.array([1]))
    assert np.array_equal(st.g_trans, [[-1.0]])
    assert np.array_equal(st.g_cond, [[-2.0]])
    assert np.array_equal(st.full(), [[-1.0, -2.0]])


def test_recursion_init_uniform_base_is_zero():
    base = uniform_interval(3, 0.0, 1.0)
    st = recursion_init(base, np.full((2, 3), 0.5), np.array([0, 2]), np.array([1]))
    assert np.array_equal(st.full(), np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# step functions
# ---------------------------------------------------------------------------


def test_identity_layer_step_is_noop(rng):
    g = rng.normal(0, 1, (3, 4))
    st = RecursionState(g[:, :2], g[:, 2:], np.array([0, 1]), np.array([2, 3]))
    q = CouplingStepQuantities(diag=np.ones((3, 2)),
                               df_dcond=np.zeros((3, 2, 2)),
                               dlogdet_dcond=np.zeros((3, 2)))
    out = recursion_step_coupling(st, q)
    assert np.array_equal(out.full(), g)


def test_hand_affine_step():
    # constant sigma=2, mu=0 over a standard normal base at x_trans = 1
    base = standard_normal(2)
    st = recursion_init(base, np.array([[1.0, 0.3]]), np.array([0]), np.array([1]))
    q = CouplingStepQuantities(diag=np.full((1, 1), 2.0),
                               df_dcond=np.zeros((1, 1, 1)),
                               dlogdet_dcond=np.zeros((1, 1)))
    out = recursion_step_coupling(st, q)
    assert abs(out.g_trans[0, 0] - (-0.5)) < 1e-15
    # matches d/dx1 log q1 = -x1 / 4 evaluated at x1 = 2
    assert abs(out.g_trans[0, 0] - (-2.0 / 4.0)) < 1e-15


def test_affine_step_identity_and_constant_conditioner(rng):
    g = rng.normal(0, 1, (2, 4))
    st = RecursionState(g[:, :2].copy(), g[:, 2:].copy(),
                        np.array([0, 1]), np.array([2, 3]))
    xt = rng.normal(0, 1, (2, 2))
    ones = np.ones((2, 2))
    out = recursion_step_affine(st, ones, np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), xt)
    assert np.allclose(out.full(), g, atol=1e-15)
    # constant sigma != 1 with no cond dependence: g_cond untouched
    sig = np.full((2, 2), 1.7)
    out = recursion_step_affine(st, sig, np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), xt)
    assert np.allclose(out.g_cond, st.g_cond, atol=1e-15)
    assert np.allclose(out.g_trans, st.g_trans / 1.7, atol=1e-15)


def test_affine_step_equals_generic_coupling_step(rng):
    model = make_flow(d=4, n_layers=1, hidden=(6,), seed=21, jitter=0.5)
    layer = model.layers[0]
    x = rng.normal(0, 1, (5, 4))
    sigma, dsig, dmu, xt = affine_quantities(layer, model.params, x)
    g = rng.normal(0, 1, (5, 4))
    st = RecursionState(g[:, layer.trans], g[:, layer.cond], layer.trans, layer.cond)

    via_affine = recursion_step_affine(st, sigma, dsig, dmu, xt)
    q = CouplingStepQuantities(
        diag=sigma,
        df_dcond=dsig * xt[:, :, None] + dmu,
        dlogdet_dcond=(dsig / sigma[:, :, None]).sum(axis=1),
    )
    via_generic = recursion_step_coupling(st, q)
    assert np.allclose(via_affine.full(), via_generic.full(), atol=1e-12)


def test_fused_step_equals_explicit_quantities(rng):
    # the production seed-trick VJP equals the dense-Jacobian step
    model = make_flow(d=4, n_layers=1, hidden=(6,), seed=13, jitter=0.5)
    layer = model.layers[0]
    x = rng.normal(0, 1, (4, 4))
    sigma, dsig, dmu, xt = affine_quantities(layer, model.params, x)
    g = rng.normal(0, 1, (4, 4))
    st = RecursionState(g[:, layer.trans], g[:, layer.cond], layer.trans, layer.cond)
    expected = recursion_step_affine(st, sigma, dsig, dmu, xt)

    from flowgrad.recursion import _step_forward
    tape = Tape(model.params)
    app = apply_layer_forward(layer, model.params, x, tape, tape.leaf(x))
    got = _step_forward(app, g)
    assert np.allclose(got, expected.full(), atol=1e-12)


def test_singular_jacobian_raises():
    st = RecursionState(np.ones((1, 1)), np.ones((1, 1)),
                        np.array([0]), np.array([1]))
    q = CouplingStepQuantities(diag=np.zeros((1, 1)))
    with pytest.raises(Exception):
        recursion_step_coupling(st, q)


def test_dense_reference_matches_coupling_step(rng):
    model = make_flow(d=4, n_layers=1, hidden=(6,), seed=17, jitter=0.5)
    layer = model.layers[0]
    x = rng.normal(0, 1, (3, 4))
    sigma, dsig, dmu, xt = affine_quantities(layer, model.params, x)
    g = rng.normal(0, 1, (3, 4))
    st = RecursionState(g[:, layer.trans], g[:, layer.cond], layer.trans, layer.cond)
    q = CouplingStepQuantities(
        diag=sigma,
        df_dcond=dsig * xt[:, :, None] + dmu,
        dlogdet_dcond=(dsig / sigma[:, :, None]).sum(axis=1),
    )
    stepped = recursion_step_coupling(st, q).full()

    d = 4
    jac = np.zeros((3, d, d))
    dld = np.zeros((3, d))
    tr, co = layer.trans, layer.cond
    for i, ti in enumerate(tr):
        jac[:, ti, ti] = sigma[:, i]
        jac[:, ti, co] = (dsig * xt[:, :, None] + dmu)[:, i, :]
    for j, cj in enumerate(co):
        jac[:, cj, cj] = 1.0
    dld[:, co] = (dsig / sigma[:, :, None]).sum(axis=1)
    dense = recursion_step_dense(g, jac, dld)
    assert np.allclose(dense, stepped, atol=1e-12)


# ---------------------------------------------------------------------------
# forward_with_G
# ---------------------------------------------------------------------------


def test_forward_with_g_identity_flow(rng):
    for kind in ("affine", "logistic_mixture"):
        model = make_flow(d=4, kind=kind, jitter=0.0)
        x0 = rng.normal(0, 1, (6, 4))
        tape = Tape(model.params)
        aug = forward_with_G(model, x0, tape)
        assert np.allclose(aug.G, -x0, atol=1e-12)
        assert np.allclose(aug.log_q, model.base.log_density(x0), atol=1e-12)


def inverse_pass_gradient(model, x, tol=1e-10):
    """Oracle: d log q(x)/dx by differentiating the inverse pass."""
    tape = Tape(model.params)
    inv = inverse_pass(model, x, tape, tol)
    seeds = {inv.logq0_entry: np.ones(x.shape[0])}
    for app in inv.apps:
        seeds[app.logdet_entry] = np.ones(x.shape[0])
    return tape.backward(seeds, want_param_grad=False,
                         want_entries=(tape.input_id,)).entry_grads[tape.input_id]


def test_forward_with_g_matches_inverse_pass_explicit(rng):
    model = make_flow(d=6, n_layers=4, hidden=(8,), seed=31, jitter=0.4,
                      global_scale=True)
    x0 = rng.normal(0, 1, (50, 6))
    tape = Tape(model.params)
    aug = forward_with_G(model, x0, tape)
    g_ref = inverse_pass_gradient(model, aug.x)
    denom = np.abs(g_ref).max()
    assert np.abs(aug.G - g_ref).max() / denom < 1e-10


def test_forward_with_g_matches_inverse_pass_implicit_no_bisection(rng):
    model = make_mixed_flow(seed=33, jitter=0.3)
    x0 = rng.normal(0, 1, (40, 4))
    BISECTION_EVALS.reset()
    tape = Tape(model.params)
    aug = forward_with_G(model, x0, tape)
    assert BISECTION_EVALS.count == 0
    g_ref = inverse_pass_gradient(model, aug.x, tol=1e-11)
    denom = np.abs(g_ref).max()
    assert np.abs(aug.G - g_ref).max() / denom < 1e-6


def test_forward_with_g_matches_finite_differences(rng):
    model = make_mixed_flow(seed=35, jitter=0.25)
    x0 = rng.normal(0, 1, (1, 4))
    tape = Tape(model.params)
    aug = forward_with_G(model, x0, tape)
    x = aug.x[0]
    h = 1e-5
    fd = np.empty(4)
    for i in range(4):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd[i] = (flow_inverse_logq(model, xp[None, :], tol=1e-12)[1][0]
                 - flow_inverse_logq(model, xm[None, :], tol=1e-12)[1][0]) / (2 * h)
    assert np.abs(aug.G[0] - fd).max() / np.abs(fd).max() < 1e-5


# ---------------------------------------------------------------------------
# inverse_with_G
# ---------------------------------------------------------------------------


def test_inverse_with_g_identity_flow_self_target(rng):
    base = standard_normal(4)
    model = make_flow(d=4, jitter=0.0)
    target = SelfTarget(base)
    x = rng.normal(0, 1, (6, 4))
    tape = Tape(model.params)
    aug = inverse_with_G(model, x, target, tape)
    assert np.allclose(aug.x, x, atol=1e-12)
    assert np.allclose(aug.G, -x, atol=1e-12)
    assert np.allclose(aug.log_q, base.log_density(x), atol=1e-12)


@pytest.mark.parametrize("case", ["scale_d1", "affine_d2"])
def test_inverse_with_g_matches_fd_of_pullback(case, rng):
    if case == "scale_d1":
        model = scale_flow(1.7, d=1)
        target = GmmTarget(1, 0.5)
    else:
        model = make_flow(d=2, n_layers=1, hidden=(6,), seed=41, jitter=0.5)
        target = GmmTarget(2, 0.5)
    x = target.sample(rng, 3)
    tape = Tape(model.params)
    aug = inverse_with_G(model, x, target, tape)

    def log_pull(x0_single):
        xf, lqf = flow_forward(model, x0_single[None, :])
        lq0 = model.base.log_density(x0_single[None, :])
        logdet_total = lq0 - lqf
        return float(-target.energy(xf)[0] + logdet_total[0])

    h = 1e-5
    for n in range(3):
        x0 = aug.x[n]
        for i in range(model.dim):
            xp, xm = x0.copy(), x0.copy()
            xp[i] += h
            xm[i] -= h
            fd = (log_pull(xp) - log_pull(xm)) / (2 * h)
            assert abs(aug.G[n, i] - fd) < 1e-5 * max(1.0, abs(fd))


def test_inverse_with_g_log_pullback_consistency(rng):
    model = make_flow(d=4, n_layers=4, hidden=(8,), seed=43, jitter=0.4)
    target = GmmTarget(4, 0.5)
    x = target.sample(rng, 20)
    tape = Tape(model.params)
    aug = inverse_with_G(model, x, target, tape)
    xf, lqf = flow_forward(model, aug.x)
    assert np.abs(xf - x).max() < 1e-10
    lq0 = model.base.log_density(aug.x)
    want = -target.energy(x) + (lq0 - lqf)
    assert np.abs(aug.log_q - want).max() < 1e-10


def test_corruption_hook_is_detected_and_reversible(rng):
    model = make_flow(d=4, n_layers=2, hidden=(6,), seed=51, jitter=0.5)
    x0 = rng.normal(0, 1, (10, 4))
    try:
        set_corruption(0.01)
        tape = Tape(model.params)
        aug = forward_with_G(model, x0, tape)
    finally:
        set_corruption(0.0)
    g_ref = inverse_pass_gradient(model, aug.x)
    assert np.abs(aug.G - g_ref).max() / np.abs(g_ref).max() > 1e-8
    tape = Tape(model.params)
    aug = forward_with_G(model, x0, tape)
    assert np.abs(aug.G - g_ref).max() / np.abs(g_ref).max() < 1e-10
