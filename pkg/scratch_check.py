import numpy as np
from flowgrad import *
from flowgrad.tape import mlp_apply
from flowgrad.flows import forward_pass, inverse_pass, Tape
from flowgrad.estimators import score_terms

rng = np.random.default_rng(0)

# 1. MLP vjp vs finite differences
spec = MlpSpec((2, 5, 3), "tanh")
params = rng.normal(0, 0.5, spec.n_params)
x = rng.normal(0, 1, 2)
for wn in (False, True):
    sp = MlpSpec((2, 5, 3), "tanh", weight_norm=wn)
    pp = rng.normal(0, 0.5, sp.n_params)
    for j in range(3):
        tape = Tape(pp)
        y = mlp_forward(sp, pp, x, tape)
        seed = np.zeros(3); seed[j] = 1.0
        pg, ig = tape_vjp(tape, seed)
        fd = finite_difference_gradient(lambda p: mlp_forward(sp, p, x)[j], pp, 1e-6)
        err = np.max(np.abs(pg - fd) / (np.abs(fd) + 1e-8))
        fdx = finite_difference_gradient(lambda xv: mlp_forward(sp, pp, xv)[j], x, 1e-6)
        errx = np.max(np.abs(ig - fdx) / (np.abs(fdx) + 1e-8))
        print(f"wn={wn} out {j}: param err {err:.2e} input err {errx:.2e}")

# 2. round trip
base = standard_normal(4)
for kind in ("affine", "logistic_mixture"):
    model = build_flow(base, n_layers=4, kind=kind, hidden=(8,), mixture_size=3, rng=rng)
    # randomize params away from identity
    model = model.with_params(model.params + 0.3 * rng.normal(size=model.n_params))
    x0 = rng.normal(size=(10, 4))
    x, lq = flow_forward(model, x0)
    x0b, lqb = flow_inverse_logq(model, x)
    print(kind, "roundtrip", np.abs(x0b - x0).max(), "logq diff", np.abs(lq - lqb).max())

# 3. forward_with_G vs autodiff of inverse pass
for kind in ("affine", "logistic_mixture"):
    model = build_flow(base, n_layers=4, kind=kind, hidden=(8,), mixture_size=3, rng=rng)
    model = model.with_params(model.params + 0.3 * rng.normal(size=model.n_params))
    x0 = rng.normal(size=(7, 4))
    BISECTION_EVALS.reset()
    tape = Tape(model.params)
    aug = forward_with_G(model, x0, tape)
    assert BISECTION_EVALS.count == 0, "fast pass must not bisect"
    # reference: gradient of inverse-pass log q wrt x
    tape2 = Tape(model.params)
    inv = inverse_pass(model, aug.x, tape2)
    seeds = {inv.logq0_entry: np.ones(7)}
    for app in inv.apps:
        seeds[app.logdet_entry] = np.ones(7)
    g_ref = tape2.backward(seeds, want_param_grad=False,
                           want_entries=(tape2.input_id,)).entry_grads[tape2.input_id]
    print(kind, "G err", np.abs(aug.G - g_ref).max(), "logq err",
          np.abs(aug.log_q - inv.log_q).max())

# 4. estimator identity fast vs baseline (explicit)
model = build_flow(base, n_layers=4, kind="affine", hidden=(8,), rng=rng)
model = model.with_params(model.params + 0.3 * rng.normal(size=model.n_params))
target = GmmTarget(4, 0.5)
x0 = rng.normal(size=(64, 4))
e1 = grad_reverse_path_fast(model, target, x0=x0)
e2 = grad_reverse_path_baseline(model, target, x0=x0)
e3 = grad_reverse_standard(model, target, x0=x0)
sc = score_terms(model, flow_forward(model, x0)[0])[0]
print("fast vs baseline", np.abs(e1.grad - e2.grad).max() / (np.abs(e1.grad).max()))
print("decomposition", np.abs(e3.grad - (e1.grad + sc)).max() / np.abs(e3.grad).max())

# 5. fwd path vs gdreg
data = target.sample(rng, 64)
f1 = grad_forward_path(model, target, data)
f2 = grad_forward_gdreg(model, target, data)
print("fwd path vs gdreg", np.abs(f1.grad - f2.grad).max() / np.abs(f1.grad).max())

# 6. scale flow closed forms
base1 = standard_normal(1)
layer = CouplingLayer("global_scale", np.arange(1), np.array([], dtype=np.intp), None, 0)
smodel = FlowModel([layer], base1, np.array([2.0]))
starget = SelfTarget(base1)
r = np.random.default_rng(5)
est = grad_reverse_standard(smodel, starget, 200000, r)
print("rev closed form: got", est.grad[0], "want", 2 - 0.5)
estf = grad_forward_path(smodel, starget, base1.sample(r, 200000))
print("fwd closed form: got", estf.grad[0], "want", 1/2 - 1/8)

# 7. sticking the landing at perfect fit
ident = build_flow(base, n_layers=4, kind="affine", hidden=(8,), rng=rng)
st = SelfTarget(base)
x0 = rng.normal(size=(256, 4))
pf = grad_reverse_path_fast(ident, st, x0=x0)
sd = grad_reverse_standard(ident, st, x0=x0)
fp = grad_forward_path(ident, st, base.sample(rng, 256))
print("path per-sample norm", pf.per_sample_norm_mean, "std per-sample norm", sd.per_sample_norm_mean)
print("fwd path per-sample norm", fp.per_sample_norm_mean)
