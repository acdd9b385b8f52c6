"""Layer-wise recursion for the sample-space density gradient.

The key object is G = d log q(x) / dx, carried alongside the points as they
move through the flow.  For a coupling layer mapping (t, c) -> (f(t, c), c)
the update is

    G_t' = (G_t - d logdet / dt) / diag(df/dt)
    G_c' = G_c - G_t' . df/dc - d logdet / dc

which needs only quantities available while evaluating the layer, so sampling
and density-gradient computation share one pass and no inverses are ever
taken.  The conditioner-side terms are obtained with one vector-Jacobian
product on the conditioner per layer, keeping the cost linear in dimension.

Running the same update over the inverted layers, starting from the target's
score, transports the target density to base space and yields the gradient
of the pulled-back log density, which is what forward-KL path estimators
need.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import NumericsError, UsageError
from .flows import FlowModel, LayerApp, Tape, apply_layer_forward, apply_layer_inverse
from .targets import BaseDensity

# test hook: when nonzero, the logdet term in the fused coupling update is
# scaled by (1 + _CORRUPTION), letting negative-control checks prove the
# oracle suites would catch a wrong recursion
_CORRUPTION = 0.0


def set_corruption(epsilon: float) -> None:
    global _CORRUPTION
    _CORRUPTION = float(epsilon)


class _Timer:
    """Accumulates wall time spent in the G-update steps alone."""

    __slots__ = ("seconds",)

    def __init__(self):
        self.seconds = 0.0

    def reset(self):
        self.seconds = 0.0


#: time spent advancing the density-gradient recursion (excludes the flow
#: evaluation itself); used by the linear-cost benchmark
RECURSION_TIMER = _Timer()


@dataclass
class RecursionState:
    """Density-gradient components under one layer's coordinate split."""

    g_trans: np.ndarray
    g_cond: np.ndarray
    trans: np.ndarray
    cond: np.ndarray

    def full(self) -> np.ndarray:
        d = self.trans.size + self.cond.size
        out = np.empty((self.g_trans.shape[0], d))
        out[:, self.trans] = self.g_trans
        out[:, self.cond] = self.g_cond
        return out


def recursion_init(base: BaseDensity, x0: np.ndarray, trans: np.ndarray,
                   cond: np.ndarray) -> RecursionState:
    """Start the recursion from the base density's log-gradient."""
    _, g = base.log_density_and_grad(np.atleast_2d(x0))
    return RecursionState(g[:, trans], g[:, cond], np.asarray(trans), np.asarray(cond))


@dataclass
class CouplingStepQuantities:
    """Layer quantities feeding one recursion step.

    ``df_dcond``/``dlogdet_dcond`` may be dense arrays (tests, small d) or be
    replaced by ``cond_pullback`` computing u . df/dc + d logdet/dc in one
    conditioner VJP (production path).
    """

    diag: np.ndarray
    dlogdet_dtrans: np.ndarray | None = None
    df_dcond: np.ndarray | None = None
    dlogdet_dcond: np.ndarray | None = None
    cond_pullback: object = None


def recursion_step_coupling(state: RecursionState,
                            q: CouplingStepQuantities) -> RecursionState:
    """Generic coupling update; diagonal Jacobian entries must be nonzero."""
    if np.any(q.diag == 0.0):
        raise NumericsError("singular coupling Jacobian (zero diagonal entry)")
    gt = state.g_trans
    if q.dlogdet_dtrans is not None:
        gt = gt - (1.0 + _CORRUPTION) * q.dlogdet_dtrans
    gt = gt / q.diag
    if q.cond_pullback is not None:
        gc = state.g_cond - q.cond_pullback(gt)
    else:
        gc = state.g_cond.copy()
        if q.df_dcond is not None:
            gc -= np.einsum("nk,nkc->nc", gt, q.df_dcond)
        if q.dlogdet_dcond is not None:
            gc -= (1.0 + _CORRUPTION) * q.dlogdet_dcond
    return RecursionState(gt, gc, state.trans, state.cond)


def recursion_step_affine(state: RecursionState, sigma: np.ndarray,
                          dsigma_dcond: np.ndarray, dmu_dcond: np.ndarray,
                          x_trans: np.ndarray) -> RecursionState:
    """Affine specialization: the logdet loses its trans dependence.

    d logdet / dcond follows from dsigma_dcond since logdet = sum log sigma.
    """
    if np.any(sigma == 0.0):
        raise NumericsError("singular affine layer (zero scale entry)")
    gt = state.g_trans / sigma
    bracket = dsigma_dcond * x_trans[:, :, None] + dmu_dcond
    dlogdet_dcond = (dsigma_dcond / sigma[:, :, None]).sum(axis=1)
    gc = (state.g_cond - np.einsum("nk,nkc->nc", gt, bracket)
          - (1.0 + _CORRUPTION) * dlogdet_dcond)
    return RecursionState(gt, gc, state.trans, state.cond)


def recursion_step_dense(g: np.ndarray, jac: np.ndarray,
                         dlogdet_dx: np.ndarray) -> np.ndarray:
    """Reference update for an arbitrary diffeomorphism via dense solves.

    g' = (g - dlogdet_dx) . jac^{-1}, one (d, d) system per sample.  Only
    meant for small-d cross-checks of the coupling specialization.
    """
    if jac.shape[-1] > 8:
        raise UsageError("dense recursion reference is restricted to d <= 8")
    rhs = g - dlogdet_dx
    # row-vector times inverse Jacobian == solve with the transpose
    return np.linalg.solve(np.swapaxes(jac, -1, -2), rhs[..., None])[..., 0]


# ---------------------------------------------------------------------------
# fused per-layer updates (production path)
# ---------------------------------------------------------------------------


def _step_forward(app: LayerApp, g: np.ndarray) -> np.ndarray:
    layer = app.layer
    if layer.kind == "global_scale":
        return g / app.cache["s"]
    gt = g[:, layer.trans]
    gc = g[:, layer.cond]
    if layer.kind == "affine":
        sigma = app.cache["sigma"]
        mask = app.cache["mask"]
        xt = app.cache["xt"]
        gt = gt / sigma
        k = layer.k
        seed = np.empty((g.shape[0], 2 * k))
        seed[:, :k] = (gt * xt * sigma + (1.0 + _CORRUPTION)) * mask
        seed[:, k:] = gt
        gc = gc - app.cond_vjp(seed)
    else:
        ker = app.cache["kernel"]
        gt = (gt - (1.0 + _CORRUPTION) * ker.dlogtp_dx) / ker.tp
        seed = (gt[:, :, None] * ker.dtau_da
                + (1.0 + _CORRUPTION) * ker.dlogtp_da).reshape(g.shape[0], -1)
        gc = gc - app.cond_vjp(seed)
    out = np.empty_like(g)
    out[:, layer.trans] = gt
    out[:, layer.cond] = gc
    return out


def _step_inverse(app: LayerApp, g: np.ndarray) -> np.ndarray:
    """Same recursion applied to the inverted layer (scale 1/sigma etc.)."""
    layer = app.layer
    if layer.kind == "global_scale":
        return g * app.cache["s"]
    gt = g[:, layer.trans]
    gc = g[:, layer.cond]
    if layer.kind == "affine":
        sigma = app.cache["sigma"]
        mask = app.cache["mask"]
        xt = app.cache["xt"]  # inverse-layer outputs
        gt = gt * sigma
        k = layer.k
        seed = np.empty((g.shape[0], 2 * k))
        seed[:, :k] = -(gt * xt + (1.0 + _CORRUPTION)) * mask
        seed[:, k:] = -gt / sigma
        gc = gc - app.cond_vjp(seed)
    else:
        ker = app.cache["kernel"]
        gt = gt * ker.tp + (1.0 + _CORRUPTION) * ker.dlogtp_dx
        ratio = (ker.dlogtp_dx / ker.tp)[:, :, None]
        seed = (-(gt / ker.tp)[:, :, None] * ker.dtau_da
                + (1.0 + _CORRUPTION) * (ratio * ker.dtau_da - ker.dlogtp_da)
                ).reshape(g.shape[0], -1)
        gc = gc - app.cond_vjp(seed)
    out = np.empty_like(g)
    out[:, layer.trans] = gt
    out[:, layer.cond] = gc
    return out


@dataclass
class AugmentedBatch:
    """Points with per-sample log density and its gradient attached.

    For the forward direction x is the pushed-forward sample, log_q the model
    log density, G its gradient.  For the inverse direction x is the base
    point, log_q the (unnormalized) pulled-back target log density, G its
    gradient.
    """

    x: np.ndarray
    log_q: np.ndarray
    G: np.ndarray
    out_entry: int | None = None
    leaf_entry: int | None = None
    logq0_entry: int | None = None
    logdet_entries: tuple = ()


def forward_with_G(model: FlowModel, x0: np.ndarray, tape: Tape) -> AugmentedBatch:
    """Joint pass: sample, log density, and its gradient, with no inversions.

    Each layer application is immediately followed by its G update, and
    everything lands on one tape, so a single VJP against the returned sample
    entry afterwards yields path gradients.
    """
    if tape is None:
        raise UsageError("forward_with_G needs a tape")
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    log_q, g = model.base.log_density_and_grad(x)
    log_q = log_q.copy()
    entry = tape.leaf(x)
    leaf = entry
    ld_entries = []
    for i, layer in enumerate(model.layers):
        app = apply_layer_forward(layer, model.params, x, tape, entry, i)
        x, entry = app.y, app.y_entry
        log_q -= app.logdet
        ld_entries.append(app.logdet_entry)
        t0 = time.perf_counter()
        g = _step_forward(app, g)
        RECURSION_TIMER.seconds += time.perf_counter() - t0
    if not np.all(np.isfinite(g)):
        raise NumericsError("non-finite density gradient in recursion")
    return AugmentedBatch(x, log_q, g, out_entry=entry, leaf_entry=leaf,
                          logdet_entries=tuple(ld_entries))


def inverse_with_G(model: FlowModel, x: np.ndarray, target, tape: Tape,
                   tol: float = 1e-10) -> AugmentedBatch:
    """Pull target samples back to base space, carrying the gradient of the
    pulled-back target log density (initialized from -target.score)."""
    if tape is None:
        raise UsageError("inverse_with_G needs a tape")
    y = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g = -target.score(y)
    log_pull = -target.energy(y)
    entry = tape.leaf(y)
    leaf = entry
    ld_entries = []
    for i, layer in zip(reversed(range(len(model.layers))), reversed(model.layers)):
        app = apply_layer_inverse(layer, model.params, y, tape, entry, i, tol=tol)
        y, entry = app.y, app.y_entry
        log_pull -= app.logdet
        ld_entries.append(app.logdet_entry)
        t0 = time.perf_counter()
        g = _step_inverse(app, g)
        RECURSION_TIMER.seconds += time.perf_counter() - t0
    if not np.all(np.isfinite(g)):
        raise NumericsError("non-finite density gradient in inverse recursion")
    return AugmentedBatch(y, log_pull, g, out_entry=entry, leaf_entry=leaf,
                          logdet_entries=tuple(ld_entries))
