"""Coupling-flow layers, composition, inversion, and checkpoints.

Two transform kinds are provided:

* ``affine``: elementwise scale-and-shift with a closed-form inverse.  The
  scale is exp(clamp(pre, -8, 8)) so log-determinants cannot overflow.
* ``logistic_mixture``: x -> logit(sum_k w_k sigmoid((x - m_k)/s_k)), a
  strictly increasing map whose inverse is found by bisection.  All log
  quantities are evaluated in log space so the outer logit never saturates.

A ``global_scale`` layer (one learnable scalar multiplying every coordinate)
can cap the stack.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InversionError, NumericsError, UsageError
from .tape import (
    GatherRecord,
    MlpSpec,
    Record,
    ScatterRecord,
    Tape,
    BaseLogDensityRecord,
    mlp_apply,
    mlp_init,
)
from .targets import BaseDensity

SCALE_CLAMP = 8.0
DEFAULT_BISECTION_TOL = 1e-10
_MAX_BRACKET_DOUBLINGS = 60
_MAX_BISECT_ITERS = 200


class Counter:
    """Cheap instrumentation counter (single-threaded use)."""

    __slots__ = ("count",)

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0

    def add(self, n: int = 1):
        self.count += n


#: batched transform evaluations performed inside bisection loops
BISECTION_EVALS = Counter()
#: coordinates whose mixture CDF would saturate in direct (non-log) space
SATURATION_EVENTS = Counter()


# ---------------------------------------------------------------------------
# layer and model containers
# ---------------------------------------------------------------------------

_LAYER_KINDS = ("affine", "logistic_mixture", "global_scale")


@dataclass
class CouplingLayer:
    """One flow layer: a coordinate split plus a conditioner network.

    ``offset`` locates this layer's parameters inside the model's flat
    parameter vector.  ``global_scale`` layers have no split or conditioner;
    their single parameter is the raw scale.
    """

    kind: str
    trans: np.ndarray
    cond: np.ndarray
    mlp: MlpSpec | None = None
    offset: int = 0
    mixture_size: int = 0

    def __post_init__(self):
        if self.kind not in _LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        self.trans = np.asarray(self.trans, dtype=np.intp)
        self.cond = np.asarray(self.cond, dtype=np.intp)
        if self.kind == "global_scale":
            return
        k, c = len(self.trans), len(self.cond)
        if k < 1 or c < 1:
            raise ConfigError("coupling split needs nonempty trans and cond sets")
        if np.intersect1d(self.trans, self.cond).size:
            raise ConfigError("trans and cond sets overlap")
        if self.mlp is None:
            raise ConfigError("coupling layer needs a conditioner spec")
        if self.mlp.widths[0] != c:
            raise ConfigError(
                f"conditioner input width {self.mlp.widths[0]} != cond size {c}")
        if self.mlp.widths[-1] != self.h_width:
            raise ConfigError(
                f"conditioner output width {self.mlp.widths[-1]}, expected {self.h_width}")
        if self.kind == "logistic_mixture" and self.mixture_size < 1:
            raise ConfigError("logistic_mixture needs mixture_size >= 1")

    @property
    def k(self) -> int:
        return len(self.trans)

    @property
    def h_width(self) -> int:
        if self.kind == "affine":
            return 2 * self.k
        if self.kind == "logistic_mixture":
            return 3 * self.mixture_size * self.k
        return 0

    @property
    def n_params(self) -> int:
        return 1 if self.kind == "global_scale" else self.mlp.n_params


@dataclass
class FlowModel:
    """Ordered coupling layers over a base density, with flat parameters."""

    layers: list[CouplingLayer]
    base: BaseDensity
    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        want = sum(l.n_params for l in self.layers)
        if self.params.shape != (want,):
            raise ConfigError(f"model wants {want} parameters, got {self.params.shape}")
        d = self.base.dim
        for l in self.layers:
            if l.kind != "global_scale":
                union = np.union1d(l.trans, l.cond)
                if union.size != d or union[0] != 0 or union[-1] != d - 1:
                    raise ConfigError("layer split does not partition the coordinates")

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def n_params(self) -> int:
        return self.params.shape[0]

    def with_params(self, params: np.ndarray) -> "FlowModel":
        return FlowModel(self.layers, self.base, np.asarray(params, dtype=np.float64))


def alternating_masks(d: int, n_layers: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Even/odd index splits, flipped every layer."""
    if d < 2:
        raise ConfigError("need dimension >= 2 for coordinate splits")
    even = np.arange(0, d, 2)
    odd = np.arange(1, d, 2)
    out = []
    for i in range(n_layers):
        out.append((even, odd) if i % 2 == 0 else (odd, even))
    return out


def checkerboard_masks(shape: tuple[int, int], n_layers: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Lattice-parity splits for row-major sites on an (l1, l2) grid."""
    l1, l2 = shape
    ii, jj = np.meshgrid(np.arange(l1), np.arange(l2), indexing="ij")
    parity = ((ii + jj) % 2).ravel()
    black = np.flatnonzero(parity == 0)
    white = np.flatnonzero(parity == 1)
    if black.size == 0 or white.size == 0:
        raise ConfigError("degenerate checkerboard split")
    out = []
    for i in range(n_layers):
        out.append((black, white) if i % 2 == 0 else (white, black))
    return out


def build_flow(
    base: BaseDensity,
    *,
    n_layers: int,
    kind: str = "affine",
    hidden: tuple[int, ...] = (64,),
    activation: str = "tanh",
    weight_norm: bool = False,
    mixture_size: int = 4,
    masks: str | list = "alternating",
    lattice_shape: tuple[int, int] | None = None,
    global_scale: bool = False,
    rng: np.random.Generator | None = None,
    require_full_coverage: bool = True,
) -> FlowModel:
    """Construct a flow initialized to the identity map.

    Conditioner final layers start at zero, so affine layers begin with
    sigma = 1, mu = 0 and mixture layers begin as the identity transform.
    """
    rng = rng or np.random.default_rng(0)
    d = base.dim
    if isinstance(masks, str):
        if masks == "alternating":
            mask_list = alternating_masks(d, n_layers)
        elif masks == "checkerboard":
            if lattice_shape is None:
                raise ConfigError("checkerboard masks need lattice_shape")
            if lattice_shape[0] * lattice_shape[1] != d:
                raise ConfigError("lattice_shape does not match dimension")
            mask_list = checkerboard_masks(lattice_shape, n_layers)
        else:
            raise ConfigError(f"unknown mask scheme {masks!r}")
    else:
        mask_list = masks
        if len(mask_list) != n_layers:
            raise ConfigError("mask list length != n_layers")

    layers: list[CouplingLayer] = []
    chunks: list[np.ndarray] = []
    offset = 0
    covered = np.zeros(d, dtype=bool)
    for trans, cond in mask_list:
        k = len(trans)
        out_w = 2 * k if kind == "affine" else 3 * mixture_size * k
        spec = MlpSpec((len(cond), *hidden, out_w), activation, weight_norm)
        layers.append(CouplingLayer(kind, trans, cond, spec, offset,
                                    mixture_size if kind == "logistic_mixture" else 0))
        chunks.append(mlp_init(spec, rng, zero_last=True))
        offset += spec.n_params
        covered[np.asarray(trans)] = True
    if require_full_coverage and not covered.all():
        raise ConfigError("mask stack leaves some coordinates untransformed")
    if global_scale:
        layers.append(CouplingLayer("global_scale", np.arange(d), np.array([], dtype=np.intp),
                                    None, offset))
        chunks.append(np.array([1.0]))
    params = np.concatenate(chunks) if chunks else np.zeros(0)
    return FlowModel(layers, base, params)


# ---------------------------------------------------------------------------
# logistic-mixture kernel
# ---------------------------------------------------------------------------


def _lse(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=-1)
    return m + np.log(np.exp(a - m[..., None]).sum(axis=-1))


class _MixtureParams:
    """Per-coordinate mixture parameters unpacked from a conditioner output."""

    __slots__ = ("K", "lw", "w", "locs", "zc", "zmask", "s")

    def __init__(self, h: np.ndarray, k: int, K: int):
        a = h.reshape(h.shape[0], k, 3 * K)
        logits = a[..., :K]
        self.locs = a[..., K:2 * K]
        zeta = a[..., 2 * K:]
        self.K = K
        self.zc = np.clip(zeta, -SCALE_CLAMP, SCALE_CLAMP)
        self.zmask = (np.abs(zeta) < SCALE_CLAMP).astype(np.float64)
        self.s = np.exp(self.zc)
        self.lw = logits - _lse(logits)[..., None]
        self.w = np.exp(self.lw)

    def tau(self, x: np.ndarray) -> np.ndarray:
        """Transform values only (used by the bisection loop)."""
        if self.K == 1:
            return (x - self.locs[..., 0]) / self.s[..., 0]
        z = (x[..., None] - self.locs) / self.s
        logF = _lse(self.lw - np.logaddexp(0.0, -z))
        log1mF = _lse(self.lw - np.logaddexp(0.0, z))
        return logF - log1mF


class MixtureKernel:
    """Transform values and derivatives at a point, with lazy extras.

    Derivatives with respect to the conditioner output are laid out as
    (N, k, 3K) in the same [logits | locations | log-scales] order as the
    conditioner emits them.
    """

    def __init__(self, p: _MixtureParams, x: np.ndarray):
        self.p = p
        self.x = x
        if p.K == 1:
            z = (x - p.locs[..., 0]) / p.s[..., 0]
            self.z = z
            self.tau = z
            self.logtp = -p.zc[..., 0]
            self.tp = np.exp(self.logtp)
            self._simple = True
        else:
            self._simple = False
            z = (x[..., None] - p.locs) / p.s
            self.z = z
            self.ls = -np.logaddexp(0.0, -z)          # log sigmoid(z)
            self.lms = -np.logaddexp(0.0, z)          # log sigmoid(-z)
            self.lsp = self.ls + self.lms             # log sigmoid'(z)
            self.logF = _lse(p.lw + self.ls)
            self.log1mF = _lse(p.lw + self.lms)
            self.denom = self.logF + self.log1mF
            self.logFp = _lse(p.lw - p.zc + self.lsp)
            self.tau = self.logF - self.log1mF
            self.logtp = self.logFp - self.denom
            self.tp = np.exp(self.logtp)
            n_sat = int((self.denom < -600.0).sum())
            if n_sat:
                SATURATION_EVENTS.add(n_sat)
        self._dlogtp_dx = None
        self._dtau_da = None
        self._dlogtp_da = None

    @property
    def dlogtp_dx(self) -> np.ndarray:
        if self._dlogtp_dx is None:
            if self._simple:
                self._dlogtp_dx = np.zeros_like(self.x)
            else:
                p = self.p
                sig = np.exp(self.ls)
                one_m2s = 1.0 - 2.0 * sig
                b = np.exp(p.lw - 2.0 * p.zc + self.lsp - self.logFp[..., None])
                self._dlogtp_dx = ((b * one_m2s).sum(-1)
                                   - np.exp(self.logFp - self.logF)
                                   + np.exp(self.logFp - self.log1mF))
        return self._dlogtp_dx

    def _compute_da(self):
        p = self.p
        N, k = self.x.shape
        K = p.K
        dtau = np.empty((N, k, 3 * K))
        dlog = np.empty((N, k, 3 * K))
        if self._simple:
            dtau[..., 0] = 0.0                                   # logit
            dtau[..., 1] = -1.0 / p.s[..., 0]                    # location
            dtau[..., 2] = -self.z * p.zmask[..., 0]             # log-scale
            dlog[..., 0] = 0.0
            dlog[..., 1] = 0.0
            dlog[..., 2] = -p.zmask[..., 0]
        else:
            sig = np.exp(self.ls)
            one_m2s = 1.0 - 2.0 * sig
            denom = self.denom[..., None]
            A = np.exp(p.lw - p.zc + self.lsp - denom)           # (w/s) sig' / (F (1-F))
            B = np.exp(p.lw + self.lsp - denom)                  # w sig' / (F (1-F))
            b = np.exp(p.lw - 2.0 * p.zc + self.lsp - self.logFp[..., None])
            c = np.exp(p.lw - p.zc + self.lsp - self.logFp[..., None])
            r_F = np.exp(p.lw - p.zc + self.lsp - self.logF[..., None])
            r_1mF = np.exp(p.lw - p.zc + self.lsp - self.log1mF[..., None])
            t_F = np.exp(p.lw + self.lsp - self.logF[..., None])
            t_1mF = np.exp(p.lw + self.lsp - self.log1mF[..., None])
            dtau[..., :K] = (np.exp(p.lw + self.ls - self.logF[..., None])
                             - np.exp(p.lw + self.lms - self.log1mF[..., None]))
            dtau[..., K:2 * K] = -A
            dtau[..., 2 * K:] = -self.z * B * p.zmask
            dlog[..., :K] = (c + p.w
                             - np.exp(p.lw + self.ls - self.logF[..., None])
                             - np.exp(p.lw + self.lms - self.log1mF[..., None]))
            dlog[..., K:2 * K] = -one_m2s * b + r_F - r_1mF
            dlog[..., 2 * K:] = (-c * (1.0 + self.z * one_m2s)
                                 + self.z * (t_F - t_1mF)) * p.zmask
        self._dtau_da = dtau
        self._dlogtp_da = dlog

    @property
    def dtau_da(self) -> np.ndarray:
        if self._dtau_da is None:
            self._compute_da()
        return self._dtau_da

    @property
    def dlogtp_da(self) -> np.ndarray:
        if self._dlogtp_da is None:
            self._compute_da()
        return self._dlogtp_da


def _bisect_monotone(p: _MixtureParams, y: np.ndarray, tol: float) -> np.ndarray:
    """Solve tau(x) = y per coordinate by bracketed bisection."""
    if tol <= 0:
        raise UsageError("bisection tolerance must be positive")
    lo = p.locs.min(axis=-1) - 10.0 * p.s.max(axis=-1)
    hi = p.locs.max(axis=-1) + 10.0 * p.s.max(axis=-1)
    width = hi - lo
    f_lo = p.tau(lo)
    f_hi = p.tau(hi)
    BISECTION_EVALS.add(2)
    for _ in range(_MAX_BRACKET_DOUBLINGS):
        need_lo = f_lo > y
        need_hi = f_hi < y
        if not (need_lo.any() or need_hi.any()):
            break
        lo = np.where(need_lo, lo - width, lo)
        hi = np.where(need_hi, hi + width, hi)
        width = hi - lo
        if need_lo.any():
            f_lo = p.tau(lo)
            BISECTION_EVALS.add(1)
        if need_hi.any():
            f_hi = p.tau(hi)
            BISECTION_EVALS.add(1)
    else:
        bad = np.argwhere((f_lo > y) | (f_hi < y))[0]
        raise InversionError(
            f"bracket expansion failed at sample {bad[0]}, coordinate {bad[1]}")

    mid = 0.5 * (lo + hi)
    for _ in range(_MAX_BISECT_ITERS):
        f_mid = p.tau(mid)
        BISECTION_EVALS.add(1)
        resid = f_mid - y
        if np.all(np.abs(resid) <= tol):
            return mid
        below = resid < 0.0
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        mid = 0.5 * (lo + hi)
    f_mid = p.tau(mid)
    BISECTION_EVALS.add(1)
    resid = np.abs(f_mid - y)
    if np.all(resid <= tol):
        return mid
    bad = np.argwhere(resid > tol)[0]
    raise InversionError(
        f"bisection stalled above tol at sample {bad[0]}, coordinate {bad[1]}")


# ---------------------------------------------------------------------------
# coupling records
# ---------------------------------------------------------------------------


class AffineCoupleRecord(Record):
    __slots__ = ("out_ids", "in_ids", "sigma", "mask", "xt")

    def __init__(self, xt_id, h_id, y_id, ld_id, sigma, mask, xt):
        self.in_ids = (xt_id, h_id)
        self.out_ids = (y_id, ld_id)
        self.sigma = sigma
        self.mask = mask
        self.xt = xt

    def backward(self, state, cts):
        ct_y, ct_ld = cts
        k = self.sigma.shape[1]
        n = self.sigma.shape[0]
        ct_h = np.zeros((n, 2 * k))
        if ct_y is not None:
            state.add(self.in_ids[0], ct_y * self.sigma)
            ct_h[:, :k] = ct_y * self.xt * self.sigma * self.mask
            ct_h[:, k:] = ct_y
        if ct_ld is not None:
            ct_h[:, :k] += ct_ld[:, None] * self.mask
        state.add(self.in_ids[1], ct_h)


class AffineInverseRecord(Record):
    __slots__ = ("out_ids", "in_ids", "sigma", "mask", "xt")

    def __init__(self, yt_id, h_id, x_id, ld_id, sigma, mask, xt):
        self.in_ids = (yt_id, h_id)
        self.out_ids = (x_id, ld_id)
        self.sigma = sigma
        self.mask = mask
        self.xt = xt  # output values (y - mu) / sigma

    def backward(self, state, cts):
        ct_x, ct_ld = cts
        k = self.sigma.shape[1]
        n = self.sigma.shape[0]
        ct_h = np.zeros((n, 2 * k))
        if ct_x is not None:
            state.add(self.in_ids[0], ct_x / self.sigma)
            ct_h[:, :k] = -ct_x * self.xt * self.mask
            ct_h[:, k:] = -ct_x / self.sigma
        if ct_ld is not None:
            ct_h[:, :k] -= ct_ld[:, None] * self.mask
        state.add(self.in_ids[1], ct_h)


class MixtureCoupleRecord(Record):
    __slots__ = ("out_ids", "in_ids", "kernel")

    def __init__(self, xt_id, h_id, y_id, ld_id, kernel):
        self.in_ids = (xt_id, h_id)
        self.out_ids = (y_id, ld_id)
        self.kernel = kernel

    def backward(self, state, cts):
        ct_y, ct_ld = cts
        ker = self.kernel
        n, k = ker.x.shape
        ct_x = np.zeros((n, k))
        ct_a = np.zeros_like(ker.dtau_da)
        if ct_y is not None:
            ct_x += ct_y * ker.tp
            ct_a += ct_y[:, :, None] * ker.dtau_da
        if ct_ld is not None:
            ct_x += ct_ld[:, None] * ker.dlogtp_dx
            ct_a += ct_ld[:, None, None] * ker.dlogtp_da
        state.add(self.in_ids[0], ct_x)
        state.add(self.in_ids[1], ct_a.reshape(n, -1))


class MixtureInverseRecord(Record):
    """Inverse mixture transform; partials come from the inverse function
    theorem at the bisection solution, never from the iteration itself."""

    __slots__ = ("out_ids", "in_ids", "kernel")

    def __init__(self, y_id, h_id, x_id, ld_id, kernel):
        self.in_ids = (y_id, h_id)
        self.out_ids = (x_id, ld_id)
        self.kernel = kernel  # kernel evaluated at the solution x

    def backward(self, state, cts):
        ct_x, ct_ld = cts
        ker = self.kernel
        n, k = ker.x.shape
        ct_y = np.zeros((n, k))
        ct_a = np.zeros_like(ker.dtau_da)
        inv_tp = 1.0 / ker.tp
        if ct_x is not None:
            ct_y += ct_x * inv_tp
            ct_a -= (ct_x * inv_tp)[:, :, None] * ker.dtau_da
        if ct_ld is not None:
            ratio = ker.dlogtp_dx * inv_tp
            ct_y -= ct_ld[:, None] * ratio
            ct_a += ct_ld[:, None, None] * (ratio[:, :, None] * ker.dtau_da - ker.dlogtp_da)
        state.add(self.in_ids[0], ct_y)
        state.add(self.in_ids[1], ct_a.reshape(n, -1))


class IterEvalRecord(Record):
    """One recorded bisection iterate for the unrolled-autodiff baseline.

    The iterate's value feeds only bracket comparisons, which carry no
    derivative, so backward is a no-op by construction.
    """

    __slots__ = ("out_ids", "in_ids", "value")

    def __init__(self, h_id, out_id, value):
        self.in_ids = (h_id,)
        self.out_ids = (out_id,)
        self.value = value

    def backward(self, state, cts):
        return


class MixtureInverseUnrolledRecord(Record):
    """Unrolled-bisection inverse: the solution is reached through
    comparisons only, so it behaves as a constant under differentiation and
    only the log-determinant keeps its direct parameter dependence."""

    __slots__ = ("out_ids", "in_ids", "kernel")

    def __init__(self, y_id, h_id, x_id, ld_id, kernel):
        self.in_ids = (y_id, h_id)
        self.out_ids = (x_id, ld_id)
        self.kernel = kernel

    def backward(self, state, cts):
        _, ct_ld = cts
        if ct_ld is None:
            return
        ker = self.kernel
        n = ker.x.shape[0]
        ct_a = -ct_ld[:, None, None] * ker.dlogtp_da
        state.add(self.in_ids[1], ct_a.reshape(n, -1))


class GlobalScaleRecord(Record):
    __slots__ = ("out_ids", "in_ids", "s", "x", "d", "slot", "inverse")

    def __init__(self, x_id, y_id, ld_id, s, x, d, slot, inverse=False):
        self.in_ids = (x_id,)
        self.out_ids = (y_id, ld_id)
        self.s = s
        self.x = x  # input values
        self.d = d
        self.slot = slot
        self.inverse = inverse

    def backward(self, state, cts):
        ct_y, ct_ld = cts
        s, d = self.s, self.d
        n = self.x.shape[0]
        ds = np.zeros(n)
        if ct_y is not None:
            if self.inverse:
                state.add(self.in_ids[0], ct_y / s)
                ds += (ct_y * self.x).sum(axis=1) * (-1.0 / (s * s))
            else:
                state.add(self.in_ids[0], ct_y * s)
                ds += (ct_y * self.x).sum(axis=1)
        if ct_ld is not None:
            ds += ct_ld * ((-d if self.inverse else d) / s)
        if state.param_grad is not None:
            state.param_grad[self.slot] += ds.sum()
        if state.sqnorm is not None:
            state.sqnorm += ds * ds


# ---------------------------------------------------------------------------
# layer application
# ---------------------------------------------------------------------------


@dataclass
class LayerApp:
    """Everything one layer application leaves behind (values plus tape ids)."""

    layer: CouplingLayer
    y: np.ndarray
    logdet: np.ndarray
    y_entry: int | None = None
    logdet_entry: int | None = None
    h_entry: int | None = None
    xc_entry: int | None = None
    cond_start: int | None = None
    cond_end: int | None = None
    cache: dict = field(default_factory=dict)
    tape: Tape | None = None

    def cond_vjp(self, seed_h: np.ndarray) -> np.ndarray:
        """Pull a row vector on the conditioner output back to its input."""
        if self.tape is None:
            raise UsageError("layer was applied without a tape")
        res = self.tape.backward(
            {self.h_entry: seed_h},
            down_to=self.cond_start,
            want_param_grad=False,
            want_entries=(self.xc_entry,),
        )
        return res.entry_grads[self.xc_entry]


def _check_finite(arr: np.ndarray, layer_idx: int, what: str):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"layer {layer_idx}: non-finite {what}")


def _split_inputs(layer, x, tape, x_entry):
    xc = x[:, layer.cond]
    xt = x[:, layer.trans]
    xc_id = xt_id = None
    if tape is not None:
        xt_id = tape.add_value(xt)
        tape.add_record(GatherRecord(x_entry, xt_id, layer.trans, x.shape[1]))
        xc_id = tape.add_value(xc)
        tape.add_record(GatherRecord(x_entry, xc_id, layer.cond, x.shape[1]))
    return xc, xt, xc_id, xt_id


def _assemble(layer, yt, xc, x, tape, yt_id, xc_id):
    y = np.empty_like(x)
    y[:, layer.trans] = yt
    y[:, layer.cond] = xc
    y_id = None
    if tape is not None:
        y_id = tape.add_value(y)
        tape.add_record(ScatterRecord(yt_id, xc_id, y_id, layer.trans, layer.cond))
    return y, y_id


def apply_layer_forward(layer: CouplingLayer, params: np.ndarray, x: np.ndarray,
                        tape: Tape | None, x_entry: int | None,
                        layer_idx: int = 0) -> LayerApp:
    n = x.shape[0]
    if layer.kind == "global_scale":
        s = params[layer.offset]
        if s == 0.0:
            raise NumericsError(f"layer {layer_idx}: zero global scale")
        y = s * x
        logdet = np.full(n, layer.trans.size * np.log(abs(s)))
        y_id = ld_id = None
        if tape is not None:
            y_id = tape.add_value(y)
            ld_id = tape.add_value(logdet)
            tape.add_record(GlobalScaleRecord(x_entry, y_id, ld_id, s, x,
                                              layer.trans.size, layer.offset))
        return LayerApp(layer, y, logdet, y_id, ld_id, cache={"s": s}, tape=tape)

    xc, xt, xc_id, xt_id = _split_inputs(layer, x, tape, x_entry)
    cond_start = len(tape.records) if tape is not None else None
    h, h_id = mlp_apply(layer.mlp, params, xc, tape, layer.offset, xc_id)
    cond_end = len(tape.records) if tape is not None else None
    k = layer.k

    if layer.kind == "affine":
        s_pre = h[:, :k]
        mu = h[:, k:]
        c = np.clip(s_pre, -SCALE_CLAMP, SCALE_CLAMP)
        mask = (np.abs(s_pre) < SCALE_CLAMP).astype(np.float64)
        sigma = np.exp(c)
        yt = sigma * xt + mu
        logdet = c.sum(axis=1)
        cache = {"sigma": sigma, "mask": mask, "xt": xt}
        rec_cls = AffineCoupleRecord
        rec_args = (sigma, mask, xt)
    else:
        p = _MixtureParams(h, k, layer.mixture_size)
        kernel = MixtureKernel(p, xt)
        yt = kernel.tau
        logdet = kernel.logtp.sum(axis=1)
        cache = {"kernel": kernel}
        rec_cls = MixtureCoupleRecord
        rec_args = (kernel,)

    _check_finite(yt, layer_idx, "transform output")
    _check_finite(logdet, layer_idx, "log-determinant")
    yt_id = ld_id = None
    if tape is not None:
        yt_id = tape.add_value(yt)
        ld_id = tape.add_value(logdet)
        tape.add_record(rec_cls(xt_id, h_id, yt_id, ld_id, *rec_args))
    y, y_id = _assemble(layer, yt, xc, x, tape, yt_id, xc_id)
    return LayerApp(layer, y, logdet, y_id, ld_id, h_id, xc_id,
                    cond_start, cond_end, cache, tape)


def apply_layer_inverse(layer: CouplingLayer, params: np.ndarray, y: np.ndarray,
                        tape: Tape | None, y_entry: int | None,
                        layer_idx: int = 0, tol: float = DEFAULT_BISECTION_TOL,
                        unrolled: bool = False) -> LayerApp:
    """Apply the layer's inverse; logdet is that of the inverse map."""
    n = y.shape[0]
    if layer.kind == "global_scale":
        s = params[layer.offset]
        if s == 0.0:
            raise NumericsError(f"layer {layer_idx}: zero global scale")
        x = y / s
        logdet = np.full(n, -layer.trans.size * np.log(abs(s)))
        x_id = ld_id = None
        if tape is not None:
            x_id = tape.add_value(x)
            ld_id = tape.add_value(logdet)
            tape.add_record(GlobalScaleRecord(y_entry, x_id, ld_id, s, y,
                                              layer.trans.size, layer.offset, inverse=True))
        return LayerApp(layer, x, logdet, x_id, ld_id, cache={"s": s}, tape=tape)

    yc, yt, yc_id, yt_id = _split_inputs(layer, y, tape, y_entry)
    cond_start = len(tape.records) if tape is not None else None
    h, h_id = mlp_apply(layer.mlp, params, yc, tape, layer.offset, yc_id)
    cond_end = len(tape.records) if tape is not None else None
    k = layer.k

    if layer.kind == "affine":
        s_pre = h[:, :k]
        mu = h[:, k:]
        c = np.clip(s_pre, -SCALE_CLAMP, SCALE_CLAMP)
        mask = (np.abs(s_pre) < SCALE_CLAMP).astype(np.float64)
        sigma = np.exp(c)
        xt = (yt - mu) / sigma
        logdet = -c.sum(axis=1)
        cache = {"sigma": sigma, "mask": mask, "xt": xt}
        rec = AffineInverseRecord
        rec_args = (sigma, mask, xt)
    else:
        p = _MixtureParams(h, k, layer.mixture_size)
        if unrolled and tape is not None:
            xt = _bisect_unrolled(p, yt, tol, tape, h_id)
        else:
            xt = _bisect_monotone(p, yt, tol)
        kernel = MixtureKernel(p, xt)
        logdet = -kernel.logtp.sum(axis=1)
        cache = {"kernel": kernel}
        rec = MixtureInverseUnrolledRecord if unrolled else MixtureInverseRecord
        rec_args = (kernel,)

    _check_finite(xt, layer_idx, "inverse output")
    _check_finite(logdet, layer_idx, "log-determinant")
    xt_id = ld_id = None
    if tape is not None:
        xt_id = tape.add_value(xt)
        ld_id = tape.add_value(logdet)
        tape.add_record(rec(yt_id, h_id, xt_id, ld_id, *rec_args))
    x, x_id = _assemble(layer, xt, yc, y, tape, xt_id, yc_id)
    return LayerApp(layer, x, logdet, x_id, ld_id, h_id, yc_id,
                    cond_start, cond_end, cache, tape)


def _bisect_unrolled(p, y, tol, tape, h_id):
    """Bisection with every iterate recorded, mimicking naive autodiff
    through the root finder (runtime/memory baseline; gradients through the
    solution vanish because iterates feed only comparisons)."""
    lo = p.locs.min(axis=-1) - 10.0 * p.s.max(axis=-1)
    hi = p.locs.max(axis=-1) + 10.0 * p.s.max(axis=-1)
    width = hi - lo
    f_lo, f_hi = p.tau(lo), p.tau(hi)
    BISECTION_EVALS.add(2)
    for _ in range(_MAX_BRACKET_DOUBLINGS):
        need_lo = f_lo > y
        need_hi = f_hi < y
        if not (need_lo.any() or need_hi.any()):
            break
        lo = np.where(need_lo, lo - width, lo)
        hi = np.where(need_hi, hi + width, hi)
        width = hi - lo
        f_lo, f_hi = p.tau(lo), p.tau(hi)
        BISECTION_EVALS.add(2)
    else:
        raise InversionError("bracket expansion failed in unrolled bisection")
    mid = 0.5 * (lo + hi)
    for _ in range(_MAX_BISECT_ITERS):
        f_mid = p.tau(mid)
        BISECTION_EVALS.add(1)
        eid = tape.add_value(f_mid)
        tape.add_record(IterEvalRecord(h_id, eid, f_mid))
        resid = f_mid - y
        if np.all(np.abs(resid) <= tol):
            return mid
        below = resid < 0.0
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        mid = 0.5 * (lo + hi)
    raise InversionError("unrolled bisection stalled above tol")


# ---------------------------------------------------------------------------
# per-layer public operations
# ---------------------------------------------------------------------------


def affine_forward(layer: CouplingLayer, params: np.ndarray, x,
                   tape: Tape | None = None):
    """Returns (x_next, logdet, sigma) for an affine layer."""
    if layer.kind != "affine":
        raise UsageError("affine_forward called on a non-affine layer")
    xb, was_1d = _batchify(x)
    entry = tape.leaf(xb) if tape is not None else None
    app = apply_layer_forward(layer, params, xb, tape, entry)
    if tape is not None:
        tape.output_id = app.y_entry
    sigma = app.cache["sigma"]
    if was_1d:
        return app.y[0], app.logdet[0], sigma[0]
    return app.y, app.logdet, sigma


def affine_inverse(layer: CouplingLayer, params: np.ndarray, y):
    """Returns (x, logdet_inv) for an affine layer."""
    if layer.kind != "affine":
        raise UsageError("affine_inverse called on a non-affine layer")
    yb, was_1d = _batchify(y)
    app = apply_layer_inverse(layer, params, yb, None, None)
    if was_1d:
        return app.y[0], app.logdet[0]
    return app.y, app.logdet


def logistic_mixture_forward(layer: CouplingLayer, params: np.ndarray, x,
                             tape: Tape | None = None):
    """Returns (x_next, logdet, diag_jacobian) for a mixture layer."""
    if layer.kind != "logistic_mixture":
        raise UsageError("logistic_mixture_forward needs a mixture layer")
    xb, was_1d = _batchify(x)
    entry = tape.leaf(xb) if tape is not None else None
    app = apply_layer_forward(layer, params, xb, tape, entry)
    if tape is not None:
        tape.output_id = app.y_entry
    diag = app.cache["kernel"].tp
    if was_1d:
        return app.y[0], app.logdet[0], diag[0]
    return app.y, app.logdet, diag


def logistic_mixture_inverse(layer: CouplingLayer, params: np.ndarray, y,
                             tol: float = DEFAULT_BISECTION_TOL):
    """Invert a mixture layer by per-coordinate bisection."""
    if layer.kind != "logistic_mixture":
        raise UsageError("logistic_mixture_inverse needs a mixture layer")
    yb, was_1d = _batchify(y)
    app = apply_layer_inverse(layer, params, yb, None, None, tol=tol)
    return app.y[0] if was_1d else app.y


def _batchify(x):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


# ---------------------------------------------------------------------------
# full-flow passes
# ---------------------------------------------------------------------------


@dataclass
class FlowPassResult:
    x: np.ndarray
    log_q: np.ndarray
    apps: list[LayerApp]
    leaf_entry: int | None = None
    out_entry: int | None = None
    logq0_entry: int | None = None


def forward_pass(model: FlowModel, x0, tape: Tape | None = None) -> FlowPassResult:
    x, was_1d = _batchify(x0)
    if was_1d:
        raise UsageError("forward_pass expects a batch (N, d)")
    if x.shape[1] != model.dim:
        raise ConfigError(f"expected dimension {model.dim}, got {x.shape[1]}")
    entry = tape.leaf(x) if tape is not None else None
    log_q = model.base.log_density(x).copy()
    apps = []
    for i, layer in enumerate(model.layers):
        app = apply_layer_forward(layer, model.params, x, tape, entry, i)
        x, entry = app.y, app.y_entry
        log_q -= app.logdet
        apps.append(app)
    return FlowPassResult(x, log_q, apps, leaf_entry=tape.input_id if tape else None,
                          out_entry=entry)


def inverse_pass(model: FlowModel, x, tape: Tape | None = None,
                 tol: float = DEFAULT_BISECTION_TOL, *, record_base: bool = True,
                 unrolled: bool = False) -> FlowPassResult:
    y, was_1d = _batchify(x)
    if was_1d:
        raise UsageError("inverse_pass expects a batch (N, d)")
    if y.shape[1] != model.dim:
        raise ConfigError(f"expected dimension {model.dim}, got {y.shape[1]}")
    entry = tape.leaf(y) if tape is not None else None
    apps = []
    logdet_sum = np.zeros(y.shape[0])
    for i, layer in zip(reversed(range(len(model.layers))), reversed(model.layers)):
        app = apply_layer_inverse(layer, model.params, y, tape, entry, i,
                                  tol=tol, unrolled=unrolled)
        y, entry = app.y, app.y_entry
        logdet_sum += app.logdet
        apps.append(app)
    lq0, grad0 = model.base.log_density_and_grad(y)
    logq0_entry = None
    if tape is not None and record_base:
        logq0_entry = tape.add_value(lq0)
        tape.add_record(BaseLogDensityRecord(entry, logq0_entry, grad0))
    return FlowPassResult(y, lq0 + logdet_sum, apps,
                          leaf_entry=tape.input_id if tape else None,
                          out_entry=entry, logq0_entry=logq0_entry)


def flow_forward(model: FlowModel, x0, tape: Tape | None = None):
    """Push base samples through the flow: returns (x, log_q per sample)."""
    res = forward_pass(model, x0, tape)
    if tape is not None:
        tape.output_id = res.out_entry
    return res.x, res.log_q


def flow_inverse_logq(model: FlowModel, x, tol: float = DEFAULT_BISECTION_TOL,
                      tape: Tape | None = None):
    """Pull points back to base space: returns (x0, log_q per sample)."""
    res = inverse_pass(model, x, tape, tol)
    if tape is not None:
        tape.output_id = res.out_entry
    return res.x, res.log_q


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def architecture_descriptor(model: FlowModel) -> dict:
    base = model.base
    layers = []
    for l in model.layers:
        entry = {"kind": l.kind, "trans": l.trans.tolist()}
        if l.kind != "global_scale":
            entry["mixture_size"] = l.mixture_size
            entry["mlp"] = {
                "widths": list(l.mlp.widths),
                "activation": l.mlp.activation,
                "weight_norm": l.mlp.weight_norm,
            }
        layers.append(entry)
    return {
        "dim": model.dim,
        "base": {"kind": base.kind, "dim": base.dim, "a": base.a, "b": base.b},
        "layers": layers,
    }


def model_from_descriptor(arch: dict, params: np.ndarray) -> FlowModel:
    base = BaseDensity(arch["base"]["kind"], arch["base"]["dim"],
                       arch["base"]["a"], arch["base"]["b"])
    d = arch["dim"]
    layers = []
    offset = 0
    for entry in arch["layers"]:
        trans = np.asarray(entry["trans"], dtype=np.intp)
        if entry["kind"] == "global_scale":
            layer = CouplingLayer("global_scale", np.arange(d),
                                  np.array([], dtype=np.intp), None, offset)
        else:
            cond = np.setdiff1d(np.arange(d), trans)
            spec = MlpSpec(tuple(entry["mlp"]["widths"]), entry["mlp"]["activation"],
                           entry["mlp"]["weight_norm"])
            layer = CouplingLayer(entry["kind"], trans, cond, spec, offset,
                                  entry.get("mixture_size", 0))
        layers.append(layer)
        offset += layer.n_params
    return FlowModel(layers, base, np.asarray(params, dtype=np.float64))


def save_checkpoint(model: FlowModel, path: str) -> None:
    """Atomic write (temp file then rename) of a self-describing document."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": architecture_descriptor(model),
        "params": model.params.tolist(),
    }
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> FlowModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('format_version')}")
    return model_from_descriptor(doc["architecture"], np.asarray(doc["params"]))
