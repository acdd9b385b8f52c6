"""Minimal reverse-mode differentiation tape for coupling-flow conditioners.

Values on the tape are float64 arrays with a leading batch axis, so one tape
carries a whole batch through the flow.  Records are appended in evaluation
order (topological by construction) and each knows how to push a cotangent
from its outputs to its inputs and, for parameter-carrying records, into the
flat parameter vector.

The tape is single-owner and single-pass: backward never mutates the cached
forward values, so repeated backward calls over an unchanged tape give
bit-identical gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericsError, OracleError, UsageError


def as_batch(x) -> tuple[np.ndarray, bool]:
    """Promote a 1-D vector to a batch of one; report whether it was 1-D."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise ConfigError(f"expected 1-D or 2-D array, got shape {arr.shape}")
    return arr, False


@dataclass
class BackwardResult:
    param_grad: np.ndarray | None
    entry_grads: dict[int, np.ndarray]
    per_sample_sqnorm: np.ndarray | None


class Record:
    """One primitive operation; subclasses hold their forward caches."""

    __slots__ = ("out_ids", "in_ids")

    def backward(self, state: "_BackwardState", cts: list[np.ndarray | None]) -> None:
        raise NotImplementedError


class _BackwardState:
    __slots__ = ("cts", "param_grad", "sqnorm", "params")

    def __init__(self, n_entries, params, want_params, sqnorm_n):
        self.cts: list[np.ndarray | None] = [None] * n_entries
        self.params = params
        self.param_grad = np.zeros_like(params) if want_params else None
        self.sqnorm = np.zeros(sqnorm_n) if sqnorm_n is not None else None

    def add(self, entry: int, ct: np.ndarray) -> None:
        # First contribution is copied: it may be a view or a caller's seed,
        # and later contributions accumulate in place.
        cur = self.cts[entry]
        if cur is None:
            self.cts[entry] = ct.copy()
        else:
            cur += ct


class Tape:
    """Append-only record list over a flat parameter vector."""

    def __init__(self, params: np.ndarray):
        self.params = np.asarray(params, dtype=np.float64)
        self.records: list[Record] = []
        self.values: list[np.ndarray] = []
        self.input_id: int | None = None
        self.output_id: int | None = None

    @property
    def batch_size(self) -> int:
        if not self.values:
            raise UsageError("tape has no values yet")
        return self.values[0].shape[0]

    def add_value(self, arr: np.ndarray) -> int:
        self.values.append(arr)
        return len(self.values) - 1

    def leaf(self, x: np.ndarray) -> int:
        eid = self.add_value(np.asarray(x, dtype=np.float64))
        if self.input_id is None:
            self.input_id = eid
        return eid

    def add_record(self, rec: Record) -> None:
        self.records.append(rec)

    def backward(
        self,
        seeds: dict[int, np.ndarray],
        *,
        down_to: int = 0,
        want_param_grad: bool = True,
        want_entries: tuple[int, ...] = (),
        per_sample_sqnorm: bool = False,
    ) -> BackwardResult:
        """Propagate output cotangents back through records[down_to:].

        `seeds` maps entry id to its cotangent ((N, k) for vector entries,
        (N,) for per-sample scalar entries).  Seed arrays are not mutated.
        """
        sqn = None
        if per_sample_sqnorm:
            sqn = next(iter(seeds.values())).shape[0] if seeds else 0
        state = _BackwardState(len(self.values), self.params, want_param_grad, sqn)
        for eid, seed in seeds.items():
            state.add(eid, np.asarray(seed, dtype=np.float64))
        for rec in reversed(self.records[down_to:]):
            cts = [state.cts[o] for o in rec.out_ids]
            if all(c is None for c in cts):
                continue
            rec.backward(state, cts)
        entry_grads = {}
        for eid in want_entries:
            g = state.cts[eid]
            entry_grads[eid] = g if g is not None else np.zeros_like(self.values[eid])
        return BackwardResult(state.param_grad, entry_grads, state.sqnorm)


# ---------------------------------------------------------------------------
# primitive records
# ---------------------------------------------------------------------------


class LinearRecord(Record):
    """y = x @ W.T + b, optionally with weight normalization.

    With weight normalization the stored parameters are a direction matrix v
    and per-row gains g, and W = diag(g / ||v_r||) v.  The per-sample squared
    gradient norm has a closed form in both cases because the per-sample
    weight cotangent is rank one.
    """

    __slots__ = ("out_ids", "in_ids", "x", "W", "slot_w", "slot_b", "slot_g",
                 "shape", "weight_norm", "vhat", "vnorm", "g")

    def __init__(self, in_id, out_id, x, W, shape, slot_w, slot_b,
                 weight_norm=False, slot_g=None, vhat=None, vnorm=None, g=None):
        self.in_ids = (in_id,)
        self.out_ids = (out_id,)
        self.x = x
        self.W = W
        self.shape = shape
        self.slot_w = slot_w
        self.slot_b = slot_b
        self.weight_norm = weight_norm
        self.slot_g = slot_g
        self.vhat = vhat
        self.vnorm = vnorm
        self.g = g

    def backward(self, state, cts):
        (delta,) = cts
        state.add(self.in_ids[0], delta @ self.W)
        if state.param_grad is None and state.sqnorm is None:
            return
        x = self.x
        if state.param_grad is not None:
            pg = state.param_grad
            dW = delta.T @ x
            if self.weight_norm:
                proj = (dW * self.vhat).sum(axis=1)
                pg[self.slot_g] += proj
                dv = (self.g / self.vnorm)[:, None] * (dW - proj[:, None] * self.vhat)
                pg[self.slot_w] += dv.ravel()
            else:
                pg[self.slot_w] += dW.ravel()
            pg[self.slot_b] += delta.sum(axis=0)
        if state.sqnorm is not None:
            d2 = delta * delta
            if self.weight_norm:
                u = x @ self.vhat.T                      # (N, out): x . vhat_r
                scale2 = (self.g / self.vnorm) ** 2      # (out,)
                xsq = (x * x).sum(axis=1)[:, None]
                state.sqnorm += (d2 * (u * u + scale2 * (xsq - u * u) + 1.0)).sum(axis=1)
            else:
                xsq = (x * x).sum(axis=1)
                state.sqnorm += d2.sum(axis=1) * (xsq + 1.0)


class TanhRecord(Record):
    __slots__ = ("out_ids", "in_ids", "y")

    def __init__(self, in_id, out_id, y):
        self.in_ids = (in_id,)
        self.out_ids = (out_id,)
        self.y = y

    def backward(self, state, cts):
        (delta,) = cts
        state.add(self.in_ids[0], delta * (1.0 - self.y * self.y))


class ReluRecord(Record):
    __slots__ = ("out_ids", "in_ids", "mask")

    def __init__(self, in_id, out_id, mask):
        self.in_ids = (in_id,)
        self.out_ids = (out_id,)
        self.mask = mask

    def backward(self, state, cts):
        (delta,) = cts
        state.add(self.in_ids[0], delta * self.mask)


class GatherRecord(Record):
    """y = x[:, idx]; backward scatters into a zero cotangent for x."""

    __slots__ = ("out_ids", "in_ids", "idx", "in_width")

    def __init__(self, in_id, out_id, idx, in_width):
        self.in_ids = (in_id,)
        self.out_ids = (out_id,)
        self.idx = idx
        self.in_width = in_width

    def backward(self, state, cts):
        (delta,) = cts
        full = np.zeros((delta.shape[0], self.in_width))
        full[:, self.idx] = delta
        state.add(self.in_ids[0], full)


class ScatterRecord(Record):
    """Reassemble a full vector from trans/cond pieces."""

    __slots__ = ("out_ids", "in_ids", "trans", "cond")

    def __init__(self, trans_id, cond_id, out_id, trans, cond):
        self.in_ids = (trans_id, cond_id)
        self.out_ids = (out_id,)
        self.trans = trans
        self.cond = cond

    def backward(self, state, cts):
        (delta,) = cts
        state.add(self.in_ids[0], delta[:, self.trans])
        state.add(self.in_ids[1], delta[:, self.cond])


class BaseLogDensityRecord(Record):
    """Per-sample log density of the base distribution, as a tape entry."""

    __slots__ = ("out_ids", "in_ids", "grad")

    def __init__(self, in_id, out_id, grad):
        self.in_ids = (in_id,)
        self.out_ids = (out_id,)
        self.grad = grad  # (N, d) gradient of log density at the input values

    def backward(self, state, cts):
        (delta,) = cts
        state.add(self.in_ids[0], delta[:, None] * self.grad)


# ---------------------------------------------------------------------------
# MLP conditioner
# ---------------------------------------------------------------------------

_ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected network: widths[0] inputs, widths[-1] outputs.

    Hidden layers use `activation`; the final layer is linear.  With
    `weight_norm` every layer stores (v, g, b) instead of (W, b).
    """

    widths: tuple[int, ...]
    activation: str = "tanh"
    weight_norm: bool = False

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ConfigError("MlpSpec needs at least an input and an output width")
        if any(w <= 0 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        total = 0
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            total += fan_out * fan_in + fan_out          # W (or v) and b
            if self.weight_norm:
                total += fan_out                          # g
        return total

    def layer_slots(self, offset: int = 0):
        """Yield per-linear slot dicts with absolute slices into the params."""
        pos = offset
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            slots = {"w": slice(pos, pos + fan_out * fan_in), "shape": (fan_out, fan_in)}
            pos += fan_out * fan_in
            if self.weight_norm:
                slots["g"] = slice(pos, pos + fan_out)
                pos += fan_out
            slots["b"] = slice(pos, pos + fan_out)
            pos += fan_out
            yield slots


def mlp_init(spec: MlpSpec, rng: np.random.Generator, zero_last: bool = False) -> np.ndarray:
    """Sample initial parameters; optionally zero the final layer's output.

    Weight-normalized layers keep a random direction v with g = ||v_r|| so the
    effective matrix equals the sampled one; zeroing the last layer sets g = 0
    (v stays nonzero to keep the normalization well defined).
    """
    out = np.empty(spec.n_params)
    n_lin = len(spec.widths) - 1
    for i, slots in enumerate(spec.layer_slots()):
        fan_out, fan_in = slots["shape"]
        last = i == n_lin - 1
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        v = rng.normal(0.0, scale, size=(fan_out, fan_in))
        if spec.weight_norm:
            out[slots["w"]] = v.ravel()
            out[slots["g"]] = 0.0 if (last and zero_last) else np.linalg.norm(v, axis=1)
        else:
            out[slots["w"]] = 0.0 if (last and zero_last) else v.ravel()
        out[slots["b"]] = 0.0
    return out


def _apply_linear(params, slots, x, weight_norm):
    if weight_norm:
        v = params[slots["w"]].reshape(slots["shape"])
        vnorm = np.linalg.norm(v, axis=1)
        if np.any(vnorm == 0.0):
            raise NumericsError("weight-norm direction row has zero norm")
        vhat = v / vnorm[:, None]
        g = params[slots["g"]]
        W = g[:, None] * vhat
        extra = (vhat, vnorm, g)
    else:
        W = params[slots["w"]].reshape(slots["shape"])
        extra = (None, None, None)
    y = x @ W.T + params[slots["b"]]
    return y, W, extra


def mlp_apply(spec: MlpSpec, params: np.ndarray, x: np.ndarray,
              tape: Tape | None = None, offset: int = 0, in_entry: int | None = None):
    """Evaluate the MLP on a batch; record primitives when a tape is given.

    Returns (output, output_entry).  `in_entry` must name the tape entry that
    holds `x` when taping.
    """
    if x.shape[1] != spec.widths[0]:
        raise ConfigError(
            f"MLP input width {spec.widths[0]} but got {x.shape[1]} features")
    h = x
    eid = in_entry
    n_lin = len(spec.widths) - 1
    for i, slots in enumerate(spec.layer_slots(offset)):
        slots_abs = slots
        y, W, (vhat, vnorm, g) = _apply_linear(params, slots_abs, h, spec.weight_norm)
        if tape is not None:
            out_id = tape.add_value(y)
            tape.add_record(LinearRecord(
                eid, out_id, h, W, slots_abs["shape"], slots_abs["w"], slots_abs["b"],
                weight_norm=spec.weight_norm, slot_g=slots_abs.get("g"),
                vhat=vhat, vnorm=vnorm, g=g))
            eid = out_id
        h = y
        if i < n_lin - 1:
            if spec.activation == "tanh":
                a = np.tanh(h)
                if tape is not None:
                    aid = tape.add_value(a)
                    tape.add_record(TanhRecord(eid, aid, a))
                    eid = aid
            else:
                mask = (h > 0).astype(np.float64)
                a = h * mask
                if tape is not None:
                    aid = tape.add_value(a)
                    tape.add_record(ReluRecord(eid, aid, mask))
                    eid = aid
            h = a
    if not np.all(np.isfinite(h)):
        raise NumericsError("non-finite MLP output")
    return h, eid


def mlp_forward(spec: MlpSpec, params: np.ndarray, x, tape: Tape | None = None) -> np.ndarray:
    """Public MLP evaluation; with a tape, sets it up for tape_vjp."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape[0] != spec.n_params:
        raise ConfigError(
            f"spec wants {spec.n_params} parameters, got {params.shape[0]}")
    xb, was_1d = as_batch(x)
    in_entry = None
    if tape is not None:
        in_entry = tape.leaf(xb)
    y, out_entry = mlp_apply(spec, params, xb, tape, 0, in_entry)
    if tape is not None:
        tape.output_id = out_entry
    return y[0] if was_1d else y


def tape_vjp(tape: Tape, seed) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian product against the tape's designated output.

    Returns (param_grad, input_grad) for seed^T d(output)/d(params, input).
    """
    if not tape.records:
        raise UsageError("cannot run a VJP over an empty tape")
    if tape.output_id is None or tape.input_id is None:
        raise UsageError("tape has no designated output/input")
    seed_b, was_1d = as_batch(seed)
    out_val = tape.values[tape.output_id]
    if seed_b.shape[1] != out_val.shape[1]:
        raise UsageError(
            f"seed length {seed_b.shape[1]} != output length {out_val.shape[1]}")
    res = tape.backward({tape.output_id: seed_b}, want_entries=(tape.input_id,))
    input_grad = res.entry_grads[tape.input_id]
    if was_1d:
        input_grad = input_grad[0]
    return res.param_grad, input_grad


def finite_difference_gradient(f, params: np.ndarray, step: float) -> np.ndarray:
    """Central-difference gradient of a scalar function of the parameters."""
    if step <= 0:
        raise UsageError("finite-difference step must be positive")
    params = np.asarray(params, dtype=np.float64)
    grad = np.empty_like(params)
    work = params.copy()
    for i in range(params.shape[0]):
        work[i] = params[i] + step
        fp = f(work)
        work[i] = params[i] - step
        fm = f(work)
        work[i] = params[i]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite evaluation at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * step)
    return grad
