"""Shared builders for the test suite."""

import numpy as np
import pytest

from flowgrad import CouplingLayer, FlowModel, build_flow, standard_normal


def make_flow(d=4, n_layers=4, kind="affine", hidden=(8,), mixture_size=3,
              seed=0, jitter=0.3, weight_norm=False, global_scale=False):
    """Random small flow, nudged away from the identity initialization."""
    rng = np.random.default_rng(seed)
    model = build_flow(standard_normal(d), n_layers=n_layers, kind=kind,
                       hidden=hidden, mixture_size=mixture_size, rng=rng,
                       weight_norm=weight_norm, global_scale=global_scale,
                       require_full_coverage=n_layers >= 2)
    if jitter:
        model = model.with_params(model.params + jitter * rng.normal(size=model.n_params))
    return model


def make_mixed_flow(d=4, seed=0, jitter=0.25, hidden=(8,), mixture_size=3):
    """Alternating affine / logistic-mixture stack with a global scale cap."""
    from flowgrad.tape import MlpSpec, mlp_init
    from flowgrad.flows import alternating_masks

    rng = np.random.default_rng(seed)
    base = standard_normal(d)
    masks = alternating_masks(d, 4)
    layers, chunks, offset = [], [], 0
    for i, (trans, cond) in enumerate(masks):
        kind = "affine" if i % 2 == 0 else "logistic_mixture"
        k = len(trans)
        out_w = 2 * k if kind == "affine" else 3 * mixture_size * k
        spec = MlpSpec((len(cond), *hidden, out_w))
        layers.append(CouplingLayer(kind, trans, cond, spec, offset,
                                    mixture_size if kind != "affine" else 0))
        chunks.append(mlp_init(spec, rng, zero_last=True))
        offset += spec.n_params
    layers.append(CouplingLayer("global_scale", np.arange(d),
                                np.array([], dtype=np.intp), None, offset))
    chunks.append(np.array([1.0]))
    params = np.concatenate(chunks)
    if jitter:
        params = params + jitter * rng.normal(size=params.size)
    return FlowModel(layers, base, params)


def scale_flow(s=2.0, d=1):
    """Single learnable global scale: x = s * x0 over a standard normal base."""
    layer = CouplingLayer("global_scale", np.arange(d),
                          np.array([], dtype=np.intp), None, 0)
    return FlowModel([layer], standard_normal(d), np.array([float(s)]))


def set_conditioner_bias(model, layer_idx, values):
    """Overwrite the final-layer bias of one conditioner (constant output)."""
    layer = model.layers[layer_idx]
    slots = list(layer.mlp.layer_slots(layer.offset))
    params = model.params.copy()
    params[slots[-1]["b"]] = values
    return model.with_params(params)


def zero_conditioner_hidden(model, layer_idx):
    """Zero every conditioner weight so the output is bias-only (constant)."""
    layer = model.layers[layer_idx]
    params = model.params.copy()
    for slots in layer.mlp.layer_slots(layer.offset):
        params[slots["w"]] = 0.0
        if "g" in slots:
            params[slots["g"]] = 0.0
        params[slots["b"]] = 0.0
    return model.with_params(params)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
