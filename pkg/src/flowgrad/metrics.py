"""Importance-weight diagnostics: effective sample size, ELBO, NLL.

Log weights are lw(x) = -E(x) - log q(x), unnormalized.  Both ESS estimators
are self-normalizing, so adding any constant to the energy or the log
density leaves them unchanged; the implementations shift by extreme values
first, which also makes them immune to overflow for weights as large as
exp(+-700).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericsError, UsageError
from .flows import DEFAULT_BISECTION_TOL, FlowModel, flow_forward, flow_inverse_logq

MODEL_SAMPLES = "model_samples"
TARGET_SAMPLES = "target_samples"


@dataclass(frozen=True)
class WeightedBatch:
    """Unnormalized per-sample log importance weights plus their provenance."""

    log_weights: np.ndarray
    source: str

    def __post_init__(self):
        if self.source not in (MODEL_SAMPLES, TARGET_SAMPLES):
            raise UsageError(f"unknown weight source {self.source!r}")
        lw = np.asarray(self.log_weights, dtype=np.float64)
        if lw.ndim != 1:
            raise UsageError("log weights must be a flat per-sample array")
        if np.any(np.isnan(lw)) or np.any(lw == np.inf):
            raise NumericsError("log weights contain NaN or +inf")
        object.__setattr__(self, "log_weights", lw)


def weights_from_model(model: FlowModel, target, n: int,
                       rng: np.random.Generator) -> WeightedBatch:
    """Draw n model samples and weight them against the target."""
    x0 = model.base.sample(rng, n)
    x, log_q = flow_forward(model, x0)
    return WeightedBatch(-target.energy(x) - log_q, MODEL_SAMPLES)


def weights_from_data(model: FlowModel, target, data,
                      tol: float = DEFAULT_BISECTION_TOL) -> WeightedBatch:
    """Weight target-distributed points against the model."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    _, log_q = flow_inverse_logq(model, data, tol)
    return WeightedBatch(-target.energy(data) - log_q, TARGET_SAMPLES)


def _check(batch: WeightedBatch, source: str, op: str):
    if batch.source != source:
        raise UsageError(f"{op} needs {source} weights, got {batch.source}")
    lw = batch.log_weights
    if lw.shape[0] < 2:
        raise UsageError(f"{op} needs at least two samples")
    if np.all(lw == -np.inf):
        raise NumericsError(f"{op}: all weights are zero, ESS undefined")
    return lw


def ess_q(batch: WeightedBatch) -> float:
    """Effective sample size fraction from model samples: N / sum(w_hat^2)
    with weights self-normalized to mean one, as a value in (0, 1]."""
    lw = _check(batch, MODEL_SAMPLES, "ess_q")
    u = lw - lw.max()
    s1 = np.exp(u).sum()
    s2 = np.exp(2.0 * u).sum()
    return float(s1 * s1 / (lw.shape[0] * s2))


def ess_p(batch: WeightedBatch) -> float:
    """Effective sample size fraction from target samples: 1 / mean(w_hat)
    with the harmonic self-normalization, as a value in (0, 1]."""
    lw = _check(batch, TARGET_SAMPLES, "ess_p")
    m = lw.max()
    n_min = lw.min()
    sp = np.exp(lw - m).sum()
    sm = np.exp(n_min - lw).sum()
    n = lw.shape[0]
    return float(n * n * np.exp(n_min - m) / (sp * sm))


def elbo(batch: WeightedBatch) -> float:
    """Mean log weight over model samples (lower-bounds the log partition)."""
    if batch.source != MODEL_SAMPLES:
        raise UsageError("elbo needs model-sample weights")
    return float(batch.log_weights.mean())


def nll(model: FlowModel, data, tol: float = DEFAULT_BISECTION_TOL) -> float:
    """Negative mean model log density over held-out data."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] == 0:
        raise UsageError("nll needs at least one data point")
    _, log_q = flow_inverse_logq(model, data, tol)
    return float(-log_q.mean())
