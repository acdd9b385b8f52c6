"""Adam training loop with gradient clipping, LR decay, and checkpointing.

Progress is counted in optimizer steps throughout (never data passes).  The
loop is deterministic for a fixed seed: batch draws, data generation, and
evaluation batches come from independent children of one seed sequence, so
histories replay exactly except for wall-time fields.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, FlowgradError, UsageError
from .estimators import FORWARD_TAGS, ALL_TAGS, GradEstimate, estimate
from .flows import FlowModel, save_checkpoint
from .metrics import ess_p, ess_q, nll, weights_from_data, weights_from_model
from .targets import Phi4Target, phi4_metropolis_samples


@dataclass
class TrainConfig:
    estimator: str
    batch_size: int = 512
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None
    lr_patience: int | None = None
    lr_factor: float = 0.5
    max_steps: int = 1000
    eval_interval: int = 100
    seed: int = 0
    checkpoint_dir: str | None = None
    n_data: int = 0
    data_path: str | None = None
    train_fraction: float = 0.8
    ess_eval_factor: int = 10
    bisection_tol: float = 1e-10

    def __post_init__(self):
        if self.estimator not in ALL_TAGS:
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.max_steps < 0 or self.eval_interval < 1:
            raise ConfigError("max_steps >= 0 and eval_interval >= 1 required")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    skipped: int = 0

    @classmethod
    def init(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def clip_by_global_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = np.linalg.norm(grad)
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState,
              config: TrainConfig) -> tuple[np.ndarray, AdamState]:
    """One Adam update with bias correction; clip first when configured.

    A non-finite gradient skips the update (skip counter incremented, moments
    untouched).
    """
    if params.shape != grad.shape:
        raise UsageError("parameter/gradient shape mismatch")
    if not np.all(np.isfinite(grad)):
        return params, replace(state, skipped=state.skipped + 1)
    if config.grad_clip is not None:
        grad = clip_by_global_norm(grad, config.grad_clip)
    t = state.t + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * grad
    v = config.beta2 * state.v + (1.0 - config.beta2) * grad * grad
    m_hat = m / (1.0 - config.beta1 ** t)
    v_hat = v / (1.0 - config.beta2 ** t)
    new_params = params - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
    return new_params, AdamState(m, v, t, state.skipped)


# ---------------------------------------------------------------------------
# history
# ---------------------------------------------------------------------------

HISTORY_COLUMNS = (
    "step", "loss", "ess_q", "ess_p", "elbo", "nll_train", "nll_test",
    "grad_norm_mean", "grad_norm_std", "lr", "skipped_steps", "wall_time_s",
)
HISTORY_SCHEMA_VERSION = 1
TIME_COLUMNS = ("wall_time_s",)


@dataclass
class EvalRecord:
    step: int
    loss: float | None = None
    ess_q: float | None = None
    ess_p: float | None = None
    elbo: float | None = None
    nll_train: float | None = None
    nll_test: float | None = None
    grad_norm_mean: float | None = None
    grad_norm_std: float | None = None
    lr: float | None = None
    skipped_steps: int = 0
    wall_time_s: float = 0.0


@dataclass
class TrainHistory:
    records: list[EvalRecord] = field(default_factory=list)

    def append(self, rec: EvalRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise UsageError("history steps must be strictly increasing")
        self.records.append(rec)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                w.writerow([_fmt(getattr(r, c)) for c in HISTORY_COLUMNS])

    @staticmethod
    def read_rows(path: str) -> list[dict]:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    history: TrainHistory
    model: FlowModel
    best_params: np.ndarray
    best_metric: float | None
    failures: int = 0


def make_training_data(target, n: int, rng: np.random.Generator,
                       data_path: str | None = None) -> np.ndarray:
    """Target-distributed samples: file, exact sampler, or lattice fixture."""
    if data_path is not None:
        return np.load(data_path)
    if hasattr(target, "sample"):
        return target.sample(rng, n)
    if isinstance(target, Phi4Target):
        return phi4_metropolis_samples(target, n, rng)
    raise ConfigError("target provides no data source; set data_path")


def train(model: FlowModel, target, config: TrainConfig) -> TrainResult:
    """Run the configured estimator/optimizer loop and collect eval records.

    Estimator failures are recorded and skipped; the run aborts only when
    more than 10% of attempted steps have failed.
    """
    ss = np.random.SeedSequence(config.seed)
    batch_rng, data_rng, eval_rng = [np.random.default_rng(c) for c in ss.spawn(3)]
    forward_kl = config.estimator in FORWARD_TAGS

    train_data = test_data = None
    if forward_kl or config.n_data > 0:
        if config.n_data < 1 and config.data_path is None:
            raise ConfigError("forward-KL training needs n_data or data_path")
        data = make_training_data(target, config.n_data, data_rng, config.data_path)
        n_train = max(1, int(round(config.train_fraction * data.shape[0])))
        train_data = data[:n_train]
        test_data = data[n_train:] if n_train < data.shape[0] else None

    eval_q_n = config.ess_eval_factor * config.batch_size
    eval_p_data = test_data if test_data is not None and len(test_data) >= 2 else None
    if eval_p_data is None and hasattr(target, "sample"):
        eval_p_data = target.sample(eval_rng, eval_q_n)
    nll_train_data = train_data[: min(4096, len(train_data))] if train_data is not None else None
    nll_test_data = test_data[: min(4096, len(test_data))] if test_data is not None else None

    params = model.params.copy()
    state = AdamState.init(params.shape[0])
    lr = config.learning_rate
    history = TrainHistory()
    best_metric = None
    best_params = params.copy()
    since_improved = 0
    failures = 0
    attempts = 0
    last_est: GradEstimate | None = None
    t_start = time.perf_counter()

    def evaluate(step: int) -> None:
        nonlocal best_metric, best_params, since_improved, lr
        snapshot = model.with_params(params)
        wq = weights_from_model(snapshot, target, eval_q_n, eval_rng)
        rec = EvalRecord(step=step, lr=lr, skipped_steps=state.skipped + failures,
                         wall_time_s=time.perf_counter() - t_start)
        rec.ess_q = ess_q(wq)
        rec.elbo = float(wq.log_weights.mean())
        rec.loss = -rec.elbo
        if eval_p_data is not None:
            wp = weights_from_data(snapshot, target, eval_p_data, config.bisection_tol)
            rec.ess_p = ess_p(wp)
        if nll_train_data is not None:
            rec.nll_train = nll(snapshot, nll_train_data, config.bisection_tol)
            if forward_kl:
                rec.loss = rec.nll_train
        if nll_test_data is not None:
            rec.nll_test = nll(snapshot, nll_test_data, config.bisection_tol)
        if last_est is not None:
            rec.grad_norm_mean = last_est.per_sample_norm_mean
            rec.grad_norm_std = last_est.per_sample_norm_std
        history.append(rec)
        metric = rec.ess_p if rec.ess_p is not None else rec.ess_q
        if best_metric is None or (metric is not None and metric > best_metric):
            best_metric = metric
            best_params = params.copy()
            since_improved = 0
            if config.checkpoint_dir:
                save_checkpoint(snapshot, os.path.join(config.checkpoint_dir,
                                                       "checkpoint_best.json"))
        else:
            since_improved += 1
            if config.lr_patience is not None and since_improved >= config.lr_patience:
                lr = lr * config.lr_factor
                since_improved = 0

    for step in range(config.max_steps + 1):
        if step % config.eval_interval == 0 or step == config.max_steps:
            if not history.records or history.records[-1].step < step:
                evaluate(step)
        if step == config.max_steps:
            break
        attempts += 1
        snapshot = model.with_params(params)
        try:
            if forward_kl:
                idx = batch_rng.integers(0, train_data.shape[0], size=config.batch_size)
                est = estimate(config.estimator, snapshot, target,
                               data=train_data[idx], tol=config.bisection_tol)
            else:
                est = estimate(config.estimator, snapshot, target,
                               batch_size=config.batch_size, rng=batch_rng,
                               tol=config.bisection_tol)
        except FlowgradError:
            failures += 1
            if attempts >= 20 and failures / attempts > 0.1:
                raise
            continue
        last_est = est
        step_cfg = replace(config, learning_rate=lr)
        params, state = adam_step(params, est.grad, state, step_cfg)

    final = model.with_params(params)
    if config.checkpoint_dir:
        save_checkpoint(final, os.path.join(config.checkpoint_dir,
                                            "checkpoint_final.json"))
    return TrainResult(history, final, best_params, best_metric, failures)
