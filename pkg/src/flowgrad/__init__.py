"""Coupling-flow training with fast path-gradient estimators."""

from .errors import (
    ConfigError,
    FlowgradError,
    InversionError,
    NumericsError,
    OracleError,
    UsageError,
)
from .tape import MlpSpec, Tape, finite_difference_gradient, mlp_forward, tape_vjp
from .targets import (
    BaseDensity,
    GmmTarget,
    Phi4Target,
    SelfTarget,
    phi4_metropolis_samples,
    standard_normal,
    uniform_interval,
)
from .flows import (
    BISECTION_EVALS,
    CouplingLayer,
    FlowModel,
    affine_forward,
    affine_inverse,
    alternating_masks,
    build_flow,
    checkerboard_masks,
    flow_forward,
    flow_inverse_logq,
    load_checkpoint,
    logistic_mixture_forward,
    logistic_mixture_inverse,
    save_checkpoint,
)
from .recursion import (
    AugmentedBatch,
    CouplingStepQuantities,
    RecursionState,
    forward_with_G,
    inverse_with_G,
    recursion_init,
    recursion_step_affine,
    recursion_step_coupling,
    recursion_step_dense,
)
from .estimators import (
    GradEstimate,
    estimate,
    grad_forward_gdreg,
    grad_forward_mle,
    grad_forward_path,
    grad_reverse_path_baseline,
    grad_reverse_path_fast,
    grad_reverse_standard,
    score_expectation,
)
from .metrics import WeightedBatch, elbo, ess_p, ess_q, nll, weights_from_data, weights_from_model
from .training import AdamState, TrainConfig, TrainHistory, TrainResult, adam_step, train

__version__ = "0.1.0"
