"""Continual-learning update rules.

Every learner descends a mean negative log-likelihood. The Laplace family
(trust-region preconditioned rule, Adam on the quadratically regularized
objective, diagonal-precision variant) maintains per-block Gaussian beliefs
(mean, precision) over parameters; the projection family (row-space,
row-and-column-space, and its prior-pulled variant) maintains running activity
second moments from past tasks; replay keeps raw examples; the variational
rule maintains a belief it optimizes directly.

Per-block orientation: a parameter block has shape (out, fan); its factored
precision is KronFactorPair(left=fan-side, right=out-side), so the quadratic
pull is right @ (theta - mean) @ left and preconditioning is P_L @ M @ P_R
with P_L out-side and P_R fan-side.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .fisher import FisherEstimate
from .kron import (
    KronFactorPair,
    kl_sum_pairs,
    regularized_kf_inverse,
    spd_inverse,
    symmetrize,
)

Array = np.ndarray

NCL = "ncl"
KFAC = "kfac"
EWC = "ewc"
OWM = "owm"
DOWM = "dowm"
LAPLACE_DOWM = "laplace_dowm"
REPLAY = "replay"
NVCL = "nvcl"
NONE = "none"

PROJECTION_VARIANTS = (OWM, DOWM, LAPLACE_DOWM)


@dataclass
class BlockBelief:
    """Gaussian belief over one parameter block.

    precision is a KronFactorPair for factored beliefs or a block-shaped array
    of per-parameter precisions for diagonal beliefs.
    """

    mean: Array
    precision: KronFactorPair | Array

    @property
    def is_factored(self) -> bool:
        return isinstance(self.precision, KronFactorPair)


@dataclass
class LearnerConfig:
    method: str = NCL
    learning_rate: float = 0.05
    momentum: float = 0.9
    alpha: float = 1e-10
    prior_scale: float = 1.0  # p_w: first-task precision factors are p_w * I
    prior_weight: float = 1.0  # lambda multiplying the quadratic prior pull
    prior_weight_momentum: float | None = None  # lambda_m (decoupled Adam)
    prior_weight_precond: float | None = None  # lambda_v (decoupled Adam)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    iters_per_task: int = 2000
    nvcl_step_size: float = 0.1
    nvcl_samples: int = 1
    replay_buffer_size: int = 256

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.prior_scale <= 0:
            raise ValueError("prior scale must be positive")
        if self.prior_weight < 0:
            raise ValueError("prior weight must be nonnegative")

    @property
    def lambda_momentum(self) -> float:
        return self.prior_weight if self.prior_weight_momentum is None else self.prior_weight_momentum

    @property
    def lambda_precond(self) -> float:
        return self.prior_weight if self.prior_weight_precond is None else self.prior_weight_precond


@dataclass
class LearnerState:
    """Mutable optimizer state owned by exactly one experiment at a time."""

    params: dict[str, Array]
    prior: dict[str, BlockBelief]
    momentum: dict[str, Array] = field(default_factory=dict)
    precond: dict[str, tuple[Array, Array]] = field(default_factory=dict)
    adam_m: dict[str, Array] = field(default_factory=dict)
    adam_v: dict[str, Array] = field(default_factory=dict)
    adam_t: int = 0
    moments: dict[str, Array] = field(default_factory=dict)  # past-task input moments
    frozen_params: dict[str, Array] = field(default_factory=dict)
    tasks_seen: int = 0
    replay_buffers: list = field(default_factory=list)
    belief: dict[str, BlockBelief] | None = None  # NVCL's variational belief


def init_prior(
    block_shapes: dict[str, tuple[int, int]], p_w: float, diagonal: bool = False
) -> dict[str, BlockBelief]:
    """Independent zero-mean spherical beliefs: precision factors p_w * I per side.

    Materialized, each block's precision is p_w^2 * I; with p_w^-2 set to the
    per-task sample count this is a unit Gaussian prior expressed in the
    per-sample units used by the Fisher estimators.
    """
    if p_w <= 0:
        raise ValueError("p_w must be positive")
    prior = {}
    for name, (out, fan) in block_shapes.items():
        mean = np.zeros((out, fan))
        if diagonal:
            prior[name] = BlockBelief(mean, p_w**2 * np.ones((out, fan)))
        else:
            prior[name] = BlockBelief(
                mean, KronFactorPair(p_w * np.eye(fan), p_w * np.eye(out))
            )
    return prior


def make_state(params: dict[str, Array], prior: dict[str, BlockBelief]) -> LearnerState:
    return LearnerState(
        params={k: v.copy() for k, v in params.items()},
        prior=prior,
        momentum={k: np.zeros_like(v) for k, v in params.items()},
    )


def _prior_pull(belief: BlockBelief, theta: Array) -> Array:
    """Gradient of the quadratic penalty (theta-mean)^T Lambda (theta-mean) / 2."""
    diff = theta - belief.mean
    if belief.is_factored:
        return belief.precision.right @ diff @ belief.precision.left
    return belief.precision * diff


# ---------------------------------------------------------------------------
# Trust-region preconditioned rule
# ---------------------------------------------------------------------------

def ncl_begin_task(state: LearnerState, alpha: float) -> None:
    """Refresh the preconditioners from the prior and zero the momentum.

    Folds alpha*I (x) alpha*I into each block's prior precision and stores the
    inverted factors (P_L, P_R); the prior pull itself keeps using the
    unregularized factors.
    """
    for name, belief in state.prior.items():
        if not belief.is_factored:
            raise ValueError("the preconditioned rule needs factored beliefs")
        state.precond[name] = regularized_kf_inverse(belief.precision, alpha)
        state.momentum[name] = np.zeros_like(state.params[name])


def ncl_step(state: LearnerState, grads: dict[str, Array], config: LearnerConfig) -> None:
    """One trust-region preconditioned descent step with momentum.

    Per block: M <- rho M + g + lambda * G (theta - mean) A, then
    theta <- theta - gamma p_w^2 P_L M P_R.
    """
    gamma = config.learning_rate * config.prior_scale**2
    for name, theta in state.params.items():
        belief = state.prior[name]
        m = state.momentum[name]
        m *= config.momentum
        m += grads[name]
        if config.prior_weight != 0.0:
            m += config.prior_weight * _prior_pull(belief, theta)
        p_l, p_r = state.precond[name]
        update = gamma * (p_l @ m @ p_r)
        if not np.all(np.isfinite(update)):
            raise FloatingPointError(
                f"non-finite update for block {name!r} "
                f"(|M| max {np.abs(m).max():.3e})"
            )
        theta -= update


def ncl_finish_task(state: LearnerState, fisher: FisherEstimate) -> None:
    """Fold the task Fisher into the belief and move the mean to current theta.

    Factored beliefs use the KL-optimal Kronecker sum; diagonal beliefs add
    elementwise (the sum of diagonals is exact).
    """
    for name, belief in state.prior.items():
        estimate = fisher.blocks[name]
        if belief.is_factored:
            if not isinstance(estimate, KronFactorPair):
                raise TypeError(f"block {name!r}: factored belief needs a factored Fisher")
            belief.precision = kl_sum_pairs(belief.precision, estimate)
        else:
            belief.precision = belief.precision + estimate
        belief.mean = state.params[name].copy()
    state.tasks_seen += 1


# ---------------------------------------------------------------------------
# Adam on the weight-regularized objective (factored or diagonal prior)
# ---------------------------------------------------------------------------

def adam_weightreg_step(
    state: LearnerState, grads: dict[str, Array], config: LearnerConfig
) -> None:
    """Adam step on NLL + lambda * quadratic prior penalty.

    In decoupled mode the first moment uses the lambda_m objective gradient and
    the second moment the squared lambda_v objective gradient; with
    lambda_m == lambda_v this is bit-identical to standard Adam on the single
    objective.
    """
    state.adam_t += 1
    t = state.adam_t
    b1, b2 = config.adam_beta1, config.adam_beta2
    for name, theta in state.params.items():
        pull = _prior_pull(state.prior[name], theta)
        g_m = grads[name] + config.lambda_momentum * pull
        if config.lambda_precond == config.lambda_momentum:
            g_v = g_m
        else:
            g_v = grads[name] + config.lambda_precond * pull
        m = state.adam_m.setdefault(name, np.zeros_like(theta))
        v = state.adam_v.setdefault(name, np.zeros_like(theta))
        m *= b1
        m += (1 - b1) * g_m
        v *= b2
        v += (1 - b2) * g_v**2
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)


# ---------------------------------------------------------------------------
# Projection-based rules
# ---------------------------------------------------------------------------

def projected_begin_task(state: LearnerState, config: LearnerConfig, variant: str) -> None:
    """Build projection matrices from past-task activity moments.

    P_R = alpha (Zbar + alpha I)^-1 shrinks the row space spanned by past
    inputs (a coordinate with past energy e is scaled by alpha/(e + alpha))
    and is bounded by the identity; the column-space variants use
    P_L = alpha (W Zbar W^T + alpha I)^-1 with W frozen at the previous task's
    convergence. Before the first task all moments are zero and every variant
    is exactly plain (momentum) gradient descent.
    """
    if variant not in PROJECTION_VARIANTS:
        raise ValueError(f"unknown projection variant {variant!r}")
    alpha = config.alpha
    if alpha <= 0:
        raise ValueError("projection variants need alpha > 0")
    for name, theta in state.params.items():
        out, fan = theta.shape
        zbar = state.moments.get(name, np.zeros((fan, fan)))
        p_r = alpha * spd_inverse(zbar + alpha * np.eye(fan))
        if variant == OWM:
            p_l = np.eye(out)
        else:
            w_prev = state.frozen_params.get(name, theta)
            p_l = alpha * spd_inverse(w_prev @ zbar @ w_prev.T + alpha * np.eye(out))
        state.precond[name] = (p_l, p_r)
        state.momentum[name] = np.zeros_like(theta)


def projected_step(
    state: LearnerState, grads: dict[str, Array], config: LearnerConfig, variant: str
) -> None:
    """One projected (momentum) step: theta <- theta - gamma P_L M P_R.

    Only the prior-pulled variant adds a pull term, built from the implied
    unregularized factors (W Zbar W^T, Zbar); the plain projection rules use no
    regularization toward past parameters.
    """
    for name, theta in state.params.items():
        m = state.momentum[name]
        m *= config.momentum
        m += grads[name]
        if variant == LAPLACE_DOWM and name in state.moments:
            zbar = state.moments[name]
            w_prev = state.frozen_params.get(name, theta)
            diff = theta - state.prior[name].mean
            m += config.prior_weight * (w_prev @ zbar @ w_prev.T) @ diff @ zbar
        p_l, p_r = state.precond[name]
        update = config.learning_rate * (p_l @ m @ p_r)
        if not np.all(np.isfinite(update)):
            raise FloatingPointError(f"non-finite update for block {name!r}")
        theta -= update


def projected_finish_task(state: LearnerState, input_moments: dict[str, Array]) -> None:
    """Fold this task's activity moments into the uniform running average.

    Also snapshots the converged parameters (used for column-space projections
    on the next task) and moves the prior means for the pulled variant.
    """
    k = state.tasks_seen
    for name, moment in input_moments.items():
        moment = symmetrize(moment)
        if name in state.moments:
            state.moments[name] = (k * state.moments[name] + moment) / (k + 1)
        else:
            state.moments[name] = moment
        state.frozen_params[name] = state.params[name].copy()
        state.prior[name].mean = state.params[name].copy()
    state.tasks_seen += 1


# ---------------------------------------------------------------------------
# Plain descent and replay
# ---------------------------------------------------------------------------

def sgd_step(state: LearnerState, grads: dict[str, Array], config: LearnerConfig) -> None:
    """Plain momentum gradient descent (the no-method baseline)."""
    for name, theta in state.params.items():
        m = state.momentum.setdefault(name, np.zeros_like(theta))
        m *= config.momentum
        m += grads[name]
        theta -= config.learning_rate * m


def replay_step(
    state: LearnerState,
    current_grads: dict[str, Array],
    past_grads: dict[str, Array] | None,
    task_number: int,
    config: LearnerConfig,
) -> None:
    """Gradient step weighting current and replayed past-task gradients.

    theta <- theta - gamma [ (1/k) g_k + ((k-1)/k) g_past ] where g_past is the
    mean gradient over stored examples of tasks before k (1-indexed task k).
    """
    k = task_number
    if k < 1:
        raise ValueError("task_number is 1-indexed")
    for name, theta in state.params.items():
        g = current_grads[name] / k
        if past_grads is not None and k > 1:
            g = g + (k - 1) / k * past_grads[name]
        theta -= config.learning_rate * g


# ---------------------------------------------------------------------------
# Natural variational rule
# ---------------------------------------------------------------------------

def nvcl_init_belief(state: LearnerState) -> None:
    """Start each task's variational belief at the prior."""
    state.belief = {
        name: BlockBelief(b.mean.copy(), b.precision) for name, b in state.prior.items()
    }


def sample_from_belief(
    belief: dict[str, BlockBelief], rng: np.random.Generator
) -> dict[str, Array]:
    """One matrix-normal parameter draw per block from N(mean, precision^-1).

    With precision A (x) G the draw is mean + chol(G^-1) E chol(A^-1)^T for an
    iid standard normal E of the block's shape.
    """
    sample = {}
    for name, b in belief.items():
        if not b.is_factored:
            raise ValueError("variational sampling needs factored beliefs")
        chol_row = np.linalg.cholesky(spd_inverse(b.precision.right))
        chol_col = np.linalg.cholesky(spd_inverse(b.precision.left))
        eps = rng.standard_normal(b.mean.shape)
        sample[name] = b.mean + chol_row @ eps @ chol_col.T
    return sample


def nvcl_step(
    state: LearnerState,
    grad_fn,
    fisher_fn,
    config: LearnerConfig,
    rng: np.random.Generator,
) -> None:
    """One variational update of (mean, precision) toward the task posterior.

    mean  <- (1-beta) mean + beta [prior_mean + Lambda_prev^-1 E_q(grad log p)]
    prec  <- (1-beta) prec + beta [Lambda_prev + E_q(F)]

    E_q averages over `nvcl_samples` parameter draws from the current belief;
    grad_fn maps a parameter dict to NLL gradients and fisher_fn to factored
    per-block Fisher pairs. The precision combination folds Kronecker pairs
    with the KL-optimal sum, keeping every belief PSD.
    """
    if state.belief is None:
        raise ValueError("call nvcl_init_belief at the start of the task")
    beta = config.nvcl_step_size
    n_samples = max(1, config.nvcl_samples)

    grad_acc: dict[str, Array] = {}
    fisher_acc: dict[str, KronFactorPair] = {}
    for _ in range(n_samples):
        theta = sample_from_belief(state.belief, rng)
        grads = grad_fn(theta)
        fishers = fisher_fn(theta)
        for name in state.belief:
            grad_acc[name] = grad_acc.get(name, 0.0) + grads[name] / n_samples
            pair = fishers[name]
            if name in fisher_acc:
                prev = fisher_acc[name]
                fisher_acc[name] = KronFactorPair(
                    prev.left + pair.left / n_samples, prev.right + pair.right / n_samples
                )
            else:
                fisher_acc[name] = KronFactorPair(pair.left / n_samples, pair.right / n_samples)

    for name, belief in state.belief.items():
        prior = state.prior[name]
        p_l, p_r = regularized_kf_inverse(prior.precision, config.alpha)
        log_p_grad = -grad_acc[name]
        belief.mean = (1 - beta) * belief.mean + beta * (
            prior.mean + p_l @ log_p_grad @ p_r
        )
        target = kl_sum_pairs(prior.precision, fisher_acc[name])
        if beta >= 1.0:
            belief.precision = target
        elif beta > 0.0:
            belief.precision = kl_sum_pairs(
                belief.precision.scale(1 - beta), target.scale(beta)
            )


def nvcl_finish_task(state: LearnerState) -> None:
    """Adopt the optimized belief as the next task's prior."""
    if state.belief is None:
        raise ValueError("no belief to adopt")
    state.prior = copy.deepcopy(state.belief)
    for name, b in state.prior.items():
        state.params[name] = b.mean.copy()
    state.tasks_seen += 1
