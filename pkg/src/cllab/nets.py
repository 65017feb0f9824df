"""Manually differentiated feedforward (MLP) and recurrent (vanilla RNN) models.

Both models expose the statistics needed for Kronecker-factored curvature
estimation: layer inputs with a trailing bias coordinate (z), pre-activations
(h), and adjoints, i.e. gradients of the per-sample negative log-likelihood
with respect to pre-activations (h_bar) and outputs (y_bar).

Conventions shared by every operation here:
  - losses are mean negative log-likelihoods over the batch and all update
    rules descend; per-sequence losses sum over (unmasked) time steps;
  - biases are folded into weight matrices through an appended constant-1
    input coordinate, so a block of shape (out, in+1) consumes z of size in+1;
  - ReLU uses subgradient 0 at 0;
  - recorded process noise is replayed, never re-sampled, so backward passes
    are exact gradients of the realized forward computation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


def append_ones(x: Array) -> Array:
    """Append a constant-1 column (the folded bias coordinate)."""
    return np.concatenate([x, np.ones((*x.shape[:-1], 1))], axis=-1)


def relu(h: Array) -> Array:
    return np.maximum(h, 0.0)


def relu_grad(h: Array) -> Array:
    return (h > 0.0).astype(float)


def softmax(logits: Array) -> Array:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels: Array, n: int) -> Array:
    out = np.zeros((*labels.shape, n))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def sample_categorical(probs: Array, rng: np.random.Generator) -> Array:
    """Row-wise categorical draws from a (..., n) probability array."""
    u = rng.random(probs.shape[:-1])
    return (u[..., None] > np.cumsum(probs, axis=-1)).sum(axis=-1)


# ---------------------------------------------------------------------------
# Feedforward model
# ---------------------------------------------------------------------------

MULTI_HEAD = "multi_head"
SHARED_HEAD = "shared_head"
CLASS_INCREMENTAL = "class_incremental"


@dataclass(frozen=True)
class HeadMode:
    """Output-layer wiring.

    multi_head: one independent output block per task, selected by task index.
    shared_head: a single output block reused by every task.
    class_incremental: a single output block spanning all classes of all tasks.
    """

    kind: str
    n_tasks: int = 1
    classes: int = 2

    def __post_init__(self):
        if self.kind not in (MULTI_HEAD, SHARED_HEAD, CLASS_INCREMENTAL):
            raise ValueError(f"unknown head mode {self.kind!r}")

    def head_blocks(self) -> list[str]:
        if self.kind == MULTI_HEAD:
            return [f"head{t}" for t in range(self.n_tasks)]
        return ["head"]

    def block_for_task(self, task: int | None) -> str:
        if self.kind == MULTI_HEAD:
            if task is None or not 0 <= task < self.n_tasks:
                raise ValueError(f"multi-head model needs a valid task index, got {task}")
            return f"head{task}"
        return "head"


@dataclass(frozen=True)
class MlpSpec:
    """ReLU MLP: layer_sizes = (n_in, hidden..., ) plus a softmax head layer."""

    layer_sizes: tuple[int, ...]
    head: HeadMode

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ValueError("need an input width and at least one hidden layer")
        if any(w < 1 for w in self.layer_sizes):
            raise ValueError("every layer width must be >= 1")

    @property
    def n_hidden_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def blocks(self) -> list[str]:
        return [f"layer{i}" for i in range(self.n_hidden_layers)] + self.head.head_blocks()

    def block_shape(self, name: str) -> tuple[int, int]:
        if name.startswith("layer"):
            i = int(name[5:])
            return self.layer_sizes[i + 1], self.layer_sizes[i] + 1
        return self.head.classes, self.layer_sizes[-1] + 1


def init_mlp_params(spec: MlpSpec, rng: np.random.Generator) -> dict[str, Array]:
    """He-scaled Gaussian weights, zero bias column."""
    params = {}
    for name in spec.blocks():
        out, fan = spec.block_shape(name)
        w = rng.standard_normal((out, fan)) * np.sqrt(2.0 / (fan - 1))
        w[:, -1] = 0.0
        params[name] = w
    return params


@dataclass
class MlpTrace:
    """Per-block layer inputs (with bias coordinate) and per-sample adjoints."""

    layer_inputs: dict[str, Array]
    preacts: dict[str, Array]
    logits: Array
    probs: Array
    adjoints: dict[str, Array] = field(default_factory=dict)


def mlp_forward(spec: MlpSpec, params: dict[str, Array], x: Array, task: int | None = None) -> MlpTrace:
    x = np.asarray(x, dtype=float)
    layer_inputs, preacts = {}, {}
    cur = x
    for i in range(spec.n_hidden_layers):
        name = f"layer{i}"
        z = append_ones(cur)
        h = z @ params[name].T
        layer_inputs[name] = z
        preacts[name] = h
        cur = relu(h)
    head_block = spec.head.block_for_task(task)
    z_head = append_ones(cur)
    logits = z_head @ params[head_block].T
    for name in spec.head.head_blocks():
        layer_inputs[name] = z_head
    return MlpTrace(layer_inputs, preacts, logits, softmax(logits))


def mlp_backward(
    spec: MlpSpec,
    params: dict[str, Array],
    trace: MlpTrace,
    labels: Array,
    task: int | None = None,
) -> tuple[float, dict[str, Array]]:
    """Mean cross-entropy and its exact gradients from a recorded forward pass.

    Fills `trace.adjoints` with per-sample adjoints of the per-sample NLL
    (the 1/batch factor appears only in the returned gradients).
    """
    labels = np.asarray(labels)
    batch = trace.logits.shape[0]
    if batch == 0:
        raise ValueError("empty batch")
    head_block = spec.head.block_for_task(task)
    log_probs = trace.logits - trace.logits.max(axis=1, keepdims=True)
    log_probs = log_probs - np.log(np.exp(log_probs).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(batch), labels].mean())
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite cross-entropy loss")

    grads = {name: np.zeros_like(params[name]) for name in spec.blocks()}
    g_out = trace.probs - one_hot(labels, spec.head.classes)
    trace.adjoints[head_block] = g_out
    grads[head_block] = g_out.T @ trace.layer_inputs[head_block] / batch

    delta = g_out @ params[head_block][:, :-1]
    for i in reversed(range(spec.n_hidden_layers)):
        name = f"layer{i}"
        h_bar = delta * relu_grad(trace.preacts[name])
        trace.adjoints[name] = h_bar
        grads[name] = h_bar.T @ trace.layer_inputs[name] / batch
        if i > 0:
            delta = h_bar @ params[name][:, :-1]
    return loss, grads


def mlp_forward_backward(
    spec: MlpSpec,
    params: dict[str, Array],
    x: Array,
    labels: Array,
    task: int | None = None,
) -> tuple[float, dict[str, Array], MlpTrace]:
    trace = mlp_forward(spec, params, x, task)
    loss, grads = mlp_backward(spec, params, trace, labels, task)
    return loss, grads, trace


def mlp_logits(spec: MlpSpec, params: dict[str, Array], x: Array, task: int | None = None) -> Array:
    return mlp_forward(spec, params, x, task).logits


# ---------------------------------------------------------------------------
# Recurrent model
# ---------------------------------------------------------------------------

GAUSSIAN_MSE = "gaussian_mse"
CATEGORICAL_MASKED = "categorical_masked"


@dataclass(frozen=True)
class RnnSpec:
    """Vanilla RNN: h_t = W z_t + noise, r_t = phi(h_t), outputs read from C r_t.

    z_t stacks the previous rates and the current input (plus the bias
    coordinate when `bias` is set). The readout may be replicated per task
    (`n_heads` > 1) for multi-head classification.
    """

    n_in: int
    n_rec: int
    n_out: int
    process_noise_std: float = 0.0
    loss_kind: str = GAUSSIAN_MSE
    activation: str = "relu"
    bias: bool = True
    n_heads: int = 1
    output_noise_cov: Array | None = None

    def __post_init__(self):
        if min(self.n_in, self.n_rec, self.n_out) < 1:
            raise ValueError("dimensions must be positive")
        if self.process_noise_std < 0:
            raise ValueError("process noise std must be nonnegative")
        if self.loss_kind not in (GAUSSIAN_MSE, CATEGORICAL_MASKED):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_z(self) -> int:
        return self.n_rec + self.n_in + (1 if self.bias else 0)

    @property
    def n_readout_in(self) -> int:
        return self.n_rec + (1 if self.bias else 0)

    def blocks(self) -> list[str]:
        return ["w"] + self.readout_blocks()

    def readout_blocks(self) -> list[str]:
        if self.n_heads == 1:
            return ["c"]
        return [f"c{h}" for h in range(self.n_heads)]

    def readout_for_task(self, task: int | None) -> str:
        if self.n_heads == 1:
            return "c"
        if task is None or not 0 <= task < self.n_heads:
            raise ValueError(f"multi-head readout needs a valid task index, got {task}")
        return f"c{task}"

    def block_shape(self, name: str) -> tuple[int, int]:
        if name == "w":
            return self.n_rec, self.n_z
        return self.n_out, self.n_readout_in

    def phi(self, h: Array) -> Array:
        return relu(h) if self.activation == "relu" else h

    def phi_grad(self, h: Array) -> Array:
        return relu_grad(h) if self.activation == "relu" else np.ones_like(h)


def init_rnn_params(spec: RnnSpec, rng: np.random.Generator, gain: float = 1.0) -> dict[str, Array]:
    """Orthogonal-ish recurrent block, He-scaled input/readout columns."""
    params = {}
    w = np.zeros((spec.n_rec, spec.n_z))
    q, _ = np.linalg.qr(rng.standard_normal((spec.n_rec, spec.n_rec)))
    w[:, : spec.n_rec] = gain * q
    w[:, spec.n_rec : spec.n_rec + spec.n_in] = rng.standard_normal(
        (spec.n_rec, spec.n_in)
    ) * np.sqrt(1.0 / spec.n_in)
    params["w"] = w
    for name in spec.readout_blocks():
        c = rng.standard_normal((spec.n_out, spec.n_readout_in)) * np.sqrt(1.0 / spec.n_rec)
        if spec.bias:
            c[:, -1] = 0.0
        params[name] = c
    return params


@dataclass
class SeqBatch:
    """A padded batch of sequences.

    targets: (B, T, n_out) floats for the Gaussian loss, (B, T) integer class
    labels for the categorical loss (values at masked steps are ignored).
    loss_mask marks the steps where the loss applies; lengths give each
    sequence's true (unpadded) number of steps.
    """

    inputs: Array
    targets: Array
    loss_mask: Array
    lengths: Array

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.loss_mask = np.asarray(self.loss_mask, dtype=float)
        self.lengths = np.asarray(self.lengths, dtype=int)

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]

    @property
    def max_steps(self) -> int:
        return self.inputs.shape[1]


@dataclass
class RnnTrace:
    """Time-major activity and adjoints recorded by forward/backward passes.

    Arrays are (B, T, .). `valid` marks real (unpadded) steps; adjoints are the
    gradients of each sequence's NLL (no 1/batch factor) and are zero wherever
    no loss signal reaches.
    """

    z: Array
    preacts: Array
    rates: Array
    outputs: Array
    valid: Array
    lengths: Array
    readout_block: str
    noise: Array | None = None
    adjoints: Array | None = None
    out_adjoints: Array | None = None
    loss_mask: Array | None = None


def rnn_forward(
    spec: RnnSpec,
    params: dict[str, Array],
    inputs: Array,
    lengths: Array,
    task: int | None = None,
    rng: np.random.Generator | None = None,
) -> RnnTrace:
    """Run the dynamics, recording z, pre-activations, rates, and outputs.

    Process noise is drawn here (when configured and an rng is supplied) and
    recorded in the trace so that backward passes differentiate the realized
    trajectory. Padded steps beyond each sequence's length are forced to zero.
    """
    inputs = np.asarray(inputs, dtype=float)
    batch, steps, _ = inputs.shape
    lengths = np.asarray(lengths, dtype=int)
    valid = np.arange(steps)[None, :] < lengths[:, None]
    w = params["w"]
    c = params[spec.readout_for_task(task)]

    noise = None
    if spec.process_noise_std > 0.0 and rng is not None:
        noise = spec.process_noise_std * rng.standard_normal((batch, steps, spec.n_rec))

    z = np.zeros((batch, steps, spec.n_z))
    preacts = np.zeros((batch, steps, spec.n_rec))
    rates = np.zeros((batch, steps, spec.n_rec))
    r_prev = np.zeros((batch, spec.n_rec))
    for t in range(steps):
        z_t = np.concatenate([r_prev, inputs[:, t]], axis=1)
        if spec.bias:
            z_t = append_ones(z_t)
        z_t = z_t * valid[:, t, None]
        h_t = z_t @ w.T
        if noise is not None:
            h_t = h_t + noise[:, t]
        h_t = h_t * valid[:, t, None]
        r_t = spec.phi(h_t)
        z[:, t], preacts[:, t], rates[:, t] = z_t, h_t, r_t
        r_prev = r_t
        if not np.all(np.isfinite(h_t)):
            raise FloatingPointError(f"non-finite activations at step {t}")

    readout_in = rates if not spec.bias else np.concatenate(
        [rates, np.ones((batch, steps, 1))], axis=2
    )
    outputs = readout_in @ c.T
    return RnnTrace(z, preacts, rates, outputs, valid.astype(float), lengths,
                    spec.readout_for_task(task), noise)


def _output_adjoints(spec: RnnSpec, trace: RnnTrace, targets: Array, loss_mask: Array) -> tuple[Array, Array]:
    """Per-sequence NLL contributions (B,) and per-step output adjoints (B, T, n_out)."""
    mask = np.asarray(loss_mask, dtype=float) * trace.valid
    if spec.loss_kind == GAUSSIAN_MSE:
        targets = np.asarray(targets, dtype=float)
        resid = trace.outputs - targets
        if spec.output_noise_cov is not None:
            prec = np.linalg.inv(spec.output_noise_cov)
            ybar = resid @ prec.T * mask[..., None]
            nll = 0.5 * np.einsum("bto,bto->b", resid * mask[..., None], resid @ prec.T)
        else:
            ybar = resid * mask[..., None]
            nll = 0.5 * np.einsum("bto,bto->b", resid, resid * mask[..., None])
        return nll, ybar
    labels = np.asarray(targets, dtype=int)
    probs = softmax(trace.outputs)
    logits = trace.outputs - trace.outputs.max(axis=2, keepdims=True)
    log_z = np.log(np.exp(logits).sum(axis=2))
    picked = np.take_along_axis(logits, labels[..., None], axis=2)[..., 0]
    nll = (mask * (log_z - picked)).sum(axis=1)
    ybar = (probs - one_hot(labels, spec.n_out)) * mask[..., None]
    return nll, ybar


def rnn_backward(
    spec: RnnSpec,
    params: dict[str, Array],
    trace: RnnTrace,
    targets: Array,
    loss_mask: Array,
) -> tuple[float, dict[str, Array]]:
    """Exact backpropagation through time for the masked mean loss.

    Returns (loss, grads) where loss is the batch mean of per-sequence NLLs;
    fills the trace with per-sequence adjoints h_bar, y_bar.
    """
    batch, steps = trace.valid.shape
    w = params["w"]
    c = params[trace.readout_block]
    nll, ybar = _output_adjoints(spec, trace, targets, loss_mask)
    loss = float(nll.mean())
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite sequence loss")

    c_r = c[:, : spec.n_rec]
    w_r = w[:, : spec.n_rec]
    hbar = np.zeros_like(trace.preacts)
    carry = np.zeros((batch, spec.n_rec))
    for t in reversed(range(steps)):
        rbar = ybar[:, t] @ c_r + carry
        hbar[:, t] = rbar * spec.phi_grad(trace.preacts[:, t]) * trace.valid[:, t, None]
        carry = hbar[:, t] @ w_r

    grads = {name: np.zeros_like(params[name]) for name in spec.blocks()}
    grads["w"] = np.einsum("btr,btz->rz", hbar, trace.z) / batch
    readout_in = trace.rates if not spec.bias else np.concatenate(
        [trace.rates, trace.valid[..., None]], axis=2
    )
    grads[trace.readout_block] = np.einsum("bto,btr->or", ybar, readout_in) / batch

    trace.adjoints = hbar
    trace.out_adjoints = ybar
    trace.loss_mask = np.asarray(loss_mask, dtype=float) * trace.valid
    return loss, grads


def rnn_forward_backward(
    spec: RnnSpec,
    params: dict[str, Array],
    batch: SeqBatch,
    task: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, Array], RnnTrace]:
    trace = rnn_forward(spec, params, batch.inputs, batch.lengths, task, rng)
    loss, grads = rnn_backward(spec, params, trace, batch.targets, batch.loss_mask)
    return loss, grads, trace


# ---------------------------------------------------------------------------
# Model-distribution sampling
# ---------------------------------------------------------------------------

def sample_mlp_targets(
    spec: MlpSpec,
    params: dict[str, Array],
    x: Array,
    rng: np.random.Generator,
    task: int | None = None,
) -> Array:
    """Class labels drawn from the model's softmax at the given inputs."""
    probs = mlp_forward(spec, params, x, task).probs
    return sample_categorical(probs, rng)


def sample_rnn_targets_from_trace(
    spec: RnnSpec,
    trace: RnnTrace,
    loss_mask: Array,
    rng: np.random.Generator,
) -> Array:
    """Targets drawn from the model's output distribution for a recorded pass.

    Gaussian: outputs plus output noise (identity covariance unless the spec
    carries one). Categorical: per-step draws from the output softmax; values
    at masked steps are arbitrary but fixed to draws as well for simplicity.
    """
    if spec.loss_kind == GAUSSIAN_MSE:
        eps = rng.standard_normal(trace.outputs.shape)
        if spec.output_noise_cov is not None:
            chol = np.linalg.cholesky(spec.output_noise_cov)
            eps = eps @ chol.T
        return trace.outputs + eps
    return sample_categorical(softmax(trace.outputs), rng)


def sample_model_outputs(spec, params, inputs, rng, lengths=None, task=None):
    """Sampled targets from the model distribution at the given inputs.

    Dispatches on the spec type: MLPs return (B,) class labels; RNNs return
    targets shaped like training targets for the spec's loss kind.
    """
    if isinstance(spec, MlpSpec):
        return sample_mlp_targets(spec, params, inputs, rng, task)
    if isinstance(spec, RnnSpec):
        if lengths is None:
            lengths = np.full(inputs.shape[0], inputs.shape[1])
        trace = rnn_forward(spec, params, inputs, lengths, task, rng)
        mask = trace.valid
        return sample_rnn_targets_from_trace(spec, trace, mask, rng)
    raise TypeError(f"unknown spec type {type(spec)!r}")
