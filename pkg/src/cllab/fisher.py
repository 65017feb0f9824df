"""Fisher information estimation.

Three estimators share one contract: targets are always drawn from the model's
own output distribution at the estimation inputs (never from empirical labels),
and adjoints are gradients of the per-sample negative log-likelihood, whose
sign squares away.

  - kfac_fisher_ffn / kfac_fisher_rnn: Kronecker-factored blocks, with the
    layer-input second moment on the left and the adjoint second moment on the
    right. For sequence models the factors are time-and-batch pooled second
    moments and the mean sequence length is folded into the left factor.
  - diag_fisher: per-parameter mean squared per-sample gradients.
  - exact_fisher_linear_rnn: a Monte-Carlo estimate of the full per-block
    Fisher of a small linear recurrent model, used as a validation oracle for
    the factored estimators. It carries its own miniature linear
    backpropagation-through-time, independent of the nets module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kron import KronFactorPair, symmetrize
from .nets import (
    GAUSSIAN_MSE,
    MlpSpec,
    RnnSpec,
    mlp_backward,
    mlp_forward,
    one_hot,
    rnn_backward,
    rnn_forward,
    sample_categorical,
    sample_rnn_targets_from_trace,
    softmax,
)

Array = np.ndarray

# Full linear-RNN Fishers are materialized densely; keep the block size sane.
MAX_EXACT_BLOCK_DIM = 2500


@dataclass
class FisherEstimate:
    """Per-block curvature: KronFactorPair (factored) or block-shaped array (diagonal).

    sample_count is the number of model-target draws that entered the estimate;
    Monte-Carlo tolerances downstream scale as 1/sqrt(sample_count). mean_steps
    is the average sequence length for recurrent estimates (already folded into
    the left factors).
    """

    blocks: dict[str, KronFactorPair | Array]
    sample_count: int
    mean_steps: float | None = None


def _passes_needed(n_samples: int, batch: int) -> int:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    return -(-n_samples // batch)


def kfac_fisher_ffn(
    spec: MlpSpec,
    params: dict[str, Array],
    inputs: Array,
    rng: np.random.Generator,
    n_samples: int,
    task: int | None = None,
) -> FisherEstimate:
    """Kronecker-factored Fisher of an MLP from model-sampled targets.

    For every block, left = E[z z^T] over layer inputs (bias coordinate
    included) and right = E[h_bar h_bar^T] over adjoints; heads not selected by
    `task` receive an exactly zero right factor.
    """
    inputs = np.asarray(inputs, dtype=float)
    batch = inputs.shape[0]
    passes = _passes_needed(n_samples, batch)
    total = passes * batch

    a_acc = {name: 0.0 for name in spec.blocks()}
    g_acc = {name: 0.0 for name in spec.blocks()}
    for _ in range(passes):
        trace = mlp_forward(spec, params, inputs, task)
        sampled = sample_categorical(trace.probs, rng)
        mlp_backward(spec, params, trace, sampled, task)
        for name in spec.blocks():
            z = trace.layer_inputs[name]
            a_acc[name] = a_acc[name] + z.T @ z
            if name in trace.adjoints:
                h_bar = trace.adjoints[name]
                g_acc[name] = g_acc[name] + h_bar.T @ h_bar

    blocks = {}
    for name in spec.blocks():
        out, fan = spec.block_shape(name)
        left = symmetrize(np.asarray(a_acc[name]) / total)
        right = np.zeros((out, out)) if np.isscalar(g_acc[name]) else symmetrize(
            g_acc[name] / total
        )
        blocks[name] = KronFactorPair(left, right)
    return FisherEstimate(blocks, sample_count=total)


def kfac_fisher_rnn(
    spec: RnnSpec,
    params: dict[str, Array],
    inputs: Array,
    lengths: Array,
    loss_mask: Array,
    rng: np.random.Generator,
    n_samples: int,
    task: int | None = None,
) -> FisherEstimate:
    """Kronecker-factored Fisher of the recurrent model from model-sampled targets.

    Second moments of z and h_bar (recurrent block) and of the readout input
    and y_bar (readout blocks) are pooled over batch and real time steps; the
    mean sequence length multiplies the left factors, so materializing a pair
    gives the per-sequence Fisher directly.
    """
    inputs = np.asarray(inputs, dtype=float)
    batch = inputs.shape[0]
    passes = _passes_needed(n_samples, batch)
    total = passes * batch
    readout = spec.readout_for_task(task)

    a_w = g_w = a_c = g_c = 0.0
    step_count = 0
    for _ in range(passes):
        trace = rnn_forward(spec, params, inputs, lengths, task, rng)
        targets = sample_rnn_targets_from_trace(spec, trace, loss_mask, rng)
        rnn_backward(spec, params, trace, targets, loss_mask)
        valid = trace.valid
        step_count += int(valid.sum())
        a_w = a_w + np.einsum("btz,bty->zy", trace.z, trace.z)
        g_w = g_w + np.einsum("btr,bts->rs", trace.adjoints, trace.adjoints)
        readout_in = trace.rates if not spec.bias else np.concatenate(
            [trace.rates, valid[..., None]], axis=2
        )
        a_c = a_c + np.einsum("btr,bts->rs", readout_in, readout_in)
        g_c = g_c + np.einsum("bto,btp->op", trace.out_adjoints, trace.out_adjoints)

    mean_steps = step_count / total
    blocks: dict[str, KronFactorPair | Array] = {
        "w": KronFactorPair(
            symmetrize(mean_steps * a_w / step_count), symmetrize(g_w / step_count)
        )
    }
    a_c_hat = symmetrize(mean_steps * a_c / step_count)
    for name in spec.readout_blocks():
        right = symmetrize(g_c / step_count) if name == readout else np.zeros(
            (spec.n_out, spec.n_out)
        )
        blocks[name] = KronFactorPair(a_c_hat.copy(), right)
    return FisherEstimate(blocks, sample_count=total, mean_steps=mean_steps)


def diag_fisher(
    spec,
    params: dict[str, Array],
    inputs: Array,
    rng: np.random.Generator,
    n_samples: int,
    task: int | None = None,
    lengths: Array | None = None,
    loss_mask: Array | None = None,
) -> FisherEstimate:
    """Per-parameter mean squared per-sample gradients under model-sampled targets.

    Per-sequence gradients sum over time before squaring. Dispatches on the
    spec type.
    """
    inputs = np.asarray(inputs, dtype=float)
    batch = inputs.shape[0]
    passes = _passes_needed(n_samples, batch)
    total = passes * batch

    acc = {name: np.zeros(params[name].shape) for name in params}
    if isinstance(spec, MlpSpec):
        for _ in range(passes):
            trace = mlp_forward(spec, params, inputs, task)
            sampled = sample_categorical(trace.probs, rng)
            mlp_backward(spec, params, trace, sampled, task)
            for name in spec.blocks():
                if name in trace.adjoints:
                    h_bar = trace.adjoints[name]
                    z = trace.layer_inputs[name]
                    acc[name] += np.einsum("bo,bi->oi", h_bar**2, z**2)
    elif isinstance(spec, RnnSpec):
        if lengths is None or loss_mask is None:
            raise ValueError("recurrent diagonal Fisher needs lengths and loss_mask")
        for _ in range(passes):
            trace = rnn_forward(spec, params, inputs, lengths, task, rng)
            targets = sample_rnn_targets_from_trace(spec, trace, loss_mask, rng)
            rnn_backward(spec, params, trace, targets, loss_mask)
            per_seq_w = np.einsum("btr,btz->brz", trace.adjoints, trace.z)
            acc["w"] += (per_seq_w**2).sum(axis=0)
            readout_in = trace.rates if not spec.bias else np.concatenate(
                [trace.rates, trace.valid[..., None]], axis=2
            )
            per_seq_c = np.einsum("bto,btr->bor", trace.out_adjoints, readout_in)
            acc[spec.readout_for_task(task)] += (per_seq_c**2).sum(axis=0)
    else:
        raise TypeError(f"unknown spec type {type(spec)!r}")

    blocks = {name: acc[name] / total for name in acc}
    return FisherEstimate(blocks, sample_count=total)


def exact_fisher_linear_rnn(
    w: Array,
    c: Array,
    n_in: int,
    likelihood: str,
    draw_inputs,
    n_steps: int,
    n_mc: int,
    rng: np.random.Generator,
    output_noise_cov: Array | None = None,
    process_noise_std: float = 0.0,
) -> dict[str, Array]:
    """Monte-Carlo estimate of the full per-block Fisher of a linear RNN.

    The model is h_t = W z_t + xi_t with identity activation,
    z_t = (r_{t-1}, x_t) and outputs read from C r_t under a Gaussian
    (covariance `output_noise_cov`, identity by default) or categorical
    likelihood. Targets are drawn from the model; gradients come from a
    self-contained linear backpropagation through time. Gradient vectors are
    ordered as z (x) adjoint so the result is directly comparable to
    materialized Kronecker-factored estimates. Returned matrices are
    symmetrized; Monte-Carlo error shrinks as 1/sqrt(n_mc).
    """
    if likelihood not in ("gaussian", "categorical"):
        raise ValueError(f"unknown likelihood {likelihood!r}")
    n_rec, n_z = w.shape
    n_out = c.shape[0]
    if n_rec * n_z > MAX_EXACT_BLOCK_DIM:
        raise ValueError(
            f"recurrent block dimension {n_rec * n_z} exceeds {MAX_EXACT_BLOCK_DIM}"
        )
    if n_z != n_rec + n_in:
        raise ValueError("expected W of shape (n_rec, n_rec + n_in)")

    prec = chol = None
    if likelihood == "gaussian":
        cov = np.eye(n_out) if output_noise_cov is None else output_noise_cov
        prec = np.linalg.inv(cov)
        chol = np.linalg.cholesky(cov)

    f_w = np.zeros((n_rec * n_z, n_rec * n_z))
    f_c = np.zeros((n_out * n_rec, n_out * n_rec))
    w_r = w[:, :n_rec]
    for _ in range(n_mc):
        x = np.asarray(draw_inputs(rng), dtype=float)
        zs = np.zeros((n_steps, n_z))
        rs = np.zeros((n_steps, n_rec))
        r_prev = np.zeros(n_rec)
        for t in range(n_steps):
            z_t = np.concatenate([r_prev, x[t]])
            h_t = w @ z_t
            if process_noise_std > 0.0:
                h_t = h_t + process_noise_std * rng.standard_normal(n_rec)
            zs[t], rs[t] = z_t, h_t
            r_prev = h_t
        outs = rs @ c.T
        if likelihood == "gaussian":
            y = outs + rng.standard_normal((n_steps, n_out)) @ chol.T
            ybar = (y - outs) @ prec.T
        else:
            probs = softmax(outs)
            y = sample_categorical(probs, rng)
            ybar = one_hot(y, n_out) - probs

        hbar = np.zeros((n_steps, n_rec))
        carry = np.zeros(n_rec)
        for t in reversed(range(n_steps)):
            hbar[t] = ybar[t] @ c + carry
            carry = hbar[t] @ w_r

        g_w = sum(np.kron(zs[t], hbar[t]) for t in range(n_steps))
        g_c = sum(np.kron(rs[t], ybar[t]) for t in range(n_steps))
        f_w += np.outer(g_w, g_w)
        f_c += np.outer(g_c, g_c)

    return {"w": symmetrize(f_w / n_mc), "c": symmetrize(f_c / n_mc)}
