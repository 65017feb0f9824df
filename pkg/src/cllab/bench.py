"""Experiment harness: continual training loops, evaluation, comparison suites.

The runner owns all randomness: a single experiment seed derives separate
streams for task construction, parameter initialization, and training, so two
methods on the same seed see identical task sequences, initializations, and
data order (and a rerun is byte-identical).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import learners, nets, tasks
from .fisher import diag_fisher, exact_fisher_linear_rnn, kfac_fisher_rnn, kfac_fisher_ffn
from .kron import (
    KronFactorPair,
    full_kl_precision,
    kl_sum,
    materialize_kron,
    mse_sum,
    naive_factor_sum,
    scaled_additive_sum,
    scaled_kl,
    symmetrize,
)
from .learners import LearnerConfig, LearnerState
from .nets import MlpSpec, RnnSpec, SeqBatch
from .tasks import Task, TaskSequence, Toy2dProblem, toy2d_eval

Array = np.ndarray

DATA_DIR_ENV = "CLLAB_DATA"

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


# ---------------------------------------------------------------------------
# Configuration and metrics
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    task_set: str = "split_mnist_task"
    method: str = learners.NCL
    seed: int = 0
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    eval_batch_size: int = 1024
    fisher_samples: int | None = None  # defaults to eval_batch_size
    data_dir: str | None = None
    hidden: tuple[int, ...] = (400, 400)
    n_rec: int = 64
    task_order: list[int] | None = None
    output_path: str | None = None
    trace_every: int = 0

    def resolve_data_dir(self) -> str:
        path = self.data_dir or os.environ.get(DATA_DIR_ENV, "")
        if not path:
            raise FileNotFoundError(
                f"no data directory configured (set data_dir or ${DATA_DIR_ENV})"
            )
        return path


@dataclass(frozen=True)
class MetricsRecord:
    method: str
    task_set: str
    seed: int
    task_learned: int
    task_eval: int
    metric: str
    value: float


CSV_HEADER = "method,task_set,seed,task_learned,task_eval,metric,value"


def emit_metrics(records: list[MetricsRecord], path) -> None:
    """Append records as CSV, writing the header only on a fresh file."""
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a") as fh:
        if fresh:
            fh.write(CSV_HEADER + "\n")
        for r in records:
            fh.write(
                f"{r.method},{r.task_set},{r.seed},{r.task_learned},"
                f"{r.task_eval},{r.metric},{r.value:.17g}\n"
            )


def read_metrics(path) -> list[MetricsRecord]:
    records = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            method, task_set, seed, learned, ev, metric, value = line.strip().split(",")
            records.append(
                MetricsRecord(method, task_set, int(seed), int(learned), int(ev),
                              metric, float(value))
            )
    return records


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def preset_learner(task_set: str, method: str) -> LearnerConfig:
    """Published defaults per task family and method."""
    adam_family = method in (learners.KFAC, learners.EWC)
    if task_set.startswith("split_"):
        return LearnerConfig(
            method=method,
            learning_rate=0.001 if adam_family else 0.05,
            momentum=0.9,
            alpha=1e-10 if method == learners.NCL else 1e-2,
            prior_scale=(1.0 / 12000) ** 0.5,
            batch_size=256,
            iters_per_task=2000,
        )
    if task_set == "sr":
        samples = 100_000
        return LearnerConfig(
            method=method,
            learning_rate=0.001 if adam_family else 0.005,
            momentum=0.9,
            alpha=1e-5 if method in (learners.NCL, learners.NVCL) else 1e-3,
            prior_scale=samples**-0.5,
            batch_size=32,
            iters_per_task=samples // 32,
        )
    if task_set == "smnist":
        samples = 20_000
        return LearnerConfig(
            method=method,
            learning_rate=0.001 if adam_family else 0.01,
            momentum=0.9,
            alpha=1e-5 if method in (learners.NCL, learners.NVCL) else 1e-3,
            prior_scale=samples**-0.5,
            batch_size=64,
            iters_per_task=samples // 64,
        )
    return LearnerConfig(method=method)


# ---------------------------------------------------------------------------
# Task-sequence construction
# ---------------------------------------------------------------------------

def build_task_sequence(config: ExperimentConfig, rng: np.random.Generator) -> TaskSequence:
    name = config.task_set
    if name.startswith("split_mnist_"):
        protocol = name.rsplit("_", 1)[1]
        root = config.resolve_data_dir()

        def find(stem):
            for suffix in ("", ".gz"):
                path = os.path.join(root, stem + suffix)
                if os.path.exists(path):
                    return path
            raise FileNotFoundError(f"missing {stem}[.gz] under {root}")

        return tasks.load_split_mnist_tasks(
            find(MNIST_FILES["train_images"]),
            find(MNIST_FILES["train_labels"]),
            find(MNIST_FILES["test_images"]),
            find(MNIST_FILES["test_labels"]),
            rng,
            protocol,
            hidden=config.hidden,
        )
    if name.startswith("split_digits_"):
        protocol = name.rsplit("_", 1)[1]
        from sklearn.datasets import load_digits

        bunch = load_digits()
        x = bunch.data / 16.0
        y = bunch.target
        split = int(0.8 * len(x))
        order = np.random.default_rng(0).permutation(len(x))
        tr, te = order[:split], order[split:]
        return tasks.split_digits_tasks(
            x[tr], y[tr], x[te], y[te], rng, protocol,
            hidden=config.hidden, name="split_digits",
        )
    if name == "sr":
        return tasks.sr_task_sequence(
            n_rec=config.n_rec, eval_seed=int(rng.integers(2**31))
        )
    if name == "smnist":
        root = config.resolve_data_dir()
        path = os.path.join(root, "smnist_strokes.jsonl")
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing stroke file {path}")
        return tasks.smnist_task_sequence(
            path, rng, n_rec=config.n_rec, task_order=config.task_order
        )
    raise ValueError(f"unknown task set {name!r}")


# ---------------------------------------------------------------------------
# Model plumbing shared by the loops
# ---------------------------------------------------------------------------

def init_model_params(model, rng):
    if isinstance(model, MlpSpec):
        return nets.init_mlp_params(model, rng)
    return nets.init_rnn_params(model, rng, gain=0.9)


def block_shapes(model) -> dict[str, tuple[int, int]]:
    return {name: model.block_shape(name) for name in model.blocks()}


def task_forward_backward(model, params, batch, task: Task):
    if task.kind == "mlp":
        x, y = batch
        return nets.mlp_forward_backward(model, params, x, y, task.head)
    return nets.rnn_forward_backward(model, params, batch, task.head)


def estimate_task_fisher(model, params, task: Task, rng, n_samples, batch_size, diagonal):
    """Curvature of the just-finished task on a fresh estimation batch."""
    batch = task.sample_batch(rng, batch_size)
    if task.kind == "mlp":
        x, _ = batch
        if diagonal:
            return diag_fisher(model, params, x, rng, n_samples, task=task.head)
        return kfac_fisher_ffn(model, params, x, rng, n_samples, task=task.head)
    if diagonal:
        return diag_fisher(
            model, params, batch.inputs, rng, n_samples, task=task.head,
            lengths=batch.lengths, loss_mask=batch.loss_mask,
        )
    return kfac_fisher_rnn(
        model, params, batch.inputs, batch.lengths, batch.loss_mask, rng,
        n_samples, task=task.head,
    )


def activity_moments(model, params, task: Task, rng, batch_size) -> dict[str, Array]:
    """Per-block input second moments on a fresh batch (projection methods)."""
    batch = task.sample_batch(rng, batch_size)
    moments = {}
    if task.kind == "mlp":
        x, _ = batch
        trace = nets.mlp_forward(model, params, x, task.head)
        for name in model.blocks():
            z = trace.layer_inputs[name]
            moments[name] = symmetrize(z.T @ z / len(z))
        return moments
    trace = nets.rnn_forward(model, params, batch.inputs, batch.lengths, task.head)
    steps = trace.valid.sum()
    moments["w"] = symmetrize(np.einsum("btz,bty->zy", trace.z, trace.z) / steps)
    readout_in = trace.rates if not model.bias else np.concatenate(
        [trace.rates, trace.valid[..., None]], axis=2
    )
    r_moment = symmetrize(np.einsum("btr,bts->rs", readout_in, readout_in) / steps)
    for name in model.readout_blocks():
        moments[name] = r_moment
    return moments


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate_task(model, params, task: Task) -> list[tuple[str, float]]:
    """Metrics on the task's fixed eval set.

    Classification yields accuracy (argmax at the scored step) and mean NLL;
    regression yields the per-element masked squared error.
    """
    if task.kind == "mlp":
        x, labels = task.eval_data
        logits = nets.mlp_logits(model, params, x, task.head)
        accuracy = float((logits.argmax(axis=1) == labels).mean())
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        nll = float(-log_probs[np.arange(len(labels)), labels].mean())
        return [("accuracy", accuracy), ("nll", nll)]

    batch: SeqBatch = task.eval_data
    trace = nets.rnn_forward(model, params, batch.inputs, batch.lengths, task.head)
    if task.loss_kind == nets.GAUSSIAN_MSE:
        mask = batch.loss_mask * trace.valid
        resid = (trace.outputs - batch.targets) ** 2 * mask[..., None]
        mse = float(resid.sum() / (mask.sum() * model.n_out))
        return [("mse_loss", mse)]
    last = batch.lengths - 1
    rows = np.arange(batch.batch_size)
    final_logits = trace.outputs[rows, last]
    labels = np.asarray(batch.targets)[rows, 0]
    accuracy = float((final_logits.argmax(axis=1) == labels).mean())
    shifted = final_logits - final_logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    nll = float(-log_probs[rows, labels].mean())
    return [("accuracy", accuracy), ("nll", nll)]


def evaluate_all_tasks(model, params, seq: TaskSequence, learned: int) -> list[tuple[int, str, float]]:
    """Metrics for every task j <= learned (1-indexed)."""
    out = []
    for j in range(learned):
        for metric, value in evaluate_task(model, params, seq.tasks[j]):
            out.append((j + 1, metric, value))
    return out


# ---------------------------------------------------------------------------
# The continual-learning loop
# ---------------------------------------------------------------------------

def run_continual_experiment(
    config: ExperimentConfig, task_sequence: TaskSequence | None = None
) -> tuple[list[MetricsRecord], list[MetricsRecord]]:
    """Train through the task sequence; returns (records, trace_records).

    Per task: method begin hook, a fixed budget of minibatch steps, method
    finish hook (curvature / activity-moment / buffer update), then evaluation
    on all tasks learned so far.
    """
    method = config.method
    tasks_rng = np.random.default_rng((config.seed, 0))
    init_rng = np.random.default_rng((config.seed, 1))
    train_rng = np.random.default_rng((config.seed, 2))

    seq = task_sequence if task_sequence is not None else build_task_sequence(config, tasks_rng)
    model = seq.model
    params = init_model_params(model, init_rng)
    diagonal = method == learners.EWC
    prior = learners.init_prior(block_shapes(model), config.learner.prior_scale, diagonal)
    state = learners.make_state(params, prior)
    lc = replace(config.learner, method=method)
    fisher_samples = config.fisher_samples or config.eval_batch_size

    records: list[MetricsRecord] = []
    trace_records: list[MetricsRecord] = []

    def record(k, entries):
        for j, metric, value in entries:
            records.append(
                MetricsRecord(method, config.task_set, config.seed, k, j, metric, value)
            )

    for k, task in enumerate(seq.tasks, start=1):
        # begin-task hook
        if method == learners.NCL:
            learners.ncl_begin_task(state, lc.alpha)
        elif method in learners.PROJECTION_VARIANTS:
            learners.projected_begin_task(state, lc, method)
        elif method in (learners.KFAC, learners.EWC):
            state.adam_m, state.adam_v, state.adam_t = {}, {}, 0
        elif method == learners.NVCL:
            learners.nvcl_init_belief(state)
        elif method in (learners.NONE, learners.REPLAY):
            state.momentum = {n: np.zeros_like(p) for n, p in state.params.items()}
        else:
            raise ValueError(f"unknown method {method!r}")

        for it in range(lc.iters_per_task):
            batch = task.sample_batch(train_rng, lc.batch_size)
            if method == learners.NVCL:
                def grad_fn(theta):
                    return task_forward_backward(model, theta, batch, task)[1]

                def fisher_fn(theta):
                    est = _nvcl_fisher(model, theta, batch, task, train_rng)
                    return est

                learners.nvcl_step(state, grad_fn, fisher_fn, lc, train_rng)
                loss = np.nan
            else:
                loss, grads, _ = task_forward_backward(model, state.params, batch, task)
                if not np.isfinite(loss):
                    raise FloatingPointError(f"non-finite loss at task {k}, iteration {it}")
                if method == learners.NCL:
                    learners.ncl_step(state, grads, lc)
                elif method in learners.PROJECTION_VARIANTS:
                    learners.projected_step(state, grads, lc, method)
                elif method in (learners.KFAC, learners.EWC):
                    learners.adam_weightreg_step(state, grads, lc)
                elif method == learners.REPLAY:
                    past = _replay_gradients(model, state, train_rng, lc)
                    learners.replay_step(state, grads, past, k, lc)
                else:
                    learners.sgd_step(state, grads, lc)
            if config.trace_every and (it + 1) % config.trace_every == 0:
                trace_records.append(
                    MetricsRecord(method, config.task_set, config.seed, k, it + 1,
                                  "train_loss", float(loss))
                )

        # finish-task hook
        if method in (learners.NCL, learners.KFAC, learners.EWC):
            fisher = estimate_task_fisher(
                model, state.params, task, train_rng, fisher_samples,
                config.eval_batch_size, diagonal,
            )
            learners.ncl_finish_task(state, fisher)
        elif method in learners.PROJECTION_VARIANTS:
            moments = activity_moments(
                model, state.params, task, train_rng, config.eval_batch_size
            )
            learners.projected_finish_task(state, moments)
        elif method == learners.REPLAY:
            state.replay_buffers.append(
                (task, task.sample_batch(train_rng, lc.replay_buffer_size))
            )
        elif method == learners.NVCL:
            learners.nvcl_finish_task(state)

        record(k, evaluate_all_tasks(model, state.params, seq, k))

    return records, trace_records


def _nvcl_fisher(model, theta, batch, task, rng):
    if task.kind == "mlp":
        x, _ = batch
        est = kfac_fisher_ffn(model, theta, x, rng, len(x), task=task.head)
    else:
        est = kfac_fisher_rnn(
            model, theta, batch.inputs, batch.lengths, batch.loss_mask, rng,
            batch.batch_size, task=task.head,
        )
    return est.blocks


def _replay_gradients(model, state: LearnerState, rng, lc: LearnerConfig):
    """Mean over past tasks of each task's minibatch NLL gradient."""
    if not state.replay_buffers:
        return None
    acc: dict[str, Array] = {}
    for task, stored in state.replay_buffers:
        if task.kind == "mlp":
            x, y = stored
            take = rng.integers(0, len(x), size=min(lc.batch_size, len(x)))
            _, grads, _ = nets.mlp_forward_backward(model, state.params, x[take], y[take], task.head)
        else:
            take = rng.integers(0, stored.batch_size, size=min(lc.batch_size, stored.batch_size))
            sub = SeqBatch(
                stored.inputs[take], stored.targets[take],
                stored.loss_mask[take], stored.lengths[take],
            )
            _, grads, _ = nets.rnn_forward_backward(model, state.params, sub, task.head)
        for name, g in grads.items():
            acc[name] = acc.get(name, 0.0) + g / len(state.replay_buffers)
    return acc


# ---------------------------------------------------------------------------
# Comparison suite: factored approximations vs the exact Fisher
# ---------------------------------------------------------------------------

def _floored(f: Array, eps: float = 1e-8) -> Array:
    d = f.shape[0]
    return f + eps * (np.trace(f) / d) * np.eye(d)


def _random_rotation(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def compare_fisher_approximations(
    seed: int = 0,
    n_rec: int = 10,
    n_in: int = 3,
    n_out: int = 4,
    steps: int = 8,
    n_mc: int = 20_000,
    n_rotations: int = 500,
    alpha: float = 1e-3,
) -> dict:
    """Scale-invariant KL of each factored approximation to the exact Fisher.

    A random linear RNN is evaluated under a non-diagonal Gaussian and a
    categorical likelihood; for blocks W and C the table compares the
    Kronecker-factored estimate, the diagonal estimate, the precisions implied
    by the row-space and row+column-space projection methods, and the mean
    over random rotations of the exact Fisher itself.
    """
    rng = np.random.default_rng(seed)
    w = np.zeros((n_rec, n_rec + n_in))
    q, _ = np.linalg.qr(rng.standard_normal((n_rec, n_rec)))
    w[:, :n_rec] = 0.7 * q
    w[:, n_rec:] = rng.standard_normal((n_rec, n_in)) / np.sqrt(n_in)
    c = rng.standard_normal((n_out, n_rec)) / np.sqrt(n_rec)
    mix = rng.standard_normal((n_out, n_out)) / np.sqrt(n_out)
    sigma_y = symmetrize(mix @ mix.T + 0.5 * np.eye(n_out))

    inputs = rng.standard_normal((256, steps, n_in))
    lengths = np.full(256, steps)
    mask = np.ones((256, steps))

    results: dict = {}
    for likelihood in ("gaussian", "categorical"):
        spec = RnnSpec(
            n_in=n_in, n_rec=n_rec, n_out=n_out, activation="linear", bias=False,
            loss_kind=nets.GAUSSIAN_MSE if likelihood == "gaussian" else nets.CATEGORICAL_MASKED,
            output_noise_cov=sigma_y if likelihood == "gaussian" else None,
        )
        params = {"w": w, "c": c}
        exact = exact_fisher_linear_rnn(
            w, c, n_in, likelihood, lambda r: r.standard_normal((steps, n_in)),
            steps, n_mc, np.random.default_rng((seed, 1)),
            output_noise_cov=sigma_y if likelihood == "gaussian" else None,
        )
        kfac = kfac_fisher_rnn(
            spec, params, inputs, lengths, mask, np.random.default_rng((seed, 2)), n_mc
        )
        diag = diag_fisher(
            spec, params, inputs, np.random.default_rng((seed, 3)), n_mc,
            lengths=lengths, loss_mask=mask,
        )
        trace = nets.rnn_forward(spec, params, inputs, lengths)
        n_steps_total = trace.valid.sum()
        z_moment = symmetrize(np.einsum("btz,bty->zy", trace.z, trace.z) / n_steps_total)
        r_moment = symmetrize(
            np.einsum("btr,bts->rs", trace.rates, trace.rates) / n_steps_total
        )

        implied = {
            "w": {
                "owm_implied": np.kron(z_moment + alpha * np.eye(len(z_moment)), np.eye(n_rec)),
                "dowm_implied": np.kron(
                    z_moment + alpha * np.eye(len(z_moment)),
                    w @ z_moment @ w.T + alpha * np.eye(n_rec),
                ),
            },
            "c": {
                "owm_implied": np.kron(r_moment + alpha * np.eye(n_rec), np.eye(n_out)),
                "dowm_implied": np.kron(
                    r_moment + alpha * np.eye(n_rec),
                    c @ r_moment @ c.T + alpha * np.eye(n_out),
                ),
            },
        }

        table: dict = {}
        rot_rng = np.random.default_rng((seed, 4))
        for block in ("w", "c"):
            f_exact = _floored(exact[block])
            entries = {
                "kfac": scaled_kl(_floored(materialize_kron(kfac.blocks[block])), f_exact),
                "diag": scaled_kl(
                    _floored(np.diag(materialize_kron_diag(diag.blocks[block]))), f_exact
                ),
                "owm_implied": scaled_kl(_floored(implied[block]["owm_implied"]), f_exact),
                "dowm_implied": scaled_kl(_floored(implied[block]["dowm_implied"]), f_exact),
            }
            rotations = [
                scaled_kl(_floored(r_ @ exact[block] @ r_.T), f_exact)
                for r_ in (_random_rotation(rot_rng, f_exact.shape[0]) for _ in range(n_rotations))
            ]
            entries["rotation_baseline"] = float(np.mean(rotations))
            table[block] = entries
        results[likelihood] = table
    return results


def materialize_kron_diag(diag_block: Array) -> Array:
    """Flatten a block-shaped diagonal-Fisher array into the z (x) adjoint order."""
    return np.asarray(diag_block).T.reshape(-1)


# ---------------------------------------------------------------------------
# Comparison suite: Kronecker-sum approximations over a Fisher sequence
# ---------------------------------------------------------------------------

def compare_kron_sums(pairs: list[KronFactorPair], floor: float = 1e-9) -> list[dict]:
    """Accumulate a Fisher sequence with each approximation and score it.

    Returns one row per task index k >= 2 and method, with the Pearson
    correlation to the materialized true sum, the full KL, and the
    scale-optimized KL. At k = 1 every method is exact.
    """
    if not pairs:
        raise ValueError("need at least one factor pair")
    methods = {
        "naive": naive_factor_sum,
        "scaled_additive": scaled_additive_sum,
        "mse": mse_sum,
        "kl": kl_sum,
    }
    running = {m: pairs[0] for m in methods}
    true_sum = materialize_kron(pairs[0])
    d = true_sum.shape[0]
    rows = []
    for k, pair in enumerate(pairs[1:], start=2):
        true_sum = true_sum + materialize_kron(pair)
        for method, f in methods.items():
            acc = running[method]
            acc = f(acc.left, acc.right, pair.left, pair.right)
            running[method] = acc
            approx = materialize_kron(acc)
            corr = float(np.corrcoef(approx.ravel(), true_sum.ravel())[0, 1])
            ridge = floor * np.trace(true_sum) / d * np.eye(d)
            rows.append(
                {
                    "k": k,
                    "method": method,
                    "correlation": corr,
                    "full_kl": full_kl_precision(approx + ridge, true_sum + ridge),
                    "scaled_kl": scaled_kl(approx + ridge, true_sum + ridge),
                }
            )
    return rows


def random_fisher_sequence(
    seed: int, n_tasks: int = 5, n: int = 5, m: int = 5
) -> list[KronFactorPair]:
    """Random PSD factor pairs standing in for a sequence of task Fishers."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_tasks):
        g1 = rng.standard_normal((n, n + 2))
        g2 = rng.standard_normal((m, m + 2))
        out.append(KronFactorPair(g1 @ g1.T / (n + 2), g2 @ g2.T / (m + 2)))
    return out


def network_fisher_sequence(seed: int, n_tasks: int = 4, n_rec: int = 6) -> list[KronFactorPair]:
    """Recurrent-block Fisher pairs from random RNNs, one per task."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_tasks):
        spec = RnnSpec(n_in=2, n_rec=n_rec, n_out=2, bias=False)
        params = nets.init_rnn_params(spec, rng, gain=0.7)
        inputs = rng.standard_normal((64, 6, 2))
        est = kfac_fisher_rnn(
            spec, params, inputs, np.full(64, 6), np.ones((64, 6)), rng, 512
        )
        pairs.append(est.blocks["w"])
    return pairs


# ---------------------------------------------------------------------------
# Exactly solvable trajectories
# ---------------------------------------------------------------------------

def toy2d_trajectories(
    problem: Toy2dProblem | None = None,
    nonconvex: bool = False,
    learning_rate: float = 0.01,
    iters: int = 6000,
) -> dict[str, Array]:
    """Second-task trajectories of the three update rules from the task-1 optimum.

    Rules: plain descent on the posterior objective ("laplace"), descent
    preconditioned by the first task's inverse curvature with a pull toward
    its optimum ("ncl"), and the same preconditioned rule without the pull
    ("projected"). Rows record (theta_x, theta_y, loss1, loss2, loss1+loss2).
    """
    problem = problem or Toy2dProblem()
    q1_inv = np.linalg.inv(problem.q1)
    out = {}
    for rule in ("laplace", "ncl", "projected"):
        theta = problem.theta1.astype(float).copy()
        rows = np.zeros((iters + 1, 5))
        for i in range(iters + 1):
            l1, g1, l2, g2 = toy2d_eval(problem, theta, nonconvex)
            rows[i] = (theta[0], theta[1], l1, l2, l1 + l2)
            if i == iters:
                break
            if rule == "laplace":
                step = g1 + g2
            elif rule == "ncl":
                step = (theta - problem.theta1) + q1_inv @ g2
            else:
                step = q1_inv @ g2
            theta = theta - learning_rate * step
        out[rule] = rows
    return out
