"""Task generators and dataset ingestion.

Provides the exactly-solvable 2-D two-task landscape, six stimulus-response
sequence tasks, a 15-task stroke-digit benchmark built from three transformed
digit sets, and split digit-image classification in task-, domain-, and
class-incremental protocols.

File formats:
  - digit images/labels: big-endian IDX (magic 0x00000803 / 0x00000801),
    optionally gzip-compressed;
  - stroke sequences: JSON lines, one digit per line, with integer fields
    dx, dy, eos, eod (parallel arrays), a "label" digit, and an optional
    "split" of "train"/"test". The first entry of each sequence encodes the
    absolute pen-start location and is dropped on load.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .nets import CATEGORICAL_MASKED, GAUSSIAN_MSE, HeadMode, MlpSpec, RnnSpec, SeqBatch
from . import nets

Array = np.ndarray

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


# ---------------------------------------------------------------------------
# Exactly solvable 2-D landscape
# ---------------------------------------------------------------------------

def rotation_matrix(phi: float) -> Array:
    return np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])


@dataclass(frozen=True)
class Toy2dProblem:
    """Two quadratic losses with rotated anisotropic curvature.

    The optional Gaussian bump (amplitude, center, curvature) makes the second
    loss non-convex; the default geometry places the bump between the first
    task's optimum and the second task's, creating a second local optimum of
    the combined loss.
    """

    theta1: Array = field(default_factory=lambda: np.array([3.0, -6.0]))
    theta2: Array = field(default_factory=lambda: np.array([3.0, 6.0]))
    phi1: float = -np.pi / 6
    phi2: float = np.pi / 6
    zeta: float = 5.5
    bump_amplitude: float = 20.0
    bump_center: Array = field(default_factory=lambda: np.array([6.0, 3.0]))
    bump_curvature: Array = field(default_factory=lambda: 2.0 * np.eye(2))

    @property
    def q1(self) -> Array:
        r = rotation_matrix(self.phi1)
        return r @ np.diag([1.0, self.zeta]) @ r.T

    @property
    def q2(self) -> Array:
        r = rotation_matrix(self.phi2)
        return r @ np.diag([2.0, self.zeta]) @ r.T

    def combined_optimum(self) -> Array:
        """argmin of the convex combined loss, from the 2x2 linear solve."""
        return np.linalg.solve(
            self.q1 + self.q2, self.q1 @ self.theta1 + self.q2 @ self.theta2
        )


def toy2d_eval(
    problem: Toy2dProblem, theta: Array, nonconvex: bool = False
) -> tuple[float, Array, float, Array]:
    """Losses and gradients of both tasks at theta.

    Task 1: 0.5 (theta-theta1)^T Q1 (theta-theta1). Task 2 adds, when
    nonconvex, a - a exp(-0.5 (theta-v)^T Qv (theta-v)) whose gradient is
    Qv (theta-v) times that Gaussian.
    """
    theta = np.asarray(theta, dtype=float)
    d1 = theta - problem.theta1
    d2 = theta - problem.theta2
    l1 = 0.5 * d1 @ problem.q1 @ d1
    g1 = problem.q1 @ d1
    l2 = 0.5 * d2 @ problem.q2 @ d2
    g2 = problem.q2 @ d2
    if nonconvex:
        dv = theta - problem.bump_center
        gauss = problem.bump_amplitude * np.exp(-0.5 * dv @ problem.bump_curvature @ dv)
        l2 += problem.bump_amplitude - gauss
        g2 = g2 + gauss * (problem.bump_curvature @ dv)
    return float(l1), g1, float(l2), g2


# ---------------------------------------------------------------------------
# Task containers
# ---------------------------------------------------------------------------

@dataclass
class Task:
    """One continual-learning task: a train-batch sampler plus a fixed eval set."""

    name: str
    head: int | None
    kind: str  # "mlp" or "rnn"
    loss_kind: str
    sample_batch: Callable[[np.random.Generator, int], object]
    eval_data: object  # (x, labels) for MLPs, SeqBatch for RNNs


@dataclass
class TaskSequence:
    """Ordered tasks plus the model specification they are trained on."""

    name: str
    tasks: list[Task]
    model: MlpSpec | RnnSpec


# ---------------------------------------------------------------------------
# Stimulus-response tasks
# ---------------------------------------------------------------------------

SR_TASK_NAMES = ("fdgo", "fdanti", "delaygo", "delayanti", "dm1", "dm2")
SR_N_TASKS = 6
# channels: ring1 (cos, sin), ring2 (cos, sin), fixation, 6-way task cue
SR_N_IN = 2 + 2 + 1 + SR_N_TASKS
SR_N_OUT = 3  # fixation output + (cos, sin) response


@dataclass(frozen=True)
class SrTiming:
    """Step-count ranges; stimulus and delay durations are drawn uniformly."""

    stim: tuple[int, int] = (5, 20)
    delay: tuple[int, int] = (5, 20)
    response: int = 10


def _draw_magnitudes(rng: np.random.Generator, min_gap: float = 0.1) -> tuple[float, float]:
    while True:
        m1, m2 = rng.uniform(0.8, 1.2, size=2)
        if abs(m1 - m2) >= min_gap:
            return float(m1), float(m2)


def gen_sr_trial(
    task_id: int, rng: np.random.Generator, timing: SrTiming = SrTiming()
) -> tuple[Array, Array, Array]:
    """One trial of stimulus-response task 1..6: (inputs, targets, loss_mask).

    The fixation input stays on through stimulus and delay and the fixation
    target is 1 there; during the response period the fixation input and
    target drop to 0 and the response target is the unit vector
    (cos theta_out, sin theta_out). The squared-error loss applies at every
    step. Rules: 1 and 3 reproduce the stimulus direction, 2 and 4 reflect it
    (theta_out = 2 pi - theta_in), 3 and 4 insert a delay period, and 5 and 6
    show two stimuli with distinct magnitudes (on the first and second ring
    respectively) of which the stronger one sets theta_out.
    """
    if not 1 <= task_id <= SR_N_TASKS:
        raise ValueError(f"task id must be 1..{SR_N_TASKS}, got {task_id}")
    stim_steps = int(rng.integers(timing.stim[0], timing.stim[1] + 1))
    has_delay = task_id in (3, 4)
    delay_steps = int(rng.integers(timing.delay[0], timing.delay[1] + 1)) if has_delay else 0
    total = stim_steps + delay_steps + timing.response

    inputs = np.zeros((total, SR_N_IN))
    targets = np.zeros((total, SR_N_OUT))
    inputs[:, 5 + task_id - 1] = 1.0  # tonic task cue

    if task_id in (1, 3):
        theta_in = rng.uniform(0.0, 2 * np.pi)
        theta_out = theta_in
        ring = np.array([np.cos(theta_in), np.sin(theta_in)])
        inputs[:stim_steps, 0:2] = ring
    elif task_id in (2, 4):
        theta_in = rng.uniform(0.0, 2 * np.pi)
        theta_out = 2 * np.pi - theta_in
        ring = np.array([np.cos(theta_in), np.sin(theta_in)])
        inputs[:stim_steps, 0:2] = ring
    else:
        th1, th2 = rng.uniform(0.0, 2 * np.pi, size=2)
        m1, m2 = _draw_magnitudes(rng)
        theta_out = th1 if m1 > m2 else th2
        mixed = np.array(
            [
                m1 * np.cos(th1) + m2 * np.cos(th2),
                m1 * np.sin(th1) + m2 * np.sin(th2),
            ]
        )
        cols = slice(0, 2) if task_id == 5 else slice(2, 4)
        inputs[:stim_steps, cols] = mixed

    pre_response = stim_steps + delay_steps
    inputs[:pre_response, 4] = 1.0  # fixation input
    targets[:pre_response, 0] = 1.0  # hold fixation
    targets[pre_response:, 1] = np.cos(theta_out)
    targets[pre_response:, 2] = np.sin(theta_out)
    return inputs, targets, np.ones(total)


def _pad_sr_batch(trials: list[tuple[Array, Array, Array]]) -> SeqBatch:
    steps = max(t[0].shape[0] for t in trials)
    batch = len(trials)
    inputs = np.zeros((batch, steps, SR_N_IN))
    targets = np.zeros((batch, steps, SR_N_OUT))
    mask = np.zeros((batch, steps))
    lengths = np.zeros(batch, dtype=int)
    for i, (x, y, m) in enumerate(trials):
        n = x.shape[0]
        inputs[i, :n], targets[i, :n], mask[i, :n], lengths[i] = x, y, m, n
    return SeqBatch(inputs, targets, mask, lengths)


def sr_task_sequence(
    n_rec: int,
    eval_seed: int,
    n_eval: int = 256,
    timing: SrTiming = SrTiming(),
) -> TaskSequence:
    """The six stimulus-response tasks on a shared-readout RNN."""
    model = RnnSpec(n_in=SR_N_IN, n_rec=n_rec, n_out=SR_N_OUT, loss_kind=GAUSSIAN_MSE)
    tasks = []
    for task_id in range(1, SR_N_TASKS + 1):
        def sampler(rng, size, _tid=task_id):
            return _pad_sr_batch([gen_sr_trial(_tid, rng, timing) for _ in range(size)])

        eval_rng = np.random.default_rng((eval_seed, task_id))
        eval_batch = _pad_sr_batch(
            [gen_sr_trial(task_id, eval_rng, timing) for _ in range(n_eval)]
        )
        tasks.append(
            Task(
                name=SR_TASK_NAMES[task_id - 1],
                head=None,
                kind="rnn",
                loss_kind=GAUSSIAN_MSE,
                sample_batch=sampler,
                eval_data=eval_batch,
            )
        )
    return TaskSequence("sr", tasks, model)


# ---------------------------------------------------------------------------
# Stroke-digit tasks
# ---------------------------------------------------------------------------

STROKE_DIGIT_PAIRS = ([2, 3], [4, 5], [1, 7], [8, 9], [0, 6])
STROKE_TRANSFORMS = ("original", "swapped", "negated")


@dataclass
class StrokeDigit:
    label: int
    steps: Array  # (length, 4) rows of (dx, dy, eos, eod)
    split: str


def read_stroke_jsonl(path, drop_first: bool = True) -> list[StrokeDigit]:
    """Parse stroke-sequence JSON lines.

    Each line carries parallel integer arrays dx, dy, eos, eod plus a digit
    label; the leading entry (absolute pen-start location) is dropped unless
    drop_first is False. Lines without a "split" field default to "train".
    """
    digits = []
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                steps = np.stack(
                    [np.asarray(rec[k], dtype=float) for k in ("dx", "dy", "eos", "eod")],
                    axis=1,
                )
                label = int(rec["label"])
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}: bad stroke record on line {line_no}: {exc}")
            if drop_first:
                steps = steps[1:]
            if len(steps) == 0:
                continue
            digits.append(StrokeDigit(label, steps, rec.get("split", "train")))
    if not digits:
        raise ValueError(f"{path}: no stroke sequences found")
    return digits


def transform_strokes(steps: Array, transform: str) -> Array:
    """Apply a digit-set transform to the (dx, dy) columns."""
    out = steps.copy()
    if transform == "swapped":
        out[:, [0, 1]] = out[:, [1, 0]]
    elif transform == "negated":
        out[:, 0] = -out[:, 0]
        out[:, 1] = -out[:, 1]
    elif transform != "original":
        raise ValueError(f"unknown transform {transform!r}")
    return out


def _present_stroke(
    digit: StrokeDigit,
    transform: str,
    label: int,
    rng: np.random.Generator,
    noise_std: float,
    response_steps: int,
) -> tuple[Array, int, Array]:
    steps = transform_strokes(digit.steps, transform)
    total = len(steps) + response_steps
    inputs = np.zeros((total, 4))
    inputs[: len(steps)] = steps
    inputs += noise_std * rng.standard_normal(inputs.shape)
    mask = np.zeros(total)
    mask[-response_steps:] = 1.0
    return inputs, label, mask


def _pad_stroke_batch(
    presentations: list[tuple[Array, int, Array]]
) -> SeqBatch:
    steps = max(p[0].shape[0] for p in presentations)
    batch = len(presentations)
    inputs = np.zeros((batch, steps, 4))
    targets = np.zeros((batch, steps), dtype=int)
    mask = np.zeros((batch, steps))
    lengths = np.zeros(batch, dtype=int)
    for i, (x, label, m) in enumerate(presentations):
        n = x.shape[0]
        inputs[i, :n], mask[i, :n], lengths[i] = x, m, n
        targets[i, :] = label
    return SeqBatch(inputs, targets, mask, lengths)


def smnist_task_sequence(
    stroke_path,
    rng: np.random.Generator,
    n_rec: int = 30,
    noise_std: float = 1.0,
    response_steps: int = 5,
    n_eval: int = 256,
    task_order: list[int] | None = None,
) -> TaskSequence:
    """Fifteen binary stroke-digit tasks: 3 transformed digit sets x 5 pairs.

    Inputs are 4-dim stroke rows corrupted with fresh Gaussian noise at every
    presentation, followed by a response window where alone the cross-entropy
    applies. Each task reads out through its own head. Evaluation sets are
    drawn once from the test split. `task_order` permutes the 15 tasks.
    """
    digits = read_stroke_jsonl(stroke_path)
    train = [d for d in digits if d.split != "test"]
    test = [d for d in digits if d.split == "test"]
    if not test:
        raise ValueError(f"{stroke_path}: no test-split sequences")
    by_label_train = {k: [d for d in train if d.label == k] for k in range(10)}
    by_label_test = {k: [d for d in test if d.label == k] for k in range(10)}
    for k in range(10):
        if not by_label_train[k] or not by_label_test[k]:
            raise ValueError(f"{stroke_path}: digit {k} missing from a split")

    specs = [
        (transform, pair)
        for transform in STROKE_TRANSFORMS
        for pair in STROKE_DIGIT_PAIRS
    ]
    order = list(task_order) if task_order is not None else list(range(len(specs)))
    if sorted(order) != list(range(len(specs))):
        raise ValueError("task_order must be a permutation of 0..14")

    model = RnnSpec(
        n_in=4, n_rec=n_rec, n_out=2, loss_kind=CATEGORICAL_MASKED, n_heads=len(specs)
    )
    tasks = []
    for head, spec_idx in enumerate(order):
        transform, pair = specs[spec_idx]

        def sampler(srng, size, _transform=transform, _pair=pair):
            presentations = []
            for _ in range(size):
                cls = int(srng.integers(0, 2))
                digit = by_label_train[_pair[cls]][
                    srng.integers(0, len(by_label_train[_pair[cls]]))
                ]
                presentations.append(
                    _present_stroke(digit, _transform, cls, srng, noise_std, response_steps)
                )
            return _pad_stroke_batch(presentations)

        eval_rng = np.random.default_rng((int(rng.integers(2**31)), head))
        eval_presentations = []
        for _ in range(n_eval):
            cls = int(eval_rng.integers(0, 2))
            digit = by_label_test[pair[cls]][
                eval_rng.integers(0, len(by_label_test[pair[cls]]))
            ]
            eval_presentations.append(
                _present_stroke(digit, transform, cls, eval_rng, noise_std, response_steps)
            )
        tasks.append(
            Task(
                name=f"{transform}-{pair[0]}v{pair[1]}",
                head=head,
                kind="rnn",
                loss_kind=CATEGORICAL_MASKED,
                sample_batch=sampler,
                eval_data=_pad_stroke_batch(eval_presentations),
            )
        )
    return TaskSequence("smnist", tasks, model)


# ---------------------------------------------------------------------------
# Split digit-image tasks (IDX ingestion)
# ---------------------------------------------------------------------------

def _open_idx(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def load_idx_images(path) -> Array:
    """(N, rows*cols) float array scaled to [0, 1] from a big-endian IDX file."""
    with _open_idx(path) as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise ValueError(f"{path}: truncated IDX header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"{path}: bad image magic 0x{magic:08x}")
        raw = fh.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise ValueError(f"{path}: truncated image data")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    return pixels.astype(float) / 255.0


def load_idx_labels(path) -> Array:
    """(N,) integer labels from a big-endian IDX label file."""
    with _open_idx(path) as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise ValueError(f"{path}: truncated IDX header")
        magic, count = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"{path}: bad label magic 0x{magic:08x}")
        raw = fh.read(count)
        if len(raw) != count:
            raise ValueError(f"{path}: truncated label data")
    return np.frombuffer(raw, dtype=np.uint8).astype(int)


TASK_INCREMENTAL = "task"
DOMAIN_INCREMENTAL = "domain"
CLASS_INCREMENTAL_PROTOCOL = "class"


def split_digits_tasks(
    train_x: Array,
    train_y: Array,
    test_x: Array,
    test_y: Array,
    rng: np.random.Generator,
    protocol: str,
    hidden: tuple[int, ...] = (400, 400),
    name: str = "split_mnist",
) -> TaskSequence:
    """Five binary tasks over a per-seed random pairing of the ten digits.

    Head wiring follows the protocol: separate two-way heads with task
    identity given at test time ("task"), one shared two-way head ("domain"),
    or one ten-way head scored over all classes ("class").
    """
    classes = np.unique(train_y)
    if len(classes) != 10:
        raise ValueError(f"expected 10 classes, got {len(classes)}")
    permutation = rng.permutation(10)
    pairs = [tuple(int(d) for d in permutation[2 * t : 2 * t + 2]) for t in range(5)]

    n_in = train_x.shape[1]
    if protocol == TASK_INCREMENTAL:
        head_mode = HeadMode(nets.MULTI_HEAD, n_tasks=5, classes=2)
    elif protocol == DOMAIN_INCREMENTAL:
        head_mode = HeadMode(nets.SHARED_HEAD, classes=2)
    elif protocol == CLASS_INCREMENTAL_PROTOCOL:
        head_mode = HeadMode(nets.CLASS_INCREMENTAL, classes=10)
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    model = MlpSpec((n_in, *hidden), head_mode)

    tasks = []
    for t, pair in enumerate(pairs):
        train_idx = np.flatnonzero(np.isin(train_y, pair))
        test_idx = np.flatnonzero(np.isin(test_y, pair))

        def targets_for(y, _pair=pair):
            if protocol == CLASS_INCREMENTAL_PROTOCOL:
                return y.astype(int)
            return (y == _pair[1]).astype(int)

        def sampler(srng, size, _idx=train_idx, _pair=pair):
            take = _idx[srng.integers(0, len(_idx), size=size)]
            return train_x[take], targets_for(train_y[take], _pair)

        tasks.append(
            Task(
                name=f"{pair[0]}v{pair[1]}",
                head=t if protocol == TASK_INCREMENTAL else None,
                kind="mlp",
                loss_kind="categorical",
                sample_batch=sampler,
                eval_data=(test_x[test_idx], targets_for(test_y[test_idx])),
            )
        )
    return TaskSequence(f"{name}_{protocol}", tasks, model)


def load_split_mnist_tasks(
    train_images_path,
    train_labels_path,
    test_images_path,
    test_labels_path,
    rng: np.random.Generator,
    protocol: str,
    hidden: tuple[int, ...] = (400, 400),
) -> TaskSequence:
    """split_digits_tasks over IDX image/label files."""
    train_x = load_idx_images(train_images_path)
    train_y = load_idx_labels(train_labels_path)
    test_x = load_idx_images(test_images_path)
    test_y = load_idx_labels(test_labels_path)
    if len(train_x) != len(train_y) or len(test_x) != len(test_y):
        raise ValueError("image/label counts disagree")
    return split_digits_tasks(
        train_x, train_y, test_x, test_y, rng, protocol, hidden=hidden
    )
