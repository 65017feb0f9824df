"""Tests for Fisher estimators against analytic and Monte-Carlo oracles.

Oracles used here: closed-form Fishers of linear-Gaussian maps, multinomial
covariance for categorical outputs, per-sample outer-product Fishers pooled in
the test itself, and replicate-based Monte-Carlo error scaling.
"""

import numpy as np
import pytest

from cllab.fisher import (
    diag_fisher,
    exact_fisher_linear_rnn,
    kfac_fisher_ffn,
    kfac_fisher_rnn,
)
from cllab.kron import materialize_kron, scaled_kl, symmetrize, validate_factor_pair
from cllab import nets
from cllab.nets import (
    CATEGORICAL_MASKED,
    HeadMode,
    MlpSpec,
    RnnSpec,
    init_mlp_params,
    init_rnn_params,
)


def random_rotation(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def floored(f, eps=1e-8):
    """Add a relative ridge so Monte-Carlo Fishers with dead directions stay SPD."""
    d = f.shape[0]
    return f + eps * (np.trace(f) / d) * np.eye(d)


def rotation_baseline(f_exact, rng, n_rotations):
    vals = []
    for _ in range(n_rotations):
        r = random_rotation(rng, f_exact.shape[0])
        vals.append(scaled_kl(r @ f_exact @ r.T, f_exact))
    return float(np.mean(vals))


def linear_t1_setup(n_rec=3, n_in=2, seed=0):
    """Linear single-step map y = W z + noise with identity readout."""
    rng = np.random.default_rng(seed)
    spec = RnnSpec(
        n_in=n_in, n_rec=n_rec, n_out=n_rec, activation="linear", bias=False
    )
    params = init_rnn_params(spec, rng, gain=0.5)
    params["c"] = np.eye(n_rec)
    return spec, params, rng


def x_subblock(f, n_rec, n_in):
    """Rows/cols of a recurrent-block Fisher touching only the input columns."""
    lo, hi = n_rec * n_rec, (n_rec + n_in) * n_rec
    return f[lo:hi, lo:hi]


class TestKfacFfn:
    def test_bias_only_input(self):
        spec = MlpSpec((3, 4), HeadMode(nets.SHARED_HEAD, classes=2))
        params = init_mlp_params(spec, np.random.default_rng(0))
        est = kfac_fisher_ffn(spec, params, np.zeros((16, 3)), np.random.default_rng(1), 16)
        expected = np.zeros((4, 4))
        expected[3, 3] = 1.0
        np.testing.assert_array_equal(est.blocks["layer0"].left, expected)

    def test_factors_valid_and_counted(self):
        rng = np.random.default_rng(2)
        spec = MlpSpec((4, 6, 5), HeadMode(nets.SHARED_HEAD, classes=3))
        params = init_mlp_params(spec, rng)
        est = kfac_fisher_ffn(spec, params, rng.standard_normal((32, 4)), rng, 100)
        assert est.sample_count == 128  # rounded up to whole passes
        for pair in est.blocks.values():
            validate_factor_pair(pair)

    def test_inactive_head_gets_zero_adjoint_factor(self):
        rng = np.random.default_rng(3)
        spec = MlpSpec((3, 4), HeadMode(nets.MULTI_HEAD, n_tasks=2, classes=2))
        params = init_mlp_params(spec, rng)
        est = kfac_fisher_ffn(spec, params, rng.standard_normal((8, 3)), rng, 8, task=0)
        np.testing.assert_array_equal(est.blocks["head1"].right, 0.0)
        assert np.abs(est.blocks["head0"].right).max() > 0

    def test_depends_only_on_inputs_and_rng(self):
        # the model-distribution contract: empirical labels never enter
        rng = np.random.default_rng(4)
        spec = MlpSpec((3, 4), HeadMode(nets.SHARED_HEAD, classes=2))
        params = init_mlp_params(spec, rng)
        x = rng.standard_normal((8, 3))
        est1 = kfac_fisher_ffn(spec, params, x, np.random.default_rng(7), 64)
        est2 = kfac_fisher_ffn(spec, params, x, np.random.default_rng(7), 64)
        for name in est1.blocks:
            np.testing.assert_array_equal(est1.blocks[name].right, est2.blocks[name].right)

    def test_factored_estimate_beats_rotated_outer_product_oracle(self):
        rng = np.random.default_rng(5)
        spec = MlpSpec((3, 4, 4), HeadMode(nets.SHARED_HEAD, classes=2))
        params = init_mlp_params(spec, rng)
        x = rng.standard_normal((64, 3))

        # one shared set of sampled targets for both the factored estimate and
        # the per-sample outer-product oracle
        n_passes = 60
        a_acc = {n: 0.0 for n in spec.blocks()}
        g_acc = {n: 0.0 for n in spec.blocks()}
        outer = {n: 0.0 for n in spec.blocks()}
        srng = np.random.default_rng(6)
        for _ in range(n_passes):
            trace = nets.mlp_forward(spec, params, x)
            sampled = nets.sample_categorical(trace.probs, srng)
            nets.mlp_backward(spec, params, trace, sampled)
            for name in spec.blocks():
                z, h_bar = trace.layer_inputs[name], trace.adjoints[name]
                a_acc[name] += z.T @ z
                g_acc[name] += h_bar.T @ h_bar
                per_sample = np.einsum("bi,bo->bio", z, h_bar).reshape(len(x), -1)
                outer[name] += per_sample.T @ per_sample
        total = n_passes * len(x)
        brng = np.random.default_rng(8)
        for name in spec.blocks():
            kfac = floored(np.kron(a_acc[name] / total, g_acc[name] / total))
            exact = floored(symmetrize(outer[name] / total))
            baseline = rotation_baseline(exact, brng, 50)
            assert scaled_kl(kfac, exact) < baseline


class TestKfacRnn:
    def test_t1_linear_gaussian_factors(self):
        spec, params, rng = linear_t1_setup()
        inputs = rng.standard_normal((400, 1, spec.n_in))
        lengths = np.full(400, 1)
        mask = np.ones((400, 1))
        est = kfac_fisher_rnn(spec, params, inputs, lengths, mask, rng, 20_000)
        assert est.mean_steps == 1.0
        # left factor: exactly the pooled z moment (deterministic given inputs)
        x = inputs[:, 0, :]
        np.testing.assert_allclose(
            est.blocks["w"].left[spec.n_rec :, spec.n_rec :], x.T @ x / len(x), atol=1e-12
        )
        # right factor: unit-covariance output noise through the identity readout
        n = est.sample_count
        atol = 3 * np.sqrt(2.0 / n) + 0.01
        np.testing.assert_allclose(est.blocks["w"].right, np.eye(spec.n_rec), atol=atol)

    def test_t1_linear_matches_exact_oracle(self):
        spec, params, rng = linear_t1_setup()
        inputs = rng.standard_normal((500, 1, spec.n_in))
        est = kfac_fisher_rnn(
            spec, params, inputs, np.full(500, 1), np.ones((500, 1)), rng, 20_000
        )
        cov = np.cov(inputs[:, 0, :].T, bias=True) + np.outer(
            inputs[:, 0, :].mean(0), inputs[:, 0, :].mean(0)
        )

        def draw(r):
            return inputs[r.integers(0, 500)]

        exact = exact_fisher_linear_rnn(
            params["w"], params["c"], spec.n_in, "gaussian", draw, 1, 20_000,
            np.random.default_rng(9),
        )
        kfac_x = x_subblock(materialize_kron(est.blocks["w"]), spec.n_rec, spec.n_in)
        exact_x = x_subblock(exact["w"], spec.n_rec, spec.n_in)
        assert scaled_kl(kfac_x, exact_x) < 0.05

    def test_all_masked_targets_zero_adjoint_factors(self):
        rng = np.random.default_rng(10)
        spec = RnnSpec(n_in=2, n_rec=3, n_out=2, loss_kind=CATEGORICAL_MASKED)
        params = init_rnn_params(spec, rng)
        inputs = rng.standard_normal((8, 5, 2))
        est = kfac_fisher_rnn(
            spec, params, inputs, np.full(8, 5), np.zeros((8, 5)), rng, 8
        )
        np.testing.assert_array_equal(est.blocks["w"].right, 0.0)
        np.testing.assert_array_equal(est.blocks["c"].right, 0.0)

    def test_nonlinear_rnn_beats_rotation_baseline(self):
        rng = np.random.default_rng(11)
        spec = RnnSpec(n_in=2, n_rec=6, n_out=3, activation="relu", bias=False)
        params = init_rnn_params(spec, rng, gain=0.6)
        steps, batch = 5, 100
        inputs = rng.standard_normal((batch, steps, 2))
        est = kfac_fisher_rnn(
            spec, params, inputs, np.full(batch, steps), np.ones((batch, steps)), rng, 8000
        )

        def draw(r):
            return inputs[r.integers(0, batch)]

        exact = exact_fisher_linear_rnn(
            params["w"], params["c"], 2, "gaussian", draw, steps, 8000,
            np.random.default_rng(12),
        )
        # the oracle runs the same weights with identity activation; rerun it
        # with the nonlinear model instead by estimating from per-sample grads
        f_exact = _mc_fisher_nonlinear(spec, params, inputs, 8000, np.random.default_rng(13))
        brng = np.random.default_rng(14)
        for block in ("w", "c"):
            kfac = materialize_kron(est.blocks[block])
            baseline = rotation_baseline(f_exact[block], brng, 100)
            assert scaled_kl(kfac, f_exact[block]) < baseline


def _mc_fisher_nonlinear(spec, params, inputs, n_samples, rng):
    """Per-sample outer-product Fisher of the nonlinear model, via nets BPTT."""
    batch = inputs.shape[0]
    lengths = np.full(batch, inputs.shape[1])
    mask = np.ones(inputs.shape[:2])
    passes = -(-n_samples // batch)
    acc = {}
    for _ in range(passes):
        trace = nets.rnn_forward(spec, params, inputs, lengths)
        targets = nets.sample_rnn_targets_from_trace(spec, trace, mask, rng)
        nets.rnn_backward(spec, params, trace, targets, mask)
        per_w = np.einsum("btz,btr->bzr", trace.z, trace.adjoints).reshape(batch, -1)
        per_c = np.einsum("btr,bto->bro", trace.rates, trace.out_adjoints).reshape(batch, -1)
        acc["w"] = acc.get("w", 0.0) + per_w.T @ per_w
        acc["c"] = acc.get("c", 0.0) + per_c.T @ per_c
    return {k: symmetrize(v / (passes * batch)) for k, v in acc.items()}


class TestDiagFisher:
    def test_linear_gaussian_entry(self):
        spec, params, rng = linear_t1_setup(n_rec=1, n_in=1, seed=15)
        inputs = rng.standard_normal((500, 1, 1))
        est = diag_fisher(
            spec, params, inputs, rng, 20_000,
            lengths=np.full(500, 1), loss_mask=np.ones((500, 1)),
        )
        expected = float((inputs[:, 0, 0] ** 2).mean())
        se = np.sqrt(8.0 / est.sample_count) * expected
        assert abs(est.blocks["w"][0, 1] - expected) < 3 * se + 0.01
        assert est.blocks["w"][0, 0] == 0.0  # the zero initial-state coordinate

    def test_dead_relu_zeros(self):
        spec = MlpSpec((3, 4), HeadMode(nets.SHARED_HEAD, classes=2))
        params = {n: np.zeros(spec.block_shape(n)) for n in spec.blocks()}
        params["layer0"][:, -1] = -10.0  # bias drives every hidden unit dead
        rng = np.random.default_rng(16)
        est = diag_fisher(spec, params, np.abs(rng.standard_normal((32, 3))), rng, 64)
        np.testing.assert_array_equal(est.blocks["layer0"], 0.0)

    def test_matches_kfac_diagonal_linear_case(self):
        spec, params, rng = linear_t1_setup(n_rec=2, n_in=2, seed=17)
        inputs = rng.standard_normal((500, 1, 2))
        lengths, mask = np.full(500, 1), np.ones((500, 1))
        diag_est = diag_fisher(
            spec, params, inputs, np.random.default_rng(18), 40_000,
            lengths=lengths, loss_mask=mask,
        )
        kfac_est = kfac_fisher_rnn(
            spec, params, inputs, lengths, mask, np.random.default_rng(19), 40_000
        )
        kfac_diag = np.diag(materialize_kron(kfac_est.blocks["w"])).reshape(
            spec.n_z, spec.n_rec
        ).T
        np.testing.assert_allclose(diag_est.blocks["w"], kfac_diag, atol=0.05)


class TestExactFisher:
    def test_t1_fixed_input_closed_form(self):
        n_rec, n_in = 3, 2
        rng = np.random.default_rng(20)
        w = 0.5 * rng.standard_normal((n_rec, n_rec + n_in))
        c = np.eye(n_rec)
        x_fixed = np.array([[1.0, -2.0]])
        f = exact_fisher_linear_rnn(
            w, c, n_in, "gaussian", lambda r: x_fixed, 1, 30_000, rng
        )
        z = np.concatenate([np.zeros(n_rec), x_fixed[0]])
        expected = np.kron(np.outer(z, z), np.eye(n_rec))
        scale = np.abs(expected).max()
        np.testing.assert_allclose(f["w"], expected, atol=3 * 2 * scale / np.sqrt(30_000))

    def test_categorical_uniform_logits(self):
        n_rec, n_in, n_out, steps = 2, 2, 3, 3
        rng = np.random.default_rng(21)
        w = 0.4 * rng.standard_normal((n_rec, n_rec + n_in))
        c = np.zeros((n_out, n_rec))  # uniform softmax at every step
        f = exact_fisher_linear_rnn(
            w, c, n_in, "categorical", lambda r: r.standard_normal((steps, n_in)), steps,
            40_000, rng,
        )
        p = np.full(n_out, 1.0 / n_out)
        multinomial_cov = np.diag(p) - np.outer(p, p)
        # with a zero readout the adjoints are independent across time, so the
        # readout Fisher factorizes against the summed rate moments
        w_r, w_x = w[:, :n_rec], w[:, n_rec:]
        s = np.zeros((n_rec, n_rec))
        cov_r = np.zeros((n_rec, n_rec))
        for _ in range(steps):
            cov_r = w_r @ cov_r @ w_r.T + w_x @ w_x.T
            s += cov_r
        expected = np.kron(s, multinomial_cov)
        np.testing.assert_allclose(f["c"], expected, atol=6 * np.abs(expected).max() / np.sqrt(40_000) + 0.01)

    def test_mc_error_halves_with_double_samples(self):
        n_rec, n_in = 2, 1
        rng = np.random.default_rng(22)
        w = 0.5 * rng.standard_normal((n_rec, n_rec + n_in))
        c = np.eye(n_rec)
        draw = lambda r: r.standard_normal((2, n_in))

        def entry_std(n_mc, replicates, seed):
            vals = []
            for i in range(replicates):
                f = exact_fisher_linear_rnn(
                    w, c, n_in, "gaussian", draw, 2, n_mc, np.random.default_rng(seed + i)
                )
                vals.append(f["w"][2, 2])
            return np.std(vals, ddof=1)

        ratio = entry_std(100, 80, 1000) / entry_std(200, 80, 5000)
        assert np.sqrt(2) / 1.3 < ratio < np.sqrt(2) * 1.3

    def test_dimension_guard(self):
        w = np.zeros((60, 120))
        with pytest.raises(ValueError, match="exceeds"):
            exact_fisher_linear_rnn(
                w, np.eye(60), 60, "gaussian", lambda r: np.zeros((1, 60)), 1, 1,
                np.random.default_rng(0),
            )


class TestLinearExactness:
    def test_kfac_converges_to_exact_fisher_linear_map(self):
        spec, params, rng = linear_t1_setup(n_rec=2, n_in=3, seed=23)
        mix = np.array([[1.0, 0.0, 0.0], [0.5, 0.8, 0.0], [-0.3, 0.2, 0.6]])
        inputs = rng.standard_normal((1000, 1, 3)) @ mix.T
        est = kfac_fisher_rnn(
            spec, params, inputs, np.full(1000, 1), np.ones((1000, 1)), rng, 10_000
        )
        emp_cov = inputs[:, 0, :].T @ inputs[:, 0, :] / 1000
        expected = np.kron(emp_cov, np.eye(spec.n_rec))
        kfac_x = x_subblock(materialize_kron(est.blocks["w"]), spec.n_rec, spec.n_in)
        assert scaled_kl(kfac_x, expected) < 0.05
