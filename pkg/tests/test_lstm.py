import numpy as np
import pytest

from hlstm.errors import NumericError, ValidationError
from hlstm.lstm import (
    DropoutSpec,
    LstmState,
    LstmWeights,
    bptt_gradients,
    forward_sequence,
    init_weights,
    lstm_step,
    predict_sequence,
    sample_dropout_masks,
    sigmoid,
)

from oracles import (
    central_difference_gradients,
    max_relative_gradient_error,
    scalar_lstm_sequence,
)


def random_weights(n_in, n_hid, n_out, seed):
    rng = np.random.default_rng(seed)
    w = LstmWeights.zeros(n_in, n_hid, n_out)
    for name, arr in w.named_arrays():
        setattr(w, name, rng.normal(0.0, 0.4, size=arr.shape))
    return w


class TestInitWeights:
    def test_deterministic_given_seed(self):
        a = init_weights(3, 4, 1, seed=7)
        b = init_weights(3, 4, 1, seed=7)
        for (name, arr_a), (_, arr_b) in zip(a.named_arrays(), b.named_arrays()):
            assert np.array_equal(arr_a, arr_b), name

    def test_forget_bias_is_one(self):
        for seed in (0, 7, 123):
            w = init_weights(3, 4, 1, seed=seed)
            assert np.array_equal(w.b_f, np.ones(4))

    def test_entries_within_uniform_bound(self):
        # bound is 1/sqrt(hidden) = 0.5 for hidden 4
        w = init_weights(3, 4, 1, seed=7)
        for name in ("W_gx", "W_ix", "W_fx", "W_ox", "W_gh", "W_ih", "W_fh", "W_oh", "W_hy"):
            assert np.max(np.abs(getattr(w, name))) <= 0.5, name

    def test_rejects_nonpositive_sizes(self):
        with pytest.raises(ValidationError):
            init_weights(0, 4, 1, seed=1)
        with pytest.raises(ValidationError):
            init_weights(3, -2, 1, seed=1)


class TestDropoutMasks:
    def test_none_variant_is_identity(self):
        masks = sample_dropout_masks(DropoutSpec("none", 0.5), 3, 4, rho=5, seed=1)
        assert masks.is_identity
        assert masks.x_at(0) is None and masks.h is None and masks.g_at(0) is None
        v = np.arange(3.0)
        out = v if masks.x_at(0) is None else v * masks.x_at(0)
        assert np.array_equal(out, v)

    def test_rate_zero_is_identity(self):
        masks = sample_dropout_masks(DropoutSpec("non_recurrent", 0.0), 3, 4, rho=5, seed=1)
        assert masks.is_identity

    def test_recurrent_constant_mask_shared_across_steps(self):
        masks = sample_dropout_masks(DropoutSpec("recurrent_constant", 0.3), 3, 4, rho=10, seed=5)
        assert masks.h.shape == (4,)
        assert masks.x is None and masks.g is None

    def test_non_recurrent_resampled_each_step(self):
        masks = sample_dropout_masks(DropoutSpec("non_recurrent", 0.5), 6, 4, rho=8, seed=5)
        assert masks.x.shape == (8, 6)
        assert any(not np.array_equal(masks.x[t], masks.x[0]) for t in range(1, 8))

    def test_inverted_scaling_mean_is_one(self):
        # Monte-Carlo check of the inverted-dropout expectation
        masks = sample_dropout_masks(DropoutSpec("non_recurrent", 0.5), 100, 4, rho=1000, seed=11)
        assert masks.x.size == 100_000
        assert abs(masks.x.mean() - 1.0) <= 0.02

    def test_memory_cell_masks_candidate_per_step(self):
        masks = sample_dropout_masks(DropoutSpec("memory_cell", 0.4), 3, 4, rho=6, seed=2)
        assert masks.g.shape == (6, 4)
        kept = masks.g[masks.g > 0]
        assert np.allclose(kept, 1.0 / 0.6)

    def test_rate_one_rejected(self):
        with pytest.raises(ValidationError):
            sample_dropout_masks(DropoutSpec("non_recurrent", 1.0), 3, 4, rho=5, seed=1)

    def test_batch_masks_independent_per_instance(self):
        masks = sample_dropout_masks(DropoutSpec("recurrent_constant", 0.5), 3, 8, rho=4, seed=3, batch=16)
        assert masks.h.shape == (16, 8)
        assert any(not np.array_equal(masks.h[b], masks.h[0]) for b in range(1, 16))


class TestLstmStep:
    def test_all_zero_parameters(self):
        w = LstmWeights.zeros(3, 4, 1)
        state = LstmState.zeros(4)
        new_state, y, gates = lstm_step(w, np.array([0.3, -2.0, 5.0]), state)
        assert np.array_equal(gates["g"], np.zeros(4))
        assert np.array_equal(gates["i"], np.full(4, 0.5))
        assert np.array_equal(gates["f"], np.full(4, 0.5))
        assert np.array_equal(gates["o"], np.full(4, 0.5))
        assert np.array_equal(new_state.s, np.zeros(4))
        assert np.array_equal(new_state.h, np.zeros(4))
        assert np.array_equal(y, np.zeros(1))

    def test_output_bias_only(self):
        w = LstmWeights.zeros(2, 3, 1)
        w.b_y = np.array([0.42])
        _, y, _ = lstm_step(w, np.zeros(2), LstmState.zeros(3))
        assert y[0] == pytest.approx(0.42, abs=1e-15)

    def test_matches_scalar_oracle(self):
        w = random_weights(2, 2, 1, seed=42)
        x = np.array([1.0, 0.0])
        _, y, _ = lstm_step(w, x, LstmState.zeros(2))
        expected = scalar_lstm_sequence(w, [x])[0][0]
        assert abs(y[0] - expected) < 1e-12

    def test_dimension_mismatch(self):
        w = LstmWeights.zeros(3, 4, 1)
        with pytest.raises(ValidationError):
            lstm_step(w, np.zeros(5), LstmState.zeros(4))
        with pytest.raises(ValidationError):
            lstm_step(w, np.zeros(3), LstmState.zeros(2))

    def test_non_finite_input(self):
        w = LstmWeights.zeros(3, 4, 1)
        with pytest.raises(NumericError):
            lstm_step(w, np.array([1.0, np.nan, 0.0]), LstmState.zeros(4))


class TestForwardSequence:
    def test_length_one_equals_single_step(self):
        w = random_weights(3, 4, 2, seed=0)
        x = np.random.default_rng(1).normal(size=(1, 3))
        Y, cache = forward_sequence(w, x)
        state, y, _ = lstm_step(w, x[0], LstmState.zeros(4))
        assert np.array_equal(Y[0], y)
        assert np.array_equal(cache.h[0], state.h)

    def test_deterministic_given_seed(self):
        w = random_weights(3, 4, 1, seed=0)
        X = np.random.default_rng(2).normal(size=(20, 3))
        spec = DropoutSpec("non_recurrent", 0.5)
        Y1, _ = forward_sequence(w, X, spec=spec, seed=9)
        Y2, _ = forward_sequence(w, X, spec=spec, seed=9)
        assert np.array_equal(Y1, Y2)

    def test_constant_input_state_converges(self):
        w = random_weights(3, 4, 1, seed=3)
        X = np.tile(np.array([0.5, -0.2, 1.0]), (200, 1))
        _, cache = forward_sequence(w, X)
        early = np.max(np.abs(cache.h[1] - cache.h[0]))
        late = np.max(np.abs(cache.h[199] - cache.h[198]))
        assert late < early

    def test_gate_ranges(self):
        w = random_weights(4, 6, 1, seed=8)
        X = np.random.default_rng(4).normal(0, 5, size=(50, 4))
        _, cache = forward_sequence(w, X)
        for arr in (cache.i, cache.f, cache.o):
            assert np.all(arr > 0) and np.all(arr < 1)
        assert np.all(np.abs(cache.g) < 1)
        assert np.all(np.abs(cache.h) < 1)

    def test_dropout_identity_paths_bit_identical(self):
        w = random_weights(3, 4, 1, seed=5)
        X = np.random.default_rng(6).normal(size=(15, 3))
        base, _ = forward_sequence(w, X)
        for spec in (None, DropoutSpec("none", 0.7), DropoutSpec("recurrent_constant", 0.0)):
            Y, _ = forward_sequence(w, X, spec=spec, seed=1)
            assert np.array_equal(Y, base)

    def test_recurrent_constant_matches_scalar_oracle_with_same_mask(self):
        w = random_weights(2, 3, 1, seed=10)
        X = np.random.default_rng(11).normal(size=(12, 2))
        masks = sample_dropout_masks(DropoutSpec("recurrent_constant", 0.5), 2, 3, rho=12, seed=21)
        Y, _ = forward_sequence(w, X, masks=masks)
        expected = scalar_lstm_sequence(w, X, h_mask=masks.h)
        assert np.max(np.abs(Y - np.asarray(expected))) < 1e-12

    def test_batch_layout_matches_per_instance_runs(self):
        w = random_weights(3, 4, 1, seed=12)
        rng = np.random.default_rng(13)
        X = rng.normal(size=(5, 7, 3))
        Yb, _ = forward_sequence(w, X)
        for b in range(5):
            Ys, _ = forward_sequence(w, X[b])
            assert np.max(np.abs(Yb[b] - Ys)) < 1e-12

    def test_predict_sequence_matches_forward(self):
        w = random_weights(3, 4, 1, seed=14)
        X = np.random.default_rng(15).normal(size=(30, 3))
        Y, _ = forward_sequence(w, X)
        assert np.array_equal(predict_sequence(w, X), Y)


class TestBpttGradients:
    @staticmethod
    def loss_and_grad(w, X, targets, masks):
        Y, cache = forward_sequence(w, X, masks=masks)
        diff = Y - targets
        loss = float((diff * diff).sum())
        return loss, bptt_gradients(w, cache, 2.0 * diff)

    def test_zero_upstream_gives_zero_gradients(self):
        w = random_weights(3, 4, 1, seed=20)
        X = np.random.default_rng(21).normal(size=(6, 3))
        _, cache = forward_sequence(w, X)
        grads = bptt_gradients(w, cache, np.zeros((6, 1)))
        for name, arr in grads.named_arrays():
            assert np.array_equal(arr, np.zeros_like(arr)), name

    @pytest.mark.parametrize("variant,rate", [
        ("none", 0.0),
        ("non_recurrent", 0.4),
        ("recurrent_constant", 0.5),
        ("memory_cell", 0.3),
    ])
    def test_matches_central_differences(self, variant, rate):
        rng = np.random.default_rng(hash(variant) % 2**32)
        w = random_weights(2, 3, 1, seed=30)
        rho = 5
        X = rng.normal(size=(rho, 2))
        targets = rng.normal(size=(rho, 1))
        masks = sample_dropout_masks(DropoutSpec(variant, rate), 2, 3, rho=rho, seed=31)

        _, analytic = self.loss_and_grad(w, X, targets, masks)

        def loss_fn(weights):
            Y, _ = forward_sequence(weights, X, masks=masks)
            d = Y - targets
            return float((d * d).sum())

        numeric = central_difference_gradients(loss_fn, w, step=1e-5)
        err = max_relative_gradient_error(
            {n: a for n, a in analytic.named_arrays()}, numeric)
        assert err < 1e-4

    def test_duplicated_instance_doubles_gradient(self):
        # Additivity over instances. BLAS picks different kernels for
        # different batch shapes, so equality holds to rounding, not bitwise.
        w = random_weights(3, 4, 1, seed=40)
        rng = np.random.default_rng(41)
        X = rng.normal(size=(6, 3))
        dY = rng.normal(size=(6, 1))
        _, cache1 = forward_sequence(w, X)
        g1 = bptt_gradients(w, cache1, dY)
        Xb = np.stack([X, X])
        _, cache2 = forward_sequence(w, Xb)
        g2 = bptt_gradients(w, cache2, np.stack([dY, dY]))
        for (name, a), (_, b) in zip(g1.named_arrays(), g2.named_arrays()):
            assert np.allclose(2.0 * a, b, rtol=1e-12, atol=1e-15), name

    def test_shape_mismatch_rejected(self):
        w = random_weights(3, 4, 1, seed=50)
        X = np.random.default_rng(51).normal(size=(6, 3))
        _, cache = forward_sequence(w, X)
        other = random_weights(3, 5, 1, seed=52)
        with pytest.raises(ValidationError):
            bptt_gradients(other, cache, np.zeros((6, 1)))
        with pytest.raises(ValidationError):
            bptt_gradients(w, cache, np.zeros((7, 1)))


def test_sigmoid_extremes_stable():
    z = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    out = sigmoid(z)
    assert np.all(np.isfinite(out))
    assert out[0] == 0.0 and out[-1] == 1.0
    assert out[2] == 0.5
