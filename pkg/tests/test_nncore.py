"""
Pytest unit tests for the numerics core.

Covers the convolution against a nested-loop reference, masked softmax
cross-entropy, the tape-driven backward pass against central finite
differences, and the Adam / SGD steps.
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from mamlcon.error_handling import NumericalError, ShapeError, ValidationError
from mamlcon.models import init_params, make_mask, predict
from mamlcon.nncore import (
    AdamState,
    add_grads,
    adam_step,
    conv2d_backward,
    conv2d_forward,
    copy_params,
    dense_backward,
    dense_forward,
    finite_diff_grad,
    model_backward,
    params_equal,
    relative_error,
    relu_backward,
    relu_forward,
    scale_grads,
    sgd_step,
    softmax_cross_entropy,
)


def reference_conv(x, kernels, bias, stride):
    c_out, c_in, kh, kw = kernels.shape
    _, h, w = x.shape
    out_h = (h - kh) // stride + 1
    out_w = (w - kw) // stride + 1
    out = np.zeros((c_out, out_h, out_w))
    for o in range(c_out):
        for i in range(out_h):
            for j in range(out_w):
                total = bias[o]
                for c in range(c_in):
                    for a in range(kh):
                        for b in range(kw):
                            total += x[c, i * stride + a, j * stride + b] * kernels[o, c, a, b]
                out[o, i, j] = total
    return out


class TestConv2dForward:
    """Valid strided convolution."""

    @pytest.mark.unit
    def test_identity_kernel_returns_input(self, rng):
        """A 1x1 kernel of value 1 and zero bias reproduces the input."""
        x = rng.standard_normal((1, 4, 4))
        out = conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1), stride=1)
        np.testing.assert_array_equal(out, x)

    @pytest.mark.unit
    def test_zero_kernels_give_zero_output(self, rng):
        x = rng.standard_normal((2, 6, 5))
        out = conv2d_forward(x, np.zeros((3, 2, 3, 3)), np.zeros(3), stride=1)
        assert out.shape == (3, 4, 3)
        assert not out.any()

    @pytest.mark.unit
    def test_matches_nested_loop_reference(self, rng):
        """Random 2x5x5 input, 3x2x3x3 kernels, stride 2."""
        x = rng.standard_normal((2, 5, 5))
        kernels = rng.standard_normal((3, 2, 3, 3))
        bias = rng.standard_normal(3)
        out = conv2d_forward(x, kernels, bias, stride=2)
        expected = reference_conv(x, kernels, bias, 2)
        assert out.shape == (3, 2, 2)
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)

    @pytest.mark.unit
    def test_batched_input_matches_per_item(self, rng):
        x = rng.standard_normal((3, 2, 7, 6))
        kernels = rng.standard_normal((4, 2, 3, 2))
        bias = rng.standard_normal(4)
        batched = conv2d_forward(x, kernels, bias, stride=2)
        for index in range(3):
            np.testing.assert_allclose(batched[index], conv2d_forward(x[index], kernels, bias, 2), atol=1e-12)

    @pytest.mark.unit
    @pytest.mark.parametrize("x_shape,k_shape,bias_shape", [
        ((2, 5, 5), (3, 1, 3, 3), (3,)),   # channel mismatch
        ((1, 2, 5), (1, 1, 3, 3), (1,)),   # kernel taller than input
        ((1, 5, 5), (2, 1, 3, 3), (3,)),   # bias length
        ((5, 5), (1, 1, 3, 3), (1,)),      # missing channel axis
    ])
    def test_shape_errors(self, x_shape, k_shape, bias_shape):
        with pytest.raises(ShapeError):
            conv2d_forward(np.zeros(x_shape), np.zeros(k_shape), np.zeros(bias_shape), stride=1)

    @pytest.mark.unit
    def test_backward_matches_finite_differences(self, rng):
        x = rng.standard_normal((2, 2, 7, 7))
        kernels = rng.standard_normal((3, 2, 3, 3))
        bias = rng.standard_normal(3)
        weights = rng.standard_normal((2, 3, 3, 3))

        def loss(p):
            return float(np.sum(conv2d_forward(p["x"], p["k"], p["b"], 2) * weights))

        params = {"x": x, "k": kernels, "b": bias}
        dx, dk, db = conv2d_backward(weights, x, kernels, 2)
        numeric = finite_diff_grad(loss, params)
        assert relative_error({"x": dx, "k": dk, "b": db}, numeric) < 1e-7


class TestDenseAndRelu:
    """Affine layer and ReLU rules."""

    @pytest.mark.unit
    def test_dense_forward_values(self):
        x = np.array([[1.0, 2.0]])
        weight = np.array([[1.0, 0.0], [0.5, -1.0], [0.0, 3.0]])
        bias = np.array([0.0, 1.0, -1.0])
        np.testing.assert_allclose(dense_forward(x, weight, bias), [[1.0, -0.5, 5.0]])

    @pytest.mark.unit
    def test_dense_forward_rejects_mismatched_width(self):
        with pytest.raises(ShapeError):
            dense_forward(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(4))
        with pytest.raises(ShapeError):
            dense_forward(np.zeros((2, 3)), np.zeros((4, 3)), np.zeros(3))

    @pytest.mark.unit
    def test_dense_backward_matches_finite_differences(self, rng):
        x = rng.standard_normal((4, 5))
        weight = rng.standard_normal((3, 5))
        bias = rng.standard_normal(3)
        upstream = rng.standard_normal((4, 3))

        def loss(p):
            return float(np.sum(dense_forward(p["x"], p["w"], p["b"]) * upstream))

        dx, dw, db = dense_backward(upstream, x, weight)
        numeric = finite_diff_grad(loss, {"x": x, "w": weight, "b": bias})
        assert relative_error({"x": dx, "w": dw, "b": db}, numeric) < 1e-7

    @pytest.mark.unit
    def test_relu_passes_gradient_only_where_positive(self):
        x = np.array([[-1.0, 0.0, 2.0]])
        np.testing.assert_array_equal(relu_forward(x), [[0.0, 0.0, 2.0]])
        np.testing.assert_array_equal(relu_backward(np.ones_like(x), x), [[0.0, 0.0, 1.0]])


class TestSoftmaxCrossEntropy:
    """Masked mean cross-entropy and its gradient."""

    @pytest.mark.unit
    def test_uniform_logits_give_log_classes(self):
        loss, _ = softmax_cross_entropy(np.zeros((3, 5)), np.array([0, 2, 4]), np.ones(5, dtype=bool))
        assert loss == pytest.approx(math.log(5), abs=1e-12)
        assert loss == pytest.approx(1.60944, abs=1e-5)

    @pytest.mark.unit
    def test_confident_correct_logit_has_tiny_loss(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 1000.0
        loss, _ = softmax_cross_entropy(logits, np.array([2]), np.ones(4, dtype=bool))
        assert loss < 1e-6

    @pytest.mark.unit
    def test_mask_equals_unmasked_subproblem(self, rng):
        """B=4, C=10 with five masked-in classes equals the 5-class loss on those columns."""
        logits = rng.standard_normal((4, 10))
        selected = np.array([1, 3, 4, 7, 9])
        mask = np.zeros(10, dtype=bool)
        mask[selected] = True
        labels = np.array([3, 9, 1, 7])
        loss, dlogits = softmax_cross_entropy(logits, labels, mask)

        sub_labels = np.searchsorted(selected, labels)
        sub_loss, sub_grad = softmax_cross_entropy(logits[:, selected], sub_labels, np.ones(5, dtype=bool))
        assert loss == pytest.approx(sub_loss, abs=1e-12)
        np.testing.assert_allclose(dlogits[:, selected], sub_grad, atol=1e-12)
        assert not dlogits[:, ~mask].any()

    @pytest.mark.unit
    def test_gradient_rows_sum_to_zero(self, rng):
        logits = rng.standard_normal((6, 7))
        mask = np.array([True, True, False, True, False, True, True])
        labels = np.array([0, 1, 3, 5, 6, 0])
        _, dlogits = softmax_cross_entropy(logits, labels, mask)
        np.testing.assert_allclose(dlogits[:, mask].sum(axis=1), 0.0, atol=1e-12)

    @pytest.mark.unit
    def test_gradient_matches_finite_differences(self, rng):
        logits = rng.standard_normal((3, 5))
        labels = np.array([0, 4, 2])
        mask = np.array([True, False, True, True, True])
        _, dlogits = softmax_cross_entropy(logits, labels, mask)
        numeric = finite_diff_grad(lambda p: softmax_cross_entropy(p["z"], labels, mask)[0], {"z": logits})
        assert relative_error({"z": dlogits}, numeric) < 1e-8

    @pytest.mark.unit
    def test_masked_out_label_raises(self):
        mask = np.array([True, False, True])
        with pytest.raises(ValidationError) as exc_info:
            softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 1]), mask)
        assert exc_info.value.details["masked_out_labels"] == [1]

    @pytest.mark.unit
    def test_empty_mask_raises(self):
        with pytest.raises(ValidationError):
            softmax_cross_entropy(np.zeros((1, 3)), np.array([0]), np.zeros(3, dtype=bool))

    @pytest.mark.unit
    def test_non_finite_logits_raise(self):
        logits = np.array([[np.nan, 0.0]])
        with pytest.raises(NumericalError):
            softmax_cross_entropy(logits, np.array([1]), np.ones(2, dtype=bool))


class TestModelBackward:
    """Tape replay against finite differences on the full model."""

    @staticmethod
    def _has_relu_kink(tape, tolerance=1e-4):
        return any(np.any(np.abs(entry.cache["x"]) < tolerance) for entry in tape.entries if entry.op == "relu")

    @pytest.mark.unit
    def test_conv_model_gradients_match_finite_differences(self, small_conv_config):
        """20 random instantiations, max relative error below 1e-6."""
        config = small_conv_config
        mask = make_mask(config, [0, 1, 3, 4])
        labels = np.array([0, 3, 4])
        draw = np.random.default_rng(123)
        checked = 0
        while checked < 20:
            params = init_params(config, draw)
            batch = draw.standard_normal((3,) + config.input_shape)
            logits, tape = predict(params, batch, mask, config)
            if self._has_relu_kink(tape):
                continue
            _, dlogits = softmax_cross_entropy(logits, labels, mask)
            analytic = model_backward(tape, dlogits)

            def loss(p):
                return softmax_cross_entropy(predict(p, batch, mask, config)[0], labels, mask)[0]

            assert relative_error(analytic, finite_diff_grad(loss, params, h=1e-5)) < 1e-6
            checked += 1

    @pytest.mark.unit
    def test_mlp_gradients_match_finite_differences(self, mlp_config, rng):
        params = init_params(mlp_config, rng)
        batch = rng.standard_normal((5,) + mlp_config.input_shape)
        mask = make_mask(mlp_config, [0, 2, 5])
        labels = np.array([0, 2, 5, 5, 0])
        logits, tape = predict(params, batch, mask, mlp_config)
        _, dlogits = softmax_cross_entropy(logits, labels, mask)
        analytic = model_backward(tape, dlogits)
        numeric = finite_diff_grad(
            lambda p: softmax_cross_entropy(predict(p, batch, mask, mlp_config)[0], labels, mask)[0], params)
        assert relative_error(analytic, numeric) < 1e-6

    @pytest.mark.unit
    def test_masked_head_rows_get_exact_zero_gradient(self, small_conv_config, rng):
        params = init_params(small_conv_config, rng)
        batch = rng.standard_normal((4,) + small_conv_config.input_shape)
        mask = make_mask(small_conv_config, [1, 2])
        logits, tape = predict(params, batch, mask, small_conv_config)
        _, dlogits = softmax_cross_entropy(logits, np.array([1, 2, 2, 1]), mask)
        grads = model_backward(tape, dlogits)
        assert not grads["head.weight"][~mask].any()
        assert not grads["head.bias"][~mask].any()

    @pytest.mark.unit
    def test_zero_upstream_gives_zero_gradients(self, small_conv_config, rng):
        params = init_params(small_conv_config, rng)
        batch = rng.standard_normal((2,) + small_conv_config.input_shape)
        logits, tape = predict(params, batch, make_mask(small_conv_config, [0]), small_conv_config)
        grads = model_backward(tape, np.zeros_like(logits))
        assert list(grads) == list(params)
        assert all(not value.any() for value in grads.values())

    @pytest.mark.unit
    def test_wrong_upstream_shape_raises(self, small_conv_config, rng):
        params = init_params(small_conv_config, rng)
        batch = rng.standard_normal((2,) + small_conv_config.input_shape)
        _, tape = predict(params, batch, make_mask(small_conv_config, [0]), small_conv_config)
        with pytest.raises(ShapeError):
            model_backward(tape, np.zeros((3, 5)))

    @pytest.mark.unit
    def test_dense_backward_shapes(self, rng):
        x, w = rng.standard_normal((4, 3)), rng.standard_normal((2, 3))
        dx, dw, db = dense_backward(np.ones((4, 2)), x, w)
        assert dx.shape == (4, 3) and dw.shape == (2, 3) and db.shape == (2,)
        np.testing.assert_allclose(db, [4.0, 4.0])


class TestAdamStep:
    """Bias-corrected Adam and plain SGD."""

    @pytest.mark.unit
    def test_zero_gradient_leaves_params_unchanged(self):
        params = {"w": np.array([1.0, -2.0])}
        new_params, state = adam_step(params, {"w": np.zeros(2)}, AdamState.fresh(params), 0.001)
        np.testing.assert_array_equal(new_params["w"], params["w"])
        assert state.t == 1

    @pytest.mark.unit
    @pytest.mark.parametrize("grad", [0.5, 100.0])
    def test_first_step_magnitude_is_learning_rate(self, grad):
        """First step is lr * g / (|g| + eps) regardless of gradient scale."""
        params = {"w": np.array([1.0])}
        new_params, _ = adam_step(params, {"w": np.array([grad])}, AdamState.fresh(params), 0.001)
        step = params["w"][0] - new_params["w"][0]
        assert step == pytest.approx(0.001 * grad / (grad + 1e-8), rel=1e-12)
        assert step == pytest.approx(0.001, rel=1e-6)

    @pytest.mark.unit
    def test_inputs_not_mutated_and_deterministic(self, rng):
        params = {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal(3)}
        grads = {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal(3)}
        before = copy_params(params)
        state = AdamState.fresh(params)
        first = adam_step(params, grads, state, 0.01)
        second = adam_step(params, grads, state, 0.01)
        assert params_equal(params, before)
        assert params_equal(first[0], second[0])
        assert state.t == 0 and not state.m["a"].any()
        assert all((v >= 0).all() for v in first[1].v.values())

    @pytest.mark.unit
    def test_trainable_subset_passes_others_through_bitwise(self, rng):
        params = {"fe": rng.standard_normal(4), "head": rng.standard_normal(2)}
        grads = {"fe": np.ones(4), "head": np.ones(2)}
        new_params, state = adam_step(params, grads, AdamState.fresh(params), 0.1, trainable=["head"])
        assert new_params["fe"] is params["fe"]
        assert not np.array_equal(new_params["head"], params["head"])
        assert not state.m["fe"].any()

    @pytest.mark.unit
    def test_non_finite_gradient_names_parameter(self):
        params = {"w": np.zeros(2), "v": np.zeros(1)}
        with pytest.raises(NumericalError) as exc_info:
            adam_step(params, {"w": np.zeros(2), "v": np.array([np.inf])}, AdamState.fresh(params), 0.1)
        assert exc_info.value.details["parameter"] == "v"

    @pytest.mark.unit
    def test_sgd_step_is_plain_descent(self):
        params = {"w": np.array([1.0, 2.0])}
        state = AdamState.fresh(params)
        new_params, new_state = sgd_step(params, {"w": np.array([0.5, -1.0])}, state, 0.1)
        np.testing.assert_allclose(new_params["w"], [0.95, 2.1], rtol=0, atol=1e-15)
        assert new_state.t == 1
        assert new_state.m is state.m


class TestHelpers:
    """Finite differences and gradient-set helpers."""

    @pytest.mark.unit
    def test_finite_diff_of_quadratic(self):
        grads = finite_diff_grad(lambda p: float(np.sum(p["t"] ** 2)), {"t": np.array([1.0, 2.0])})
        np.testing.assert_allclose(grads["t"], [2.0, 4.0], atol=1e-8)

    @pytest.mark.unit
    def test_finite_diff_of_constant(self):
        grads = finite_diff_grad(lambda p: 3.0, {"t": np.ones((2, 2))})
        assert np.abs(grads["t"]).max() < 1e-9

    @pytest.mark.unit
    def test_finite_diff_rejects_non_positive_step(self):
        with pytest.raises(ValidationError):
            finite_diff_grad(lambda p: 0.0, {"t": np.ones(1)}, h=0.0)

    @pytest.mark.unit
    def test_add_and_scale(self):
        g = {"a": np.array([1.0, 2.0])}
        np.testing.assert_array_equal(add_grads(g, g)["a"], scale_grads(g, 2.0)["a"])
        with pytest.raises(ShapeError):
            add_grads(g, {"b": np.array([1.0, 2.0])})

    @pytest.mark.unit
    def test_relative_error_uses_floor(self):
        assert relative_error({"a": np.zeros(2)}, {"a": np.zeros(2)}) == 0.0
        assert relative_error({"a": np.array([1.0])}, {"a": np.array([1.1])}) == pytest.approx(0.1 / 1.1)
