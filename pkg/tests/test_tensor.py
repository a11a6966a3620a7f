"""Tensor engine: forward oracles, gradient checks, structural invariants."""

import numpy as np
import pytest

import armhand.tensor as T
from armhand.tensor import Tensor, ShapeError, ContractError

from fdcheck import check_gradients


@pytest.fixture
def rng():
    return np.random.default_rng(20240)


class TestMatmul:
    def test_identity(self, rng):
        m = rng.normal(size=(3, 3))
        out = T.matmul(Tensor(np.eye(3)), Tensor(m))
        np.testing.assert_array_equal(out.data, m)

    def test_hand_arithmetic(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[0.0], [1.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, [[2.0], [4.0]])

    def test_zero_case(self, rng):
        out = T.matmul(Tensor(np.zeros((2, 3))), Tensor(rng.normal(size=(3, 5))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 5)))

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)

    def test_gradients(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        check_gradients(lambda x, y: T.matmul(x, y).sum(), [a, b])

    def test_batched_gradients(self, rng):
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(4, 2))  # shared across the batch
        check_gradients(lambda x, y: (T.matmul(x, y) * T.matmul(x, y)).sum(), [a, b])


class TestLayerNorm:
    def test_constant_vector_is_zeroed(self):
        out = T.layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_two_point_closed_form(self):
        out = T.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-14)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-6)

    def test_zero_gain_passes_bias(self, rng):
        x = rng.normal(size=(4, 5))
        bias = rng.normal(size=5)
        out = T.layer_norm(Tensor(x), Tensor(np.zeros(5)), Tensor(bias))
        np.testing.assert_array_equal(out.data, np.broadcast_to(bias, (4, 5)))

    def test_empty_axis_error(self):
        with pytest.raises(ShapeError):
            T.layer_norm(Tensor(np.zeros((3, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))

    def test_output_mean_invariant(self, rng):
        x = rng.normal(size=(6, 9)) * 3.0
        out = T.layer_norm(Tensor(x), Tensor(np.ones(9)), Tensor(np.zeros(9)))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-9)

    def test_gradients(self, rng):
        x = rng.normal(size=(3, 5))
        g = rng.normal(size=5)
        b = rng.normal(size=5)
        check_gradients(
            lambda xx, gg, bb: (T.layer_norm(xx, gg, bb) * T.layer_norm(xx, gg, bb)).sum(),
            [x, g, b])


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, 1.0 / 3.0)

    def test_stabilized_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_shift_invariance(self, rng):
        for _ in range(20):
            x = rng.normal(size=(4, 6)) * 5.0
            c = float(rng.normal() * 100.0)
            a = T.softmax(Tensor(x), axis=-1).data
            b = T.softmax(Tensor(x + c), axis=-1).data
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        x = rng.normal(size=(5, 7)) * 10.0
        out = T.softmax(Tensor(x), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_gradients(self, rng):
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4))
        check_gradients(lambda xx: (T.softmax(xx, axis=-1) * Tensor(w)).sum(), [x])


class TestConv1d:
    def test_width_one_is_per_frame_linear(self, rng):
        x = rng.normal(size=(6, 3))
        w = rng.normal(size=(1, 3, 2))
        b = rng.normal(size=2)
        out = T.conv1d(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, x @ w[0] + b, atol=1e-12)

    def test_zero_input_gives_bias(self, rng):
        b = rng.normal(size=4)
        out = T.conv1d(Tensor(np.zeros((5, 2))), Tensor(np.zeros((3, 2, 4))), Tensor(b))
        np.testing.assert_array_equal(out.data, np.broadcast_to(b, (5, 4)))

    def test_width3_against_brute_force(self):
        x = np.array([[1.0], [2.0], [3.0], [4.0]])
        w = np.full((3, 1, 1), 1.0 / 3.0)
        b = np.zeros(1)
        out = T.conv1d(Tensor(x), Tensor(w), Tensor(b)).data[:, 0]
        # direct summation with explicit zero padding
        xp = np.concatenate([[0.0], x[:, 0], [0.0]])
        expected = np.array([xp[t:t + 3].sum() / 3.0 for t in range(4)])
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_kernel_too_wide(self):
        with pytest.raises(ShapeError):
            T.conv1d(Tensor(np.zeros((2, 1))), Tensor(np.zeros((9, 1, 1))),
                     Tensor(np.zeros(1)), padding=0)

    def test_batched_matches_per_sequence(self, rng):
        x = rng.normal(size=(3, 7, 2))
        w = rng.normal(size=(3, 2, 4))
        b = rng.normal(size=4)
        batched = T.conv1d(Tensor(x), Tensor(w), Tensor(b)).data
        for i in range(3):
            single = T.conv1d(Tensor(x[i]), Tensor(w), Tensor(b)).data
            np.testing.assert_array_equal(batched[i], single)

    def test_gradients(self, rng):
        x = rng.normal(size=(5, 2))
        w = rng.normal(size=(3, 2, 2))
        b = rng.normal(size=2)
        check_gradients(
            lambda xx, ww, bb: (T.conv1d(xx, ww, bb) * T.conv1d(xx, ww, bb)).sum(),
            [x, w, b])

    def test_gradients_batched(self, rng):
        x = rng.normal(size=(2, 4, 2))
        w = rng.normal(size=(3, 2, 1))
        b = rng.normal(size=1)
        check_gradients(lambda xx, ww, bb: T.conv1d(xx, ww, bb).sum(), [x, w, b])


class TestBackwardContract:
    def test_sum_gradient_is_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_quadratic_gradient(self, rng):
        v = rng.normal(size=(4,))
        x = Tensor(v, requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2.0 * v, atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_gradient_linearity(self, rng):
        v = rng.normal(size=(3, 3))
        x = Tensor(v, requires_grad=True)
        loss_a = (x * x).sum()
        loss_b = x.mean()
        (loss_a + loss_b).backward()
        combined = x.grad.copy()

        x1 = Tensor(v, requires_grad=True)
        (x1 * x1).sum().backward()
        x1.mean().backward()
        np.testing.assert_allclose(combined, x1.grad, atol=1e-12)

    def test_reused_operand_accumulates(self, rng):
        v = rng.normal(size=(3,))
        x = Tensor(v, requires_grad=True)
        (x * x).sum().backward()  # x appears twice in one node
        np.testing.assert_allclose(x.grad, 2.0 * v, atol=1e-12)

    def test_no_grad_suppresses_tape(self, rng):
        x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with T.no_grad():
            y = (x * x).sum()
        assert not y.requires_grad and y._parents == ()


class TestShapeOps:
    def test_reshape_round_trip(self, rng):
        v = rng.normal(size=(3, 4, 2))
        out = Tensor(v).reshape(6, 4).reshape(3, 4, 2)
        np.testing.assert_array_equal(out.data, v)

    def test_strict_add_rejects_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))

    def test_add_bias_trailing_axis_only(self):
        with pytest.raises(ShapeError):
            T.add_bias(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))

    def test_concat_and_slice_gradients(self, rng):
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(1, 3))
        check_gradients(
            lambda x, y: (T.concat([x, y], axis=0)[1:, :] * T.concat([x, y], axis=0)[1:, :]).sum(),
            [a, b])

    def test_stack_gradients(self, rng):
        a = rng.normal(size=(2, 2))
        b = rng.normal(size=(2, 2))
        check_gradients(lambda x, y: (T.stack([x, y], axis=1) * T.stack([x, y], axis=1)).sum(),
                        [a, b])

    def test_transpose_gradients(self, rng):
        a = rng.normal(size=(2, 3, 4))
        check_gradients(lambda x: (x.transpose(2, 0, 1) * x.transpose(2, 0, 1)).sum(), [a])

    def test_embedding_lookup_and_gradients(self, rng):
        table = rng.normal(size=(5, 3))
        idx = np.array([0, 2, 2, 4])
        out = T.embedding(Tensor(table), idx)
        np.testing.assert_array_equal(out.data, table[idx])
        check_gradients(lambda t: (T.embedding(t, idx) * T.embedding(t, idx)).sum(), [table])


class TestPointwiseGradients:
    """Every remaining differentiable primitive against the FD oracle."""

    def test_elementwise_suite(self, rng):
        a = rng.normal(size=(3, 3))
        b = rng.normal(size=(3, 3)) + 3.0  # keep denominators away from 0
        check_gradients(lambda x, y: (x + y).sum(), [a, b])
        check_gradients(lambda x, y: (x - y).mean(), [a, b])
        check_gradients(lambda x, y: (x * y).sum(), [a, b])
        check_gradients(lambda x, y: (x / y).sum(), [a, b])
        check_gradients(lambda x: (-x).sum(), [a])
        check_gradients(lambda x: (x * 2.5 + 1.0).sum(), [a])
        check_gradients(lambda x: (x / 3.0).sum(), [a])

    def test_activation_suite(self, rng):
        # keep samples away from the relu/clamp kinks
        x = rng.normal(size=(4, 4))
        x = np.where(np.abs(x) < 0.2, x + 0.5, x)
        check_gradients(lambda t: T.relu(t).sum(), [x])
        check_gradients(lambda t: T.leaky_relu(t, 0.2).sum(), [x])
        check_gradients(lambda t: T.gelu(t).sum(), [x])
        check_gradients(lambda t: T.sigmoid(t).sum(), [x])
        check_gradients(lambda t: T.exp(t).mean(), [x])
        check_gradients(lambda t: T.clamp_min(t, -0.7).sum(), [x])

    def test_log_sqrt_on_positive_inputs(self, rng):
        x = rng.uniform(0.5, 3.0, size=(3, 4))
        check_gradients(lambda t: T.log(t).sum(), [x])
        check_gradients(lambda t: T.sqrt(t).sum(), [x])

    def test_reduction_gradients(self, rng):
        x = rng.normal(size=(3, 4, 2))
        check_gradients(lambda t: t.sum(axis=1).mean(), [x])
        check_gradients(lambda t: t.mean(axis=(0, 2)).sum(), [x])
        check_gradients(lambda t: (t.sum(axis=0, keepdims=True) * t.sum(axis=0, keepdims=True)).sum(), [x])

    def test_broadcast_add_gradients(self, rng):
        a = rng.normal(size=(3, 1, 4))
        b = rng.normal(size=(2, 4))
        check_gradients(lambda x, y: (T.broadcast_add(x, y) * T.broadcast_add(x, y)).sum(), [a, b])

    def test_add_bias_gradients(self, rng):
        x = rng.normal(size=(3, 2, 4))
        b = rng.normal(size=4)
        check_gradients(lambda xx, bb: (T.add_bias(xx, bb) * T.add_bias(xx, bb)).sum(), [x, b])

    def test_dropout_mask_consistency(self, rng):
        x = Tensor(rng.normal(size=(50,)), requires_grad=True)
        out = T.dropout(x, 0.4, np.random.default_rng(7))
        out.sum().backward()
        # gradient equals the applied (scaled) mask
        mask = out.data / np.where(x.data == 0.0, 1.0, x.data)
        np.testing.assert_allclose(x.grad, mask, atol=1e-12)
        assert set(np.round(np.unique(x.grad), 6)) <= {0.0, round(1 / 0.6, 6)}

    def test_dropout_rate_zero_identity(self, rng):
        x = Tensor(rng.normal(size=(5,)), requires_grad=True)
        assert T.dropout(x, 0.0, np.random.default_rng(0)) is x
