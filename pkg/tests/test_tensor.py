"""Tests for tensors and reverse-mode differentiation."""

import numpy as np
import pytest

from malmm.tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    concat_rows,
    gelu,
    layer_norm,
    log_softmax_rows,
    matmul,
    mean_rows,
    mul,
    scale,
    slice_rows,
    softmax_rows,
    sum_all,
    tile_rows,
    transpose,
)


def numeric_gradient(fn, x, h=1e-6):
    """Central finite differences of a scalar function of an array."""
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        plus = x.copy()
        plus[index] += h
        minus = x.copy()
        minus[index] -= h
        grad[index] = (fn(plus) - fn(minus)) / (2 * h)
    return grad


def check_gradients(op, *arrays, seed=0):
    """Compare backward() against finite differences for every input of ``op``."""
    rng = np.random.default_rng(seed)
    tape = Tape()
    leaves = [tape.watch(Tensor(a)) for a in arrays]
    out = op(*leaves)
    weights = rng.normal(size=out.shape)
    loss = sum_all(mul(out, Tensor(weights)))
    grads = backward(tape, loss)

    for i, array in enumerate(arrays):

        def value(x, i=i):
            inputs = [Tensor(a) for a in arrays]
            inputs[i] = Tensor(x)
            return float((op(*inputs).data * weights).sum())

        expected = numeric_gradient(value, np.array(array, dtype=float))
        actual = grads[leaves[i].node_id].data
        np.testing.assert_allclose(actual, expected, rtol=1e-5, atol=1e-7)


class TestTensor:
    """Test cases for the Tensor value type."""

    def test_tensor_is_immutable(self):
        """Test that tensor values cannot be written in place."""
        t = Tensor([[1.0, 2.0]])

        with pytest.raises(ValueError):
            t.data[0, 0] = 5.0

    def test_tensor_copies_input(self):
        """Test that mutating the source array does not change a tensor."""
        source = np.array([[1.0, 2.0]])
        t = Tensor(source)
        source[0, 0] = 9.0

        assert t.data[0, 0] == 1.0

    def test_zero_sized_dimension_rejected(self):
        """Test that every dimension must be at least 1."""
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_item(self):
        """Test scalar extraction."""
        assert Tensor(2.5).item() == 2.5
        assert Tensor([[3.0]]).item() == 3.0

        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()

    def test_untraced_ops_are_not_recorded(self):
        """Test that operations on plain tensors produce plain tensors."""
        out = add(Tensor([1.0]), Tensor([2.0]))

        assert not out.is_traced
        assert out.tolist() == [3.0]

    def test_detach(self):
        """Test that detach drops the tape."""
        tape = Tape()
        leaf = tape.watch(Tensor([1.0, 2.0]))

        assert leaf.is_traced
        assert not leaf.detach().is_traced
        np.testing.assert_array_equal(leaf.detach().data, leaf.data)


class TestOperations:
    """Test cases for forward values and shape checks."""

    def test_matmul(self):
        """Test matrix product values."""
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0], [6.0]])

        assert matmul(a, b).tolist() == [[17.0], [39.0]]

    def test_matmul_shape_error_names_both_shapes(self):
        """Test that an inner dimension mismatch reports both shapes."""
        with pytest.raises(ShapeError) as exc_info:
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

        assert "(2, 3)" in str(exc_info.value)

    def test_add_requires_same_shape(self):
        """Test that elementwise ops do not broadcast."""
        with pytest.raises(ShapeError):
            add(Tensor(np.ones((2, 2))), Tensor(np.ones((1, 2))))
        with pytest.raises(ShapeError):
            mul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 1))))

    def test_softmax_rows_sum_to_one(self):
        """Test that softmax rows are distributions."""
        x = Tensor(np.random.default_rng(1).normal(size=(4, 5)))
        y = softmax_rows(x).data

        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(y > 0)

    def test_softmax_is_stable_for_large_inputs(self):
        """Test that large logits do not overflow."""
        y = softmax_rows(Tensor([[1000.0, 1001.0]])).data

        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y, [[1 / (1 + np.e), np.e / (1 + np.e)]])

    def test_softmax_rejects_non_finite(self):
        """Test that NaN or infinite input raises NonFiniteError."""
        with pytest.raises(NonFiniteError):
            softmax_rows(Tensor([[np.nan, 1.0]]))
        with pytest.raises(NonFiniteError):
            log_softmax_rows(Tensor([[np.inf, 1.0]]))

    def test_log_softmax_matches_softmax(self):
        """Test that log_softmax_rows equals log(softmax_rows)."""
        x = Tensor([[0.5, -1.0, 2.0]])

        np.testing.assert_allclose(
            log_softmax_rows(x).data, np.log(softmax_rows(x).data), atol=1e-12
        )

    def test_layer_norm_normalizes_rows(self):
        """Test zero mean and unit variance with identity affine."""
        x = Tensor(np.random.default_rng(2).normal(3.0, 2.0, size=(3, 6)))
        out = layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6))).data

        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-5)

    def test_layer_norm_validation(self):
        """Test eps and affine shape checks."""
        x = Tensor(np.ones((2, 3)))

        with pytest.raises(ValueError):
            layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)
        with pytest.raises(ShapeError):
            layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(3)))

    def test_gelu(self):
        """Test GELU at a few reference points."""
        out = gelu(Tensor([0.0, 10.0, -10.0])).data

        assert out[0] == 0.0
        assert out[1] == pytest.approx(10.0)
        assert out[2] == pytest.approx(0.0, abs=1e-5)

    def test_row_helpers(self):
        """Test transpose, concat, slice, tile and mean over rows."""
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0]])

        assert transpose(a).tolist() == [[1.0, 3.0], [2.0, 4.0]]
        assert concat_rows([a, b]).shape == (3, 2)
        assert slice_rows(a, 1, 2).tolist() == [[3.0, 4.0]]
        assert tile_rows(b, 3).tolist() == [[5.0, 6.0]] * 3
        assert mean_rows(a).tolist() == [[2.0, 3.0]]
        assert sum_all(a).shape == (1,)
        assert sum_all(a).item() == 10.0

    def test_row_helper_errors(self):
        """Test shape errors from the row helpers."""
        a = Tensor(np.ones((2, 2)))

        with pytest.raises(ShapeError):
            slice_rows(a, 1, 3)
        with pytest.raises(ShapeError):
            slice_rows(a, 1, 1)
        with pytest.raises(ShapeError):
            concat_rows([])
        with pytest.raises(ShapeError):
            concat_rows([a, Tensor(np.ones((1, 3)))])
        with pytest.raises(ShapeError):
            tile_rows(a, 2)


class TestBackward:
    """Test cases for gradients."""

    def test_reused_input_accumulates(self):
        """Test that gradients from every use of a tensor are summed."""
        tape = Tape()
        w = tape.watch(Tensor([1.0, -2.0, 3.0]))
        grads = backward(tape, sum_all(mul(w, w)))

        np.testing.assert_array_equal(grads[w.node_id].data, [2.0, -4.0, 6.0])

    def test_constants_get_no_gradient(self):
        """Test that untraced inputs have no entry in the gradient map."""
        tape = Tape()
        w = tape.watch(Tensor([1.0, 2.0]))
        c = Tensor([3.0, 4.0])
        grads = backward(tape, sum_all(mul(w, c)))

        np.testing.assert_array_equal(grads[w.node_id].data, [3.0, 4.0])
        assert c.node_id is None

    def test_loss_must_be_scalar(self):
        """Test that backward rejects non-scalar losses."""
        tape = Tape()
        w = tape.watch(Tensor([1.0, 2.0]))

        with pytest.raises(ShapeError):
            backward(tape, scale(w, 2.0))

    def test_loss_must_be_on_tape(self):
        """Test that backward rejects a loss from another tape."""
        tape, other = Tape(), Tape()
        w = other.watch(Tensor([1.0]))

        with pytest.raises(ValueError):
            backward(tape, sum_all(w))
        with pytest.raises(ValueError):
            backward(tape, Tensor([1.0]))

    def test_mixing_tapes_fails(self):
        """Test that combining tensors from two tapes is refused."""
        a = Tape().watch(Tensor([1.0]))
        b = Tape().watch(Tensor([2.0]))

        with pytest.raises(ValueError):
            add(a, b)

    def test_matmul_gradient(self):
        """Test matmul gradients for both operands."""
        rng = np.random.default_rng(0)
        check_gradients(matmul, rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))

    def test_elementwise_gradients(self):
        """Test add, mul, scale and gelu gradients."""
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))

        check_gradients(add, a, b)
        check_gradients(mul, a, b)
        check_gradients(lambda x: scale(x, -0.7), a)
        check_gradients(gelu, a)

    def test_softmax_gradients(self):
        """Test softmax and log-softmax gradients."""
        x = np.random.default_rng(2).normal(size=(3, 4))

        check_gradients(softmax_rows, x)
        check_gradients(log_softmax_rows, x)

    def test_layer_norm_gradient(self):
        """Test layer norm gradients for input, gain and shift."""
        rng = np.random.default_rng(3)
        check_gradients(
            layer_norm,
            rng.normal(size=(3, 5)),
            rng.normal(1.0, 0.2, size=5),
            rng.normal(size=5),
        )

    def test_row_helper_gradients(self):
        """Test gradients of the row helpers."""
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(1, 3))

        check_gradients(transpose, a)
        check_gradients(lambda x, y: concat_rows([x, y, x]), a, b)
        check_gradients(lambda x: slice_rows(x, 1, 2), a)
        check_gradients(lambda x: tile_rows(x, 4), b)
        check_gradients(mean_rows, a)
