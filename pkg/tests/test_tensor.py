import numpy as np
import pytest

from qeframe.exc import ContractError, DegenerateInputError, ShapeError
from qeframe.tensor import (
    Tensor,
    concat,
    cosine,
    default_dtype,
    embedding,
    get_default_dtype,
    layer_norm,
    masked_fill,
    matmul,
    mse,
    no_grad,
)
from tests.conftest import numerical_gradient, relative_error


def _check_gradient(build, *arrays, tol=1e-6):
    """`build(*tensors)` returns a scalar tensor; compare backward() with central differences."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*tensors)
    loss.backward()
    for tensor in tensors:

        def f():
            with no_grad():
                return build(*[Tensor(t.data) for t in tensors]).item()

        numeric = numerical_gradient(f, tensor.data)
        assert relative_error(tensor.grad, numeric) < tol, tensor


def test_default_dtype_is_float32():
    assert get_default_dtype() == np.float32
    assert Tensor([1.0, 2.0]).dtype == np.float32


def test_default_dtype_context_restores():
    with default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


@pytest.mark.parametrize(
    "build, shapes",
    [
        (lambda a, b: (a + b).sum(), [(3, 4), (4,)]),
        (lambda a, b: (a - b * 2.0).sum(), [(2, 3), (2, 1)]),
        (lambda a, b: (a * b).mean(), [(3, 4), (3, 4)]),
        (lambda a, b: (a / (b * b + 1.0)).sum(), [(2, 2), (2, 2)]),
        (lambda a, b: (a @ b).sum(), [(3, 4), (4, 2)]),
        (lambda a, b: ((a @ b) ** 2).mean(), [(2, 3, 4), (4, 5)]),
        (lambda a: a.softmax(axis=-1)[:, 0].sum(), [(3, 5)]),
        (lambda a: a.gelu().sum(), [(4, 3)]),
        (lambda a: a.max(axis=1).sum(), [(3, 4)]),
        (lambda a: a.transpose(1, 0).reshape(6)[1:4].sum(), [(2, 3)]),
        (lambda a, b: concat([a, b], axis=0).mean(), [(2, 3), (1, 3)]),
        (lambda a: (a.sum(axis=0, keepdims=True) * a).sum(), [(3, 2)]),
    ],
)
def test_op_gradients_match_finite_differences(float64, rng, build, shapes):
    arrays = [rng.normal(size=shape) for shape in shapes]
    _check_gradient(build, *arrays)


def test_layer_norm_gradient(float64, rng):
    _check_gradient(
        lambda x, g, b: (layer_norm(x, g, b) * Tensor(np.arange(12.0).reshape(3, 4))).sum(),
        rng.normal(size=(3, 4)),
        rng.normal(size=4),
        rng.normal(size=4),
    )


def test_cosine_gradient(float64, rng):
    _check_gradient(lambda a, b: cosine(a, b).sum(), rng.normal(size=(3, 5)), rng.normal(size=(3, 5)))


def test_mse_gradient(float64, rng):
    _check_gradient(lambda p, y: mse(p, y), rng.normal(size=6), rng.normal(size=6))


def test_embedding_gradient_accumulates_repeated_ids(float64):
    weight = Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
    embedding(weight, np.array([[1, 1], [3, 0]])).sum().backward()
    np.testing.assert_array_equal(weight.grad, [[1, 1], [2, 2], [0, 0], [1, 1]])


def test_embedding_out_of_range():
    weight = Tensor(np.zeros((4, 2)))
    with pytest.raises(ContractError):
        embedding(weight, np.array([0, 4]))
    with pytest.raises(ContractError):
        embedding(weight, np.array([-1]))


def test_masked_fill_blocks_gradient(float64):
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    mask = np.array([[True, False, False], [False, False, True]])
    out = masked_fill(x, mask, -5.0)
    assert out.data[0, 0] == -5.0
    out.sum().backward()
    np.testing.assert_array_equal(x.grad, (~mask).astype(float))


def test_masked_fill_shape_mismatch():
    with pytest.raises(ShapeError):
        masked_fill(Tensor(np.ones((2, 3))), np.ones((3, 2), dtype=bool), 0.0)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_add_shape_error():
    with pytest.raises(ShapeError, match="add"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_requires_graph():
    with pytest.raises(ContractError):
        Tensor(1.0).backward()


def test_gradients_accumulate_until_zeroed(float64):
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_shared_subexpression_visited_once(float64):
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    (y + y).backward()
    assert x.grad == pytest.approx(8.0)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_softmax_masks_minus_infinity():
    x = Tensor([[0.0, -np.inf, 1.0]])
    out = x.softmax().numpy()
    assert out[0, 1] == 0.0
    assert out.sum() == pytest.approx(1.0)


def test_softmax_large_inputs_stay_finite():
    out = Tensor([[1000.0, 1000.0]]).softmax().numpy()
    np.testing.assert_allclose(out, [[0.5, 0.5]])


@pytest.mark.parametrize("dtype, tolerance", [(np.float64, 1e-12), (np.float32, 1e-6)])
def test_softmax_rows_sum_to_one(rng, dtype, tolerance):
    x = Tensor(rng.normal(scale=10.0, size=(50, 7)), dtype=dtype)
    out = x.softmax(axis=-1).numpy()
    assert out.dtype == dtype
    np.testing.assert_allclose(out.astype(np.float64).sum(axis=-1), 1.0, rtol=0, atol=tolerance)


def test_layer_norm_constant_row_is_zero(float64):
    x = Tensor(np.full((2, 4), 3.0))
    out = layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=1e-12)
    np.testing.assert_array_equal(out.numpy(), np.zeros((2, 4)))


def test_layer_norm_normalises(float64, rng):
    out = layer_norm(Tensor(rng.normal(size=(5, 16))), Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-12)
    np.testing.assert_allclose(out.numpy().mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.numpy().std(axis=-1), 1.0, atol=1e-9)


@pytest.mark.parametrize("eps", [0.0, -1e-5])
def test_layer_norm_rejects_non_positive_eps(eps):
    with pytest.raises(ContractError):
        layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=eps)


def test_layer_norm_gain_mismatch():
    with pytest.raises(ShapeError):
        layer_norm(Tensor(np.ones((1, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))


def test_cosine_identical_vectors_is_exactly_one(rng):
    v = Tensor(rng.normal(size=(4, 7)))
    np.testing.assert_array_equal(cosine(v, v).numpy(), np.ones(4, dtype=np.float32))


def test_cosine_opposite_vectors():
    a = Tensor([[1.0, 2.0]])
    assert cosine(a, -a).item() == pytest.approx(-1.0)


def test_cosine_zero_vector():
    with pytest.raises(DegenerateInputError):
        cosine(Tensor([[0.0, 0.0]]), Tensor([[1.0, 0.0]]))


def test_mse_value():
    assert mse(Tensor([1.0, 2.0]), Tensor([1.0, 4.0])).item() == pytest.approx(2.0)
