import numpy as np
import pytest

from app.core.errors import ContractViolation, DimensionError, MaskError
from app.services import numcore as nc


def test_matmul_examples():
    eye = nc.Tensor(np.eye(2))
    assert np.array_equal(nc.matmul(eye, eye).data, np.eye(2))
    out = nc.matmul(nc.Tensor([[1.0, 2.0], [3.0, 4.0]]), nc.Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as exc:
        nc.matmul(nc.Tensor(np.zeros((2, 3))), nc.Tensor(np.zeros((2, 3))))
    assert exc.value.shapes == ((2, 3), (2, 3))
    assert '[2, 3] vs [2, 3]' in str(exc.value)


def test_add_rejects_incompatible_shapes():
    with pytest.raises(DimensionError):
        nc.add(nc.Tensor(np.zeros((2, 3))), nc.Tensor(np.zeros((3, 2))))


def test_softmax_uniform_and_stable():
    assert np.allclose(nc.softmax_lastdim(nc.Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    out = nc.softmax_lastdim(nc.Tensor([1000.0, 0.0])).data
    assert abs(out[0] - 1.0) < 1e-12 and abs(out[1]) < 1e-12


def test_softmax_masked_entries_get_zero():
    out = nc.softmax_lastdim(nc.Tensor([1.0, 2.0, 3.0]), mask=np.array([True, True, False])).data
    e = np.exp([1.0, 2.0])
    expected = np.append(e / e.sum(), 0.0)
    assert np.allclose(out, expected, atol=1e-15)
    assert out[2] == 0.0


def test_softmax_fully_masked_row_raises():
    with pytest.raises(MaskError):
        nc.softmax_lastdim(nc.Tensor([[1.0, 2.0], [3.0, 4.0]]), mask=np.array([[True, False], [False, False]]))


def test_elementwise_examples():
    assert nc.cumsum_lastdim(nc.Tensor([1.0, 1.0, 1.0, 1.0])).data.tolist() == [1.0, 2.0, 3.0, 4.0]
    assert nc.relu(nc.Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert np.allclose(nc.layer_norm(nc.Tensor(np.full(5, 3.7))).data, 0.0)


def test_l2_normalize_gives_unit_rows(rng):
    x = nc.Tensor(rng.normal(size=(4, 6)))
    assert np.allclose(np.linalg.norm(nc.l2_normalize_lastdim(x).data, axis=-1), 1.0)


def test_backward_sum_of_squares():
    x = nc.Tensor([1.0, 2.0], requires_grad=True)
    nc.sum_(nc.mul(x, x)).backward()
    assert x.grad.tolist() == [2.0, 4.0]


def test_shared_subexpression_accumulates_gradient():
    x = nc.Tensor([3.0], requires_grad=True)
    y = nc.mul(x, 2.0)
    nc.sum_(nc.add(y, y)).backward()
    assert x.grad.tolist() == [4.0]


def test_broadcast_gradient_is_reduced(rng):
    a = nc.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = nc.Tensor(rng.normal(size=(4,)), requires_grad=True)
    nc.sum_(nc.add(a, b)).backward()
    assert b.grad.tolist() == [3.0] * 4


def test_item_requires_scalar():
    assert nc.Tensor(2.5).item() == 2.5
    with pytest.raises(DimensionError):
        nc.Tensor([1.0, 2.0]).item()


def test_grad_check_sum_of_squares():
    x = nc.Tensor([1.0, 2.0], requires_grad=True)
    report = nc.grad_check(lambda: nc.sum_(nc.mul(x, x)), {'x': x}, tol=1e-8)
    assert report.passed
    assert report.checked == 2


def test_grad_check_step_range():
    x = nc.Tensor([1.0], requires_grad=True)
    with pytest.raises(ContractViolation):
        nc.grad_check(lambda: nc.sum_(x), [x], step=1e-2)


@pytest.mark.parametrize('op', [
    lambda t: nc.exp(t),
    lambda t: nc.softmax_lastdim(t),
    lambda t: nc.log_softmax_lastdim(t),
    lambda t: nc.layer_norm(t),
    lambda t: nc.l2_normalize_lastdim(t),
    lambda t: nc.cumsum_lastdim(t),
])
def test_op_gradients_match_finite_differences(op, rng):
    x = nc.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    weights = rng.normal(size=(3, 5))
    report = nc.grad_check(lambda: nc.sum_(nc.mul(op(x), weights)), {'x': x})
    assert report.passed, report
