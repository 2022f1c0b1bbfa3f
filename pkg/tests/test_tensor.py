import math

import numpy as np
import pytest

import oracles
from vif import tensor as T
from vif.errors import ContractError, DimensionError, DomainError, NumericError, VocabError
from vif.tensor import Tensor, backward, grad_check, no_grad


def test_matmul_identity(rng):
    X = rng.normal(size=(3, 5))
    out = T.forward_op("matmul", np.eye(3), X)
    assert np.array_equal(out.data, X)


def test_softmax_of_zeros_is_uniform():
    assert np.allclose(T.softmax(np.zeros(4)).data, [0.25] * 4, atol=0, rtol=0)


def test_exp_log_inverse():
    assert abs(T.exp(T.log(Tensor(2.5))).item() - 2.5) < 1e-12


def test_sum_grad_is_ones():
    x = Tensor(np.arange(4.0), requires_grad=True)
    backward(T.sum_(x))
    assert np.array_equal(x.grad, np.ones(4))


def test_product_rule():
    x, y = Tensor(3.0, requires_grad=True), Tensor(5.0, requires_grad=True)
    backward(x * y)
    assert x.grad == 5.0 and y.grad == 3.0


def test_backward_needs_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_domain_errors():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        T.div(Tensor([1.0]), Tensor([0.0]))


def test_shape_errors():
    with pytest.raises(DimensionError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        T.add(np.ones((2, 3)), np.ones((3, 2)))
    # broadcasting is suffix-only: a trailing 1 does not stretch
    with pytest.raises(DimensionError):
        T.mul(np.ones((2, 3)), np.ones((2, 1)))
    with pytest.raises(VocabError):
        T.embedding(np.ones((4, 2)), [0, 4])


def test_unknown_op_kind():
    with pytest.raises(ContractError):
        T.forward_op("conv2d", np.ones(2))


def test_validity_check():
    assert Tensor([1.0, 2.0]).is_valid()
    assert not Tensor([1.0, np.nan]).is_valid()
    assert not Tensor([np.inf]).is_valid()


def test_grad_check_sum_of_squares():
    err = grad_check(lambda p: T.sum_(p[0] * p[0]), [np.array([1.0, 2.0, 3.0])])
    assert err < 1e-8


def test_grad_check_softmax_dot(rng):
    w = rng.normal(size=8)
    err = grad_check(lambda p: T.sum_(T.softmax(p[0]) * Tensor(w)), [rng.normal(size=8)])
    assert err < 1e-4


def test_constant_function_has_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    backward(T.sum_(x * 0.0) + 2.0)
    assert np.array_equal(x.grad, np.zeros(3))


def test_grad_check_rejects_bad_step_and_nan():
    with pytest.raises(ContractError):
        grad_check(lambda p: T.sum_(p[0]), [np.ones(2)], h=0.0)
    with pytest.raises(NumericError):
        grad_check(lambda p: T.sum_(p[0] * np.nan), [np.ones(2)])


# every op, checked at 100 seeds against central differences
def _case(name, rng):
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    mask = rng.random((3, 4)) < 0.7
    mask[:, 0] = True
    cases = {
        "add": ([a, b], lambda p: T.add(p[0], p[1])),
        "sub": ([a, b], lambda p: T.sub(p[0], p[1])),
        "mul": ([a, b], lambda p: T.mul(p[0], p[1])),
        "div": ([a, pos], lambda p: T.div(p[0], p[1])),
        "exp": ([a], lambda p: T.exp(p[0])),
        "log": ([pos], lambda p: T.log(p[0])),
        "negate": ([a], lambda p: T.neg(p[0])),
        "matmul": ([a, rng.normal(size=(4, 5))], lambda p: T.matmul(p[0], p[1])),
        "bmm": ([a, rng.normal(size=(2, 4, 2))], lambda p: T.matmul(p[0], p[1])),
        "sum": ([a], lambda p: T.sum_(p[0], axis=1, keepdims=True)),
        "mean": ([a], lambda p: T.mean(p[0], axis=(0, 2))),
        "max": ([a], lambda p: T.max_(p[0], axis=1)),
        "softmax": ([a], lambda p: T.softmax(p[0])),
        "masked_softmax": ([a], lambda p: T.masked_softmax(p[0], mask)),
        "log_softmax": ([a], lambda p: T.log_softmax(p[0])),
        "layer_norm": ([a, rng.normal(size=4), rng.normal(size=4)], lambda p: T.layer_norm(p[0], p[1], p[2])),
        "concat": ([a, rng.normal(size=(2, 1, 4))], lambda p: T.concat([p[0], p[1]], axis=1)),
        "slice": ([a], lambda p: p[0][:, 1:, ::2]),
        "fancy": ([a], lambda p: p[0][np.array([0, 1, 1]), np.array([2, 0, 2])]),
        "reshape": ([a], lambda p: T.reshape(p[0], (6, 4))),
        "transpose": ([a], lambda p: T.transpose(p[0], (2, 0, 1))),
        "embedding": ([b], lambda p: T.embedding(p[0], np.array([[0, 2], [2, 2]]))),
        "gelu": ([a], lambda p: T.gelu(p[0])),
        "sigmoid": ([a], lambda p: T.sigmoid(p[0])),
        "softplus": ([a * 5], lambda p: T.softplus(p[0])),
        "square": ([a], lambda p: T.square(p[0])),
        "xlogx": ([pos], lambda p: T.xlogx(p[0])),
    }
    point, f = cases[name]
    return point, f


OPS = ["add", "sub", "mul", "div", "exp", "log", "negate", "matmul", "bmm", "sum", "mean", "max", "softmax",
       "masked_softmax", "log_softmax", "layer_norm", "concat", "slice", "fancy", "reshape", "transpose",
       "embedding", "gelu", "sigmoid", "softplus", "square", "xlogx"]


@pytest.mark.parametrize("name", OPS)
def test_op_gradients_match_finite_differences(name):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        point, f = _case(name, rng)

        def scalar(p, f=f, seed=seed):
            # random projection so every output coordinate contributes
            y = f(p)
            proj = np.random.default_rng(seed + 1000).normal(size=y.shape)
            return T.sum_(y * Tensor(proj))

        worst = max(worst, grad_check(scalar, point, max_coords=6, seed=seed))
    assert worst < 1e-4, (name, worst)


def test_softmax_rows_are_distributions(rng):
    y = T.softmax(rng.normal(size=(50, 17)) * 30).data
    assert (y >= 0).all()
    assert np.abs(y.sum(-1) - 1).max() <= 1e-9


def test_softmax_matches_scalar_oracle(rng):
    x = rng.normal(size=(5, 9)) * 4
    mask = rng.random((5, 9)) < 0.6
    mask[:, 3] = True
    y = T.masked_softmax(x, mask).data
    for row, m, out in zip(x, mask, y):
        assert np.allclose(out, oracles.softmax_row(list(row), list(m)), rtol=0, atol=1e-15)


def test_masked_softmax_zeros_and_sums(rng):
    x = rng.normal(size=(200, 11)) * 50
    mask = rng.random((200, 11)) < 0.5
    mask[np.arange(200), rng.integers(0, 11, 200)] = True
    y = T.masked_softmax(x, mask).data
    assert (y[~mask] == 0).all()
    assert np.abs(y.sum(-1) - 1).max() <= 1e-9


def test_masked_softmax_all_masked_row_is_an_error():
    mask = np.array([[True, False], [False, False]])
    with pytest.raises(ContractError):
        T.masked_softmax(np.zeros((2, 2)), mask)


def test_softmax_survives_huge_logits():
    y = T.softmax(np.array([1e300, 0.0, -1e300])).data
    assert np.array_equal(y, [1.0, 0.0, 0.0])


def test_layer_norm_matches_scalar_oracle(rng):
    x = rng.normal(size=(4, 7))
    g, b = rng.normal(size=7), rng.normal(size=7)
    y = T.layer_norm(x, g, b).data
    for row, out in zip(x, y):
        assert np.allclose(out, oracles.layer_norm_row(list(row), list(g), list(b)), rtol=0, atol=1e-12)


def test_shared_subexpression_accumulates(rng):
    x0 = rng.normal(size=5)
    # shared: one node s used three times
    x = Tensor(x0, requires_grad=True)
    s = T.exp(x) * x
    backward(T.sum_(s * s + s))
    shared = x.grad.copy()
    # expanded: the same expression rebuilt from scratch at every use
    y = Tensor(x0, requires_grad=True)
    e1, e2, e3 = T.exp(y) * y, T.exp(y) * y, T.exp(y) * y
    backward(T.sum_(e1 * e2 + e3))
    assert np.allclose(shared, y.grad, rtol=1e-14, atol=0)
    # closed form: d/dx (s^2 + s) = (2s + 1) * (e^x (1 + x))
    s0 = np.exp(x0) * x0
    assert np.allclose(shared, (2 * s0 + 1) * np.exp(x0) * (1 + x0), rtol=1e-12)


def test_fan_out_gradient_adds():
    x = Tensor(2.0, requires_grad=True)
    backward(x + x + x * x)
    assert x.grad == 2.0 + 4.0


def test_graph_is_topological_and_freed():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.sum_(T.exp(x) * x)
    g = T.graph_of(y)
    for node in g.nodes:
        assert all(i < node.output_id for i in node.input_ids)
    assert g.nodes[-1].kind == "sum"
    backward(y)
    assert len(T.graph_of(y)) == 1  # tape dropped after backward


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = T.sum_(x * 2.0)
    assert not y.requires_grad
    assert T.is_grad_enabled()


def test_frozen_inputs_build_no_tape():
    y = T.exp(Tensor(np.ones(2))) * 3.0
    assert not y.requires_grad


def test_max_gradient_goes_to_first_maximum():
    x = Tensor(np.array([1.0, 3.0, 3.0]), requires_grad=True)
    backward(T.max_(x))
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_xlogx_at_zero():
    x = Tensor(np.array([0.0, 1.0, math.e]), requires_grad=True)
    y = T.xlogx(x)
    assert np.allclose(y.data, [0.0, 0.0, math.e])
    backward(T.sum_(y))
    assert x.grad[0] == 0.0
    with pytest.raises(DomainError):
        T.xlogx(Tensor([-1.0]))
