import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from acgkd import nn
from acgkd.tensor import (NumericError, ShapeError, Tensor, UsageError, apply_primitive, backward,
                          finite_difference_gradient, no_grad)

from conftest import rel_close


def project(out, rng):
    """Reduce to a scalar with a fixed random weighting so every output entry matters."""
    w = rng.normal(size=out.shape)
    return (out * w).sum()


# name -> (input shapes, builder taking the input tensors and an rng)
PRIMITIVE_CASES = {
    "add": ([(3, 4), (4,)], lambda xs, r: xs[0] + xs[1]),
    "sub": ([(2, 3, 4), (3, 1)], lambda xs, r: xs[0] - xs[1]),
    "mul": ([(3, 4), (3, 4)], lambda xs, r: xs[0] * xs[1]),
    "div": ([(3, 4), (3, 4)], lambda xs, r: xs[0] / (nn.square(xs[1]) + 0.5)),
    "scalar_mul": ([(5,)], lambda xs, r: xs[0] * 2.5),
    "matmul": ([(2, 3, 4), (4, 5)], lambda xs, r: xs[0] @ xs[1]),
    "transpose": ([(2, 3, 4)], lambda xs, r: nn.transpose(xs[0])),
    "concat": ([(2, 3), (4, 3)], lambda xs, r: nn.concat([xs[0], xs[1]], axis=0)),
    "softmax": ([(3, 5)], lambda xs, r: nn.softmax(xs[0])),
    "log_softmax": ([(3, 5)], lambda xs, r: nn.log_softmax(xs[0])),
    "sigmoid": ([(4, 4)], lambda xs, r: nn.sigmoid(xs[0])),
    "relu": ([(4, 4)], lambda xs, r: nn.relu(xs[0])),
    "leaky_relu": ([(4, 4)], lambda xs, r: nn.leaky_relu(xs[0], 0.2)),
    "exp": ([(3, 3)], lambda xs, r: nn.exp(xs[0])),
    "log": ([(3, 3)], lambda xs, r: nn.log(nn.square(xs[0]) + 0.1)),
    "power": ([(3, 3)], lambda xs, r: nn.power(nn.square(xs[0]) + 0.5, -0.5)),
    "square": ([(3, 3)], lambda xs, r: nn.square(xs[0])),
    "sum": ([(2, 3, 4)], lambda xs, r: xs[0].sum(axis=1)),
    "mean": ([(2, 3, 4)], lambda xs, r: xs[0].mean(axis=(0, 1))),
    "row_sum": ([(3, 4)], lambda xs, r: nn.row_sum(xs[0])),
    "dropout": ([(3, 4)], lambda xs, r: nn.dropout(xs[0], r.random((3, 4)) > 0.5, 0.5)),
    "clamp": ([(4, 4)], lambda xs, r: nn.clamp(xs[0], -0.5, 0.5)),
    "reshape": ([(2, 6)], lambda xs, r: xs[0].reshape(3, 4)),
    "gradient_reversal": ([(3, 3)], lambda xs, r: nn.gradient_reversal(xs[0], 0.7)),
    "symmetrize_triu": ([(2, 6)], lambda xs, r: nn.symmetrize_triu(xs[0], 4)),
}


def check_primitive(name, seed):
    shapes, build = PRIMITIVE_CASES[name]
    rng = np.random.default_rng(seed)
    xs = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    if name in ("relu", "leaky_relu", "clamp"):
        # keep inputs away from the kinks so central differences are valid
        for x in xs:
            x.data = np.where(np.abs(x.data) < 1e-3, 0.1, x.data)
            x.data = np.where(np.abs(np.abs(x.data) - 0.5) < 1e-3, 0.3, x.data)
    proj_seed = int(rng.integers(2**31))
    mask_seed = int(rng.integers(2**31))

    def f(*_):
        return project(build(xs, np.random.default_rng(mask_seed)), np.random.default_rng(proj_seed))

    loss = f()
    backward(loss)
    # the reversal layer is identity forward, so its oracle is -beta times the plain derivative
    factor = -0.7 if name == "gradient_reversal" else 1.0
    for x in xs:
        fd = finite_difference_gradient(lambda _: f(), x)
        assert rel_close(x.grad, factor * fd), f"{name} seed {seed}"


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    for seed in range(100):
        check_primitive(name, seed)


def test_every_registered_primitive_has_a_gradient_case():
    from acgkd.tensor import PRIMITIVES
    assert set(PRIMITIVES) == set(PRIMITIVE_CASES)


def test_sigmoid_of_zero_is_half():
    out = nn.sigmoid(Tensor(np.zeros((2, 2))))
    assert np.array_equal(out.data, np.full((2, 2), 0.5))


def test_identity_matmul():
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(x)).data, x)


def test_softmax_of_equal_entries():
    out = nn.softmax(Tensor([[1.0, 1.0, 1.0]]))
    assert np.allclose(out.data, 1.0 / 3.0, atol=1e-15)


def test_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 3)), requires_grad=True)
    backward(x.sum())
    assert np.array_equal(x.grad, np.ones((3, 3)))


def test_square_sum_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(nn.square(x).sum())
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_gradient_reversal_forward_is_bitwise_identity():
    x = Tensor(np.random.default_rng(1).normal(size=(4, 3)), requires_grad=True)
    y = nn.gradient_reversal(x, 0.37)
    assert np.array_equal(y.data, x.data)


def test_gradient_reversal_backward():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    backward(nn.gradient_reversal(x, 1.0).sum())
    assert np.array_equal(x.grad, -np.ones((2, 3)))
    x.grad = None
    backward(nn.gradient_reversal(x, 0.0).sum())
    assert np.array_equal(x.grad, np.zeros((2, 3)))


@given(st.floats(0.0, 5.0), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_gradient_reversal_scales_unreversed_gradient(beta, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(3, 2))
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    backward(nn.square(x @ w).sum())
    plain = x.grad.copy()
    x.grad = None
    backward(nn.square(nn.gradient_reversal(x, beta) @ w).sum())
    assert np.array_equal(x.grad, -beta * plain)


def test_gradient_reversal_rejects_negative_scale():
    with pytest.raises(ValueError):
        nn.gradient_reversal(Tensor([1.0]), -1.0)


def test_backward_on_detached_tensor_raises():
    with pytest.raises(UsageError):
        backward(Tensor(1.0))
    with pytest.raises(UsageError):
        backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)


def test_unreached_leaves_get_zero_gradient():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0], requires_grad=True)
    backward(a.sum(), leaves=[a, b])
    assert np.array_equal(b.grad, [0.0])


def test_reused_leaf_accumulates():
    x = Tensor([1.5, -2.0], requires_grad=True)
    backward((x * x + x * 3.0).sum())
    assert np.allclose(x.grad, 2 * x.data + 3.0)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert y.node is None and not y.requires_grad


def test_tape_ids_increase_along_the_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    y = nn.sigmoid(x * 2.0)
    z = y.sum()
    assert x.id < y.node.inputs[0].id < y.id < z.id


def test_shape_errors():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    with pytest.raises(ShapeError):
        nn.symmetrize_triu(Tensor(np.ones(5)), 4)


def test_domain_errors():
    with pytest.raises(NumericError):
        nn.log(Tensor([0.0, 1.0]))
    with pytest.raises(NumericError):
        nn.exp(Tensor([1000.0]))
    with pytest.raises(NumericError):
        Tensor([1.0]) / Tensor([0.0])
    with pytest.raises(ValueError):
        apply_primitive("no_such_op", [Tensor(1.0)])


def test_finite_difference_of_sum_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 2)))
    assert np.allclose(finite_difference_gradient(lambda t: t.sum(), x), 1.0, atol=1e-8)


def test_finite_difference_of_sigmoid_at_zero():
    x = Tensor(np.zeros(5))
    fd = finite_difference_gradient(lambda t: nn.sigmoid(t).sum(), x)
    assert np.allclose(fd, 0.25, atol=1e-6)


def test_finite_difference_restores_input():
    x = Tensor(np.random.default_rng(0).normal(size=4))
    before = x.data.copy()
    finite_difference_gradient(lambda t: nn.square(t).sum(), x)
    assert np.array_equal(x.data, before)


def test_tape_is_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        loss = nn.log_softmax(nn.relu(x @ w)).sum()
        backward(loss)
        return loss.data, x.grad, w.grad

    a, b = run(), run()
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                  elements=st.floats(-50, 50)))
@settings(max_examples=60, deadline=None)
def test_elementwise_outputs_stay_finite(arr):
    x = Tensor(arr)
    for out in (nn.sigmoid(x), nn.relu(x), nn.softmax(x), nn.log_softmax(x), nn.elu(x)):
        assert np.all(np.isfinite(out.data))
    assert np.allclose(nn.softmax(x).data.sum(axis=-1), 1.0)


@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-10, 10)))
@settings(max_examples=40, deadline=None)
def test_grad_shape_matches_values(arr):
    x = Tensor(arr, requires_grad=True)
    backward(nn.sigmoid(x).sum())
    assert x.grad.shape == x.shape
    assert x.values.size == int(np.prod(x.shape))
