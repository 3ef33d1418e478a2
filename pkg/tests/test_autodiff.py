import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ehr_attention import autodiff as ad
from ehr_attention.autodiff import (
    Adam,
    DegenerateLossError,
    GradientContractError,
    OptimizerState,
    ShapeError,
    Tensor,
    numerical_grad,
    optimizer_step,
    relative_error,
)

OP_TOL = 1e-4


def _param(rng, shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _check(fn, params, tol=OP_TOL):
    """fn() -> scalar Tensor; compares backward() with central differences for each param."""
    for p in params:
        p.grad = None
    fn().backward()
    for p in params:
        analytic = p.grad.copy()
        numeric = numerical_grad(fn, p)
        err = relative_error(analytic, numeric)
        assert err <= tol, f"relative error {err:.2e} for param of shape {p.shape}"


# one builder per differentiable op: rng -> (loss closure, params)
def _weighted(out, rng_w):
    return (out * Tensor(rng_w)).sum()


def _unary(op, low=-2.0, high=2.0):
    def build(rng):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
        x = _param(rng, shape, low, high)
        w = rng.normal(size=shape)
        return (lambda: _weighted(op(x), w)), [x]

    return build


def _binary(op, low=-2.0, high=2.0, b_low=None, b_high=None):
    def build(rng):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
        # broadcast b along a random subset of axes
        bshape = tuple(1 if rng.random() < 0.3 else s for s in shape)
        a = _param(rng, shape, low, high)
        b = _param(rng, bshape, low if b_low is None else b_low, high if b_high is None else b_high)
        w = rng.normal(size=shape)
        return (lambda: _weighted(op(a, b), w)), [a, b]

    return build


def _matmul(rng):
    m, k, n = rng.integers(1, 6, size=3)
    lead = tuple(rng.integers(1, 3, size=rng.integers(0, 2)))
    a = _param(rng, lead + (m, k))
    b = _param(rng, (k, n)) if rng.random() < 0.5 else _param(rng, lead + (k, n))
    w = rng.normal(size=lead + (m, n))
    return (lambda: _weighted(ad.matmul(a, b), w)), [a, b]


def _softmax(rng):
    shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
    axis = int(rng.integers(-len(shape), len(shape)))
    x = _param(rng, shape, -3, 3)
    w = rng.normal(size=shape)
    return (lambda: _weighted(ad.softmax(x, axis), w)), [x]


def _leaky(rng):
    shape = tuple(rng.integers(1, 5, size=2))
    # keep away from the kink so central differences do not straddle it
    data = rng.uniform(0.05, 2.0, size=shape) * rng.choice([-1, 1], size=shape)
    x = Tensor(data, requires_grad=True)
    w = rng.normal(size=shape)
    return (lambda: _weighted(ad.leaky_relu(x), w)), [x]


def _layer_norm(rng):
    n = int(rng.integers(2, 7))
    shape = tuple(rng.integers(1, 4, size=rng.integers(0, 2))) + (n,)
    x = _param(rng, shape, -2, 2)
    g = _param(rng, (n,), 0.5, 1.5)
    b = _param(rng, (n,))
    w = rng.normal(size=shape)
    return (lambda: _weighted(ad.layer_norm(x, g, b), w)), [x, g, b]


def _concat(rng):
    axis = int(rng.integers(0, 2))
    parts = []
    for _ in range(int(rng.integers(2, 4))):
        shape = [3, 2]
        shape[axis] = int(rng.integers(1, 4))
        parts.append(_param(rng, tuple(shape)))
    total = ad.concat(parts, axis).shape
    w = rng.normal(size=total)
    return (lambda: _weighted(ad.concat(parts, axis), w)), parts


def _getitem(rng):
    x = _param(rng, (4, 5))
    idx = rng.integers(0, 4, size=6)  # repeated rows exercise accumulation
    w = rng.normal(size=(6, 3))
    return (lambda: _weighted(x[idx, 1:4], w)), [x]


def _reductions(rng):
    x = _param(rng, (3, 4, 2))
    axis = [None, 0, 1, 2, -1][int(rng.integers(0, 5))]
    keep = bool(rng.integers(0, 2))
    return (lambda: (x.sum(axis=axis, keepdims=keep) ** 2).sum() + x.mean(axis=axis).exp().sum()), [x]


def _shape_ops(rng):
    x = _param(rng, (2, 3, 4))
    w = rng.normal(size=(4, 6))
    return (lambda: _weighted(x.transpose(2, 0, 1).reshape(4, 6), w) + x.swapaxes(0, 1).sum()), [x]


def _mse(rng):
    shape = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    p = _param(rng, shape)
    t = rng.uniform(-1, 1, size=shape)
    m = (rng.random(shape) < 0.7).astype(float)
    m.flat[0] = 1.0
    return (lambda: ad.mse_loss(p, t, m)), [p]


def _bce(rng):
    n = int(rng.integers(1, 8))
    p = _param(rng, (n,), 0.05, 0.95)
    y = rng.integers(0, 2, size=n).astype(float)
    return (lambda: ad.bce_loss(p, y)), [p]


def _clamp(rng):
    data = rng.uniform(-2, 2, size=(3, 3))
    # no entry within 1e-3 of a bound
    data[np.abs(np.abs(data) - 1.0) < 1e-3] = 0.5
    x = Tensor(data, requires_grad=True)
    w = rng.normal(size=(3, 3))
    return (lambda: _weighted(ad.clamp(x, -1.0, 1.0), w)), [x]


OPS = {
    "add": _binary(lambda a, b: a + b),
    "sub": _binary(lambda a, b: a - b),
    "mul": _binary(lambda a, b: a * b),
    "div": _binary(lambda a, b: a / b, b_low=0.5, b_high=2.0),
    "pow": _unary(lambda x: x**3),
    "sqrt_pow": _unary(lambda x: x**0.5, 0.2, 2.0),
    "exp": _unary(lambda x: x.exp()),
    "log": _unary(lambda x: x.log(), 0.1, 3.0),
    "tanh": _unary(ad.tanh),
    "sigmoid": _unary(ad.sigmoid, -6, 6),
    "neg_rsub": _unary(lambda x: 1.0 - (-x) * 2.0),
    "rtruediv": _unary(lambda x: 1.0 / x, 0.5, 2.0),
    "matmul": _matmul,
    "softmax": _softmax,
    "leaky_relu": _leaky,
    "layer_norm": _layer_norm,
    "concat": _concat,
    "getitem": _getitem,
    "reductions": _reductions,
    "shape_ops": _shape_ops,
    "mse_loss": _mse,
    "bce_loss": _bce,
    "clamp": _clamp,
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_gradients_match_finite_differences(op):
    for seed in range(50):
        fn, params = OPS[op](np.random.default_rng([seed, len(op)]))
        _check(fn, params)


# ---------------------------------------------------------------------------
# worked examples
# ---------------------------------------------------------------------------


def test_matmul_examples():
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), b).data, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11]])


def test_matmul_gradient_example():
    A = Tensor(np.eye(2), requires_grad=True)
    B = Tensor([[2.0, 3.0], [5.0, 7.0]])
    ad.matmul(A, B).sum().backward()
    np.testing.assert_allclose(A.grad, [[5, 12], [5, 12]])
    fd = numerical_grad(lambda: ad.matmul(A, B).sum(), A)
    np.testing.assert_allclose(fd, [[5, 12], [5, 12]], atol=1e-8)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, math.log(2)])).data, [1 / 3, 2 / 3], rtol=1e-15)
    out = ad.softmax(Tensor([1000.0, 1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0.5, 0.5])


def test_softmax_invalid_axis():
    with pytest.raises(ShapeError):
        ad.softmax(Tensor(np.ones((2, 3))), axis=2)


def test_leaky_relu_examples():
    assert ad.leaky_relu(Tensor(2.0), 0.01).item() == 2.0
    assert ad.leaky_relu(Tensor(-1.0), 0.01).item() == pytest.approx(-0.01)
    x = Tensor(-3.0, requires_grad=True)
    ad.leaky_relu(x).sum().backward()
    assert x.grad == pytest.approx(0.01)
    fd = numerical_grad(lambda: ad.leaky_relu(x).sum(), x)
    assert fd == pytest.approx(0.01, rel=1e-8)


def test_leaky_relu_subgradient_at_zero_is_one():
    x = Tensor(0.0, requires_grad=True)
    ad.leaky_relu(x).sum().backward()
    assert x.grad == 1.0


def test_leaky_relu_rejects_bad_alpha():
    with pytest.raises(ValueError):
        ad.leaky_relu(Tensor(1.0), 1.5)


def test_sigmoid_examples():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    with np.errstate(all="raise"):
        lo = ad.sigmoid(Tensor(-1e4)).item()
        hi = ad.sigmoid(Tensor(1e4)).item()
    assert lo >= 0.0 and hi <= 1.0
    x = Tensor(0.0, requires_grad=True)
    ad.sigmoid(x).sum().backward()
    assert x.grad == 0.25


def test_mse_examples():
    assert ad.mse_loss(Tensor([1.0, 2.0]), Tensor([1.0, 2.0]), Tensor([1.0, 1.0])).item() == 0.0
    assert ad.mse_loss(Tensor([1.0, 0.0]), Tensor([0.0, 0.0]), Tensor([1.0, 1.0])).item() == 0.5
    assert ad.mse_loss(Tensor([1.0, 0.0]), Tensor([0.0, 0.0]), Tensor([1.0, 0.0])).item() == 1.0


def test_mse_all_zero_mask():
    with pytest.raises(DegenerateLossError):
        ad.mse_loss(Tensor([1.0]), Tensor([0.0]), Tensor([0.0]))


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.mse_loss(Tensor([1.0, 2.0]), Tensor([0.0]), Tensor([1.0, 1.0]))


def test_bce_examples():
    assert ad.bce_loss(Tensor([0.5]), Tensor([1.0])).item() == pytest.approx(math.log(2))
    assert ad.bce_loss(Tensor([1.0, 0.0]), Tensor([1.0, 0.0])).item() <= 1e-6
    assert ad.bce_loss(Tensor([0.9, 0.1]), Tensor([1.0, 0.0])).item() == pytest.approx(-math.log(0.9))


def test_backward_examples():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    y = Tensor(3.0, requires_grad=True)
    (y * y).backward()
    assert y.grad == 6.0


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GradientContractError):
        (x * 2.0).backward()


def test_fan_out_accumulates():
    x = Tensor(2.0, requires_grad=True)
    a = x * 3.0
    b = x.exp()
    (a + b).backward()
    assert x.grad == pytest.approx(3.0 + math.exp(2.0))


def test_diamond_graph_visits_each_node_once():
    x = Tensor(1.5, requires_grad=True)
    h = x * x
    (h * h + h).backward()  # d/dx (x^4 + x^2)
    assert x.grad == pytest.approx(4 * 1.5**3 + 2 * 1.5)


def test_no_grad_records_nothing():
    x = Tensor(1.0, requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def test_zero_gradient_leaves_parameters():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p])
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_first_step_moves_by_lr():
    p = Tensor(np.array([0.5]), requires_grad=True)
    opt = Adam([p], lr=1e-3)
    p.grad = np.array([1.0])
    opt.step()
    # bias-corrected first step is lr * g / (|g| + eps)
    assert 0.5 - p.data[0] == pytest.approx(1e-3 / (1 + 1e-8), rel=1e-12)
    assert opt.state.step == 1
    assert p.grad is None


def test_quadratic_descent():
    w = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([w], lr=0.05)
    for _ in range(100):
        ((w - 2.0) ** 2).sum().backward()
        opt.step()
    assert abs(w.data[0] - 2.0) < 2.0


def test_missing_grad_is_contract_error():
    p = Tensor(np.ones(2), requires_grad=True)
    state = OptimizerState(m=[np.zeros(2)], v=[np.zeros(2)])
    with pytest.raises(GradientContractError):
        optimizer_step([p], state)
    assert state.step == 0


def test_state_shapes_match_params():
    ps = [Tensor(np.ones((2, 3)), requires_grad=True), Tensor(np.ones(4), requires_grad=True)]
    opt = Adam(ps)
    assert [m.shape for m in opt.state.m] == [(2, 3), (4,)]
    assert [v.shape for v in opt.state.v] == [(2, 3), (4,)]


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(
    hnp.arrays(
        np.float64,
        hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
        elements=st.floats(-1e3, 1e3),
    ),
    st.integers(0, 2),
)
def test_softmax_slices_sum_to_one(x, axis):
    axis = axis % x.ndim
    out = ad.softmax(Tensor(x), axis).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-50, 50)))
def test_forward_ops_are_deterministic_and_finite(x):
    w = np.linspace(-1, 1, 20).reshape(4, 5)
    g, b = np.ones(5), np.zeros(5)

    def run():
        h = ad.layer_norm(ad.matmul(Tensor(x), Tensor(w)), Tensor(g), Tensor(b))
        return ad.softmax(ad.leaky_relu(h) + ad.sigmoid(h) * ad.tanh(h), -1).data

    a, c = run(), run()
    assert np.all(np.isfinite(a))
    assert a.tobytes() == c.tobytes()


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5), elements=st.floats(-5, 5)))
def test_grad_shape_matches_value_shape(x):
    t = Tensor(x, requires_grad=True)
    (ad.sigmoid(t) * t).sum().backward()
    assert t.grad.shape == t.data.shape
