import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from phasekd import tensor as T
from phasekd.errors import DomainError, ParameterError, ShapeError
from phasekd.tensor import Tensor, grad_check, no_grad

SEEDS = range(20)
TOL = 1e-6


def _rand(rng, *shape, away_from_zero=False):
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 0.2, np.sign(x) * 0.2 + x, x)
    return x


# -- spec examples -------------------------------------------------------------
def test_matmul_identity_and_dot():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(np.eye(2), a).data, a)
    assert T.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 9))
    np.testing.assert_array_equal(T.conv1d_causal(x, [[[1.0]]]).data, x)


def test_conv_current_and_previous_tap():
    x = [[1.0, 2.0, 3.0]]
    assert T.conv1d_causal(x, [[[0.0, 1.0]]]).data.tolist() == [[1.0, 2.0, 3.0]]
    assert T.conv1d_causal(x, [[[1.0, 0.0]]]).data.tolist() == [[0.0, 1.0, 2.0]]


def test_conv_dilation_reaches_back():
    x = [[1.0, 2.0, 3.0, 4.0, 5.0]]
    out = T.conv1d_causal(x, [[[1.0, 0.0]]], dilation=3).data
    assert out.tolist() == [[0.0, 0.0, 0.0, 1.0, 2.0]]


@pytest.mark.parametrize("d", [0, -1, 1.5])
def test_conv_rejects_bad_dilation(d):
    with pytest.raises(ParameterError):
        T.conv1d_causal(np.ones((1, 4)), np.ones((1, 1, 2)), dilation=d)


@pytest.mark.parametrize("seed", range(5))
def test_conv_causality(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 20))
    w = rng.standard_normal((4, 3, 3))
    base = T.conv1d_causal(x, w, dilation=2).data
    l = int(rng.integers(0, 20))
    x2 = x.copy()
    x2[:, l] += 5.0
    out = T.conv1d_causal(x2, w, dilation=2).data
    np.testing.assert_array_equal(out[:, :l], base[:, :l])
    assert not np.allclose(out[:, l:], base[:, l:])


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_with_temperature([[2.0] * 5], 3.0).data, [[0.2] * 5])
    np.testing.assert_allclose(T.softmax_with_temperature([0.0, math.log(3)]).data, [0.25, 0.75], atol=1e-15)


@given(arrays(np.float64, (4, 6), elements=st.floats(-20, 20)), st.floats(0.05, 20))
def test_softmax_preserves_argmax(x, temp):
    # distinct logits so the argmax is unambiguous
    x = x + np.arange(6) * 1e-3
    out = T.softmax_with_temperature(x, temp).data
    np.testing.assert_array_equal(out.argmax(-1), x.argmax(-1))
    np.testing.assert_allclose(out.sum(-1), 1.0)


@pytest.mark.parametrize("temp", [0.0, -1.0])
def test_temperature_must_be_positive(temp):
    with pytest.raises(ParameterError):
        T.log_softmax([[1.0, 2.0]], temp)


def test_log_softmax_uniform():
    np.testing.assert_allclose(T.log_softmax(np.zeros((3, 7))).data, -math.log(7), rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", SEEDS)
def test_log_softmax_identity(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 7)) * 4
    temp = float(rng.uniform(0.5, 4))
    z = x / temp
    lse = np.log(np.exp(z).sum(-1, keepdims=True))
    np.testing.assert_allclose(T.log_softmax(x, temp).data, z - lse, rtol=0, atol=1e-12)


def test_l2_normalize_examples():
    np.testing.assert_allclose(T.l2_normalize([[3.0, 4.0]]).data, [[0.6, 0.8]])
    u = np.array([[0.0, 1.0, 0.0]])
    np.testing.assert_array_equal(T.l2_normalize(u).data, u)
    z = T.l2_normalize(np.zeros((2, 4)))
    assert np.all(z.data == 0) and np.all(np.isfinite(z.data))


def test_l2_normalize_zero_row_gradient_finite():
    z = Tensor(np.zeros((1, 3)), requires_grad=True)
    T.l2_normalize(z).sum().backward()
    assert np.all(np.isfinite(z.grad))


def test_clamp_max_examples():
    x = Tensor([10.0], requires_grad=True)
    y = T.clamp_max(x, 8.0)
    y.sum().backward()
    assert y.data.tolist() == [8.0] and x.grad.tolist() == [0.0]
    x = Tensor([3.0], requires_grad=True)
    y = T.clamp_max(x, 8.0)
    y.sum().backward()
    assert y.data.tolist() == [3.0] and x.grad.tolist() == [1.0]
    assert T.clamp_max([1.0, 9.0, 8.0], 8.0).data.tolist() == [1.0, 8.0, 8.0]


def test_abs_subgradient_and_mean():
    x = Tensor([-2.0], requires_grad=True)
    y = T.elementwise_map("abs", x)
    y.sum().backward()
    assert y.data.tolist() == [2.0] and x.grad.tolist() == [-1.0]
    assert T.reduce(np.ones(4), "mean").item() == 1.0


def test_elementwise_map_rejects_unknown():
    with pytest.raises(ParameterError):
        T.elementwise_map("cube", [1.0])
    with pytest.raises(ParameterError):
        T.elementwise_map("add", [1.0])
    with pytest.raises(ParameterError):
        T.reduce([1.0], "max")


def test_domain_errors():
    with pytest.raises(DomainError):
        T.log([1.0, 0.0])
    with pytest.raises(DomainError):
        T.div([1.0], [0.0])


def test_broadcast_rules():
    out = T.add(np.ones((2, 3)), np.arange(3.0))
    assert out.shape == (2, 3)
    with pytest.raises(ShapeError):
        T.add(np.ones((2, 3)), np.ones(2))


# -- tape semantics ----------------------------------------------------------------
def test_tape_replays_in_reverse_order():
    x = Tensor([1.0, 2.0], requires_grad=True)
    a = T.exp(x)
    b = T.mul(a, x)
    c = T.reduce_sum(T.add(b, a))
    seqs = [n.seq for n in T.trace(c)]
    assert seqs == sorted(seqs) and len(seqs) == 4
    c.backward()
    np.testing.assert_allclose(x.grad, np.exp([1.0, 2.0]) * (np.array([1.0, 2.0]) + 2))


def test_detached_tensor_gets_no_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    d = x.detach()
    assert d.node is None and not d.requires_grad
    y = T.reduce_sum(T.mul(x, d))
    y.backward()
    # d(x * stop(x))/dx = stop(x): the detached branch adds nothing
    np.testing.assert_array_equal(x.grad, [1.0, 2.0])
    assert len(T.trace(y)) == 2


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = T.exp(x)
    assert y.node is None and not y.requires_grad
    assert T.is_grad_enabled()


def test_gradient_accumulates_over_shared_use():
    x = Tensor([3.0], requires_grad=True)
    y = T.reduce_sum(T.add(T.mul(x, x), x))
    y.backward()
    assert x.grad.tolist() == [7.0]


def test_values_view_length_matches_shape():
    t = Tensor(np.ones((3, 4)))
    assert t.values.size == 12 and t.values.base is not None


# -- finite-difference checks over every differentiable op -------------------------
UNARY = {
    "neg": lambda x: T.neg(x),
    "exp": lambda x: T.exp(x),
    "log": lambda x: T.log(T.add(T.square(x), 0.5)),
    "abs": lambda x: T.abs(x),
    "square": lambda x: T.square(x),
    "sigmoid": lambda x: T.sigmoid(x),
    "tanh": lambda x: T.tanh(x),
    "relu": lambda x: T.relu(x),
    "clamp_max": lambda x: T.clamp_max(x, 0.5),
    "transpose": lambda x: T.transpose(x),
    "softmax": lambda x: T.softmax_with_temperature(x, 1.7),
    "log_softmax": lambda x: T.log_softmax(x, 2.0),
    "l2_normalize": lambda x: T.l2_normalize(x),
    "sum_axis0": lambda x: T.reduce_sum(x, axis=0),
    "mean_axis1": lambda x: T.reduce_mean(x, axis=1, keepdims=True),
    "index": lambda x: T.index_select(x, (np.array([0, 2, 2]), np.array([1, 0, 1]))),
    "gather_rows": lambda x: T.gather_rows(x, [1, 0, 3]),
}


def _weighted(fn, rng, shape_out=None):
    """Scalarize an op with a fixed random weighting so every output coordinate matters."""
    cache = {}

    def f(x):
        y = fn(x)
        if "w" not in cache:
            cache["w"] = rng.standard_normal(y.shape)
        return T.reduce_sum(T.mul(y, cache["w"]))

    return f


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_gradcheck(name):
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        # kinks (abs, relu at 0; clamp at 0.5) are avoided by construction
        x = _rand(rng, 3, 4, away_from_zero=True)
        if name == "clamp_max":
            x = np.where(np.abs(x - 0.5) < 0.1, x + 0.3, x)
        worst = max(worst, grad_check(_weighted(UNARY[name], rng), x))
    assert worst <= TOL, f"{name}: {worst}"


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div"])
@pytest.mark.parametrize("other_shape", [(3, 4), (4,), ()])
def test_binary_ops_gradcheck(name, other_shape):
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        x = _rand(rng, 3, 4)
        y = _rand(rng, *other_shape, away_from_zero=True) + (2.0 if name == "div" else 0.0)
        w = rng.standard_normal((3, 4))
        op = getattr(T, name)
        worst = max(worst, grad_check(lambda t: T.reduce_sum(T.mul(op(t, y), w)), x))
        worst = max(worst, grad_check(lambda t: T.reduce_sum(T.mul(op(x, t), w)), y))
    assert worst <= TOL


def test_matmul_gradcheck():
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        worst = max(worst, grad_check(lambda t: T.reduce_sum(T.matmul(t, b)), a))
        worst = max(worst, grad_check(lambda t: T.reduce_sum(T.matmul(a, t)), b))
    assert worst <= TOL


@pytest.mark.parametrize("dilation", [1, 2, 4])
def test_conv_gradcheck(dilation):
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        x, w, b = rng.standard_normal((2, 9)), rng.standard_normal((3, 2, 3)), rng.standard_normal(3)
        g = rng.standard_normal((3, 9))
        worst = max(worst, grad_check(lambda t: T.reduce_sum(T.mul(T.conv1d_causal(t, w, dilation, b), g)), x))
        worst = max(worst, grad_check(lambda t: T.reduce_sum(T.mul(T.conv1d_causal(x, t, dilation, b), g)), w))
        worst = max(worst, grad_check(lambda t: T.reduce_sum(T.mul(T.conv1d_causal(x, w, dilation, t), g)), b))
    assert worst <= TOL


def test_gru_gradcheck():
    D, H, L = 3, 4, 6
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        args = [rng.standard_normal(s) * 0.5 for s in ((L, D), (D, 3 * H), (H, 3 * H), (3 * H,), (3 * H,))]
        g = rng.standard_normal((L, H))
        for i in range(5):
            def f(t, i=i):
                a = list(args)
                a[i] = t
                return T.reduce_sum(T.mul(T.gru_sequence(*a), g))
            worst = max(worst, grad_check(f, args[i]))
    assert worst <= TOL


def test_gru_matches_reference_recurrence():
    rng = np.random.default_rng(3)
    D, H, L = 2, 3, 5
    x, wi, wh = rng.standard_normal((L, D)), rng.standard_normal((D, 3 * H)), rng.standard_normal((H, 3 * H))
    bi, bh = rng.standard_normal(3 * H), rng.standard_normal(3 * H)
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    h = np.zeros(H)
    ref = []
    for t in range(L):
        gi, gh = x[t] @ wi + bi, h @ wh + bh
        r = sig(gi[:H] + gh[:H])
        z = sig(gi[H:2 * H] + gh[H:2 * H])
        n = np.tanh(gi[2 * H:] + r * gh[2 * H:])
        h = (1 - z) * n + z * h
        ref.append(h)
    np.testing.assert_allclose(T.gru_sequence(x, wi, wh, bi, bh).data, np.array(ref), rtol=0, atol=1e-14)


def test_gru_scan_batched_matches_single():
    rng = np.random.default_rng(4)
    H, L, B = 3, 7, 4
    gi = rng.standard_normal((L, B, 3 * H))
    wh, bh = rng.standard_normal((H, 3 * H)), rng.standard_normal(3 * H)
    batched = T.gru_scan(gi, wh, bh)
    for b in range(B):
        np.testing.assert_allclose(batched[:, b], T.gru_scan(gi[:, b], wh, bh), rtol=0, atol=1e-14)


def test_grad_check_sum_of_squares():
    x = np.random.default_rng(0).standard_normal(10)
    assert grad_check(lambda t: T.reduce_sum(T.square(t)), x, h=1e-5) < 1e-8


def test_grad_check_requires_scalar():
    with pytest.raises(ShapeError):
        grad_check(lambda t: T.square(t), np.ones(3))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-5, 5)))
def test_gradients_finite(x):
    t = Tensor(x, requires_grad=True)
    y = T.reduce_sum(T.mul(T.log_softmax(T.tanh(t), 2.0), T.sigmoid(t)))
    y.backward()
    assert t.grad.shape == x.shape and np.all(np.isfinite(t.grad))
