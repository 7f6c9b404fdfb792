import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from promptcam.tensor import (
    GradientError,
    GradTape,
    ShapeError,
    Tensor,
    add,
    concat,
    cross_entropy,
    finite_difference_gradient,
    gelu,
    layer_norm,
    matmul,
    max_relative_error,
    mul,
    reshape,
    reverse_mode_gradient,
    softmax,
    take,
    transpose,
    tsum,
)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def grad_of(fn, *xs):
    ts = [Tensor(x, requires_grad=True) for x in xs]
    with GradTape() as tape:
        loss = fn(*ts)
    reverse_mode_gradient(tape, loss)
    return [t.grad for t in ts]


def fd_of(fn, xs, i, h=1e-4):
    def f(v):
        args = [Tensor(x) for x in xs]
        args[i] = Tensor(v)
        return fn(*args).data[0]

    return finite_difference_gradient(f, xs[i], h)


# --- matmul -------------------------------------------------------------------


def test_matmul_identity_and_scalar():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(a)).data, a)
    assert matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_zero_extent_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


# --- softmax -----------------------------------------------------------------------


def test_softmax_closed_forms():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(softmax(Tensor([math.log(3.0), 0.0])).data, [0.75, 0.25], atol=1e-15)


def test_softmax_matches_extended_precision_oracle(rng):
    x = rng.normal(size=9) * 3
    e = np.exp(x.astype(np.longdouble))
    oracle = (e / e.sum()).astype(np.float64)
    np.testing.assert_allclose(softmax(Tensor(x)).data, oracle, atol=1e-12, rtol=0)


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_sums_to_one_and_is_shift_invariant(x, c):
    p = softmax(Tensor(x)).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(softmax(Tensor(x + c)).data, p, atol=1e-12)


def test_softmax_large_inputs_stay_finite():
    p = softmax(Tensor([1000.0, 0.0, -1000.0])).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, [1.0, 0.0, 0.0], atol=1e-15)


# --- layer norm ------------------------------------------------------------------------


def test_layer_norm_constant_row_and_normalised_row():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    out = layer_norm(Tensor(np.ones(4)), one, zero, eps=1e-5).data
    assert np.all(np.abs(out) < 1e-2)
    out = layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-5).data
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-5)


def test_layer_norm_matches_two_pass_oracle(rng):
    x = rng.normal(size=(3, 10)) * 4 + 2
    g, b = rng.normal(size=10), rng.normal(size=10)
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    oracle = (x - mu) / np.sqrt(var + 1e-6) * g + b
    np.testing.assert_allclose(layer_norm(Tensor(x), Tensor(g), Tensor(b), 1e-6).data, oracle, atol=1e-10)


# --- cross entropy ------------------------------------------------------------------------


def test_cross_entropy_uniform_and_saturated():
    assert cross_entropy(Tensor(np.zeros((1, 4))), [2]).data[0] == pytest.approx(math.log(4), abs=1e-12)
    s = np.full((1, 5), -30.0)
    s[0, 1] = 30.0
    assert cross_entropy(Tensor(s), [1]).data[0] < 1e-10


def test_cross_entropy_matches_logsumexp_oracle(rng):
    s = rng.normal(size=(4, 6)) * 5
    y = np.array([0, 5, 2, 2])
    oracle = np.mean([np.log(np.sum(np.exp(r - r.max()))) + r.max() - r[t] for r, t in zip(s, y)])
    assert cross_entropy(Tensor(s), y).data[0] == pytest.approx(oracle, abs=1e-12)


def test_cross_entropy_gradient_is_p_minus_onehot(rng):
    s = rng.normal(size=(1, 5))
    (g,) = grad_of(lambda t: cross_entropy(t, [3]), s)
    p = np.exp(s) / np.exp(s).sum()
    onehot = np.eye(5)[[3]]
    np.testing.assert_allclose(g, p - onehot, atol=1e-10)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((1, 3))), [3])


# --- reverse mode ----------------------------------------------------------------------------


def test_square_gradient():
    (g,) = grad_of(lambda x: mul(x, x), np.array([3.0]))
    assert g.tolist() == [6.0]


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        y = mul(x, x)
    with pytest.raises(GradientError):
        reverse_mode_gradient(tape, y)


def test_finite_difference_basics():
    assert finite_difference_gradient(lambda v: float(v[0] ** 2), np.array([3.0]), 1e-4)[0] == pytest.approx(6.0, abs=1e-7)
    np.testing.assert_array_equal(finite_difference_gradient(lambda v: 2.5, np.ones(4)), np.zeros(4))


def test_tape_is_topologically_ordered(rng):
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    with GradTape() as tape:
        y = tsum(gelu(matmul(x, transpose(x, (1, 0)))))
    seen = set(tape._leaves)
    for entry in tape.entries:
        assert all(i < 0 or i in seen for i in entry.inputs)
        seen.add(entry.output)
    assert len({e.output for e in tape.entries}) == len(tape.entries)
    assert tape.node_id(y) == tape.entries[-1].output


def _mlp_loss(x, w1, w2):
    h = gelu(matmul(x, w1))
    return cross_entropy(matmul(h, w2), [0, 2, 1])


def test_two_layer_mlp_matches_finite_differences(rng):
    xs = [rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 3))]
    grads = grad_of(_mlp_loss, *xs)
    for i in range(3):
        assert max_relative_error(grads[i], fd_of(_mlp_loss, xs, i)) <= 1e-4


def _composite(a, b, g, be):
    """Every differentiable primitive in one scalar function."""
    t = concat([a, b], axis=0)  # (4, 3)
    t = layer_norm(t, g, be, 1e-6)
    t = softmax(add(t, mul(t, t)), axis=-1)
    t = reshape(transpose(t, (1, 0)), (2, 6))
    t = take(t, (slice(None), slice(1, 5)))
    return tsum(mul(gelu(t), t))


@pytest.mark.parametrize("seed", range(100))
def test_every_primitive_matches_finite_differences(seed):
    r = np.random.default_rng(seed)
    xs = [r.normal(size=(2, 3)), r.normal(size=(2, 3)), r.normal(size=3) + 1.0, r.normal(size=3)]
    grads = grad_of(_composite, *xs)
    for i in range(len(xs)):
        assert max_relative_error(grads[i], fd_of(_composite, xs, i)) <= 1e-4


@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_matmul_gradient_property(a, b):
    ga, gb = grad_of(lambda x, y: tsum(matmul(x, y)), a, b)
    np.testing.assert_allclose(ga, np.ones((2, 2)) @ b.T, atol=1e-12)
    np.testing.assert_allclose(gb, a.T @ np.ones((2, 2)), atol=1e-12)


def test_gradients_accumulate_and_are_deterministic(rng):
    x0 = rng.normal(size=(3, 4))
    runs = []
    for _ in range(2):
        x = Tensor(x0, requires_grad=True)
        with GradTape() as tape:
            loss = tsum(gelu(x))
        reverse_mode_gradient(tape, loss)
        runs.append(x.grad.copy())
        with GradTape() as tape:
            loss = tsum(gelu(x))
        reverse_mode_gradient(tape, loss, accumulate=True)
        np.testing.assert_array_equal(x.grad, 2 * runs[-1])
    np.testing.assert_array_equal(runs[0], runs[1])


def test_no_recording_outside_tape(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    y = mul(x, x)  # no tape active: nothing recorded, plain result
    np.testing.assert_array_equal(y.data, x.data**2)


def test_max_relative_error_floor():
    assert max_relative_error([1e-12], [0.0]) < 1e-5
    assert max_relative_error([1.0], [1.0 + 1e-6]) == pytest.approx(1e-6, rel=1e-3)
