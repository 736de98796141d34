import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prosody_tts import tensor as tc
from prosody_tts.errors import (ConfigurationError, ContractError, DegenerateMaskError,
                                DeterminismError, DimensionError)
from prosody_tts.tensor import Tape, Tensor, backward, grad_check


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def naive_conv1d(x, w, bias):
    t, cin = x.shape
    k, _, cout = w.shape
    pad = (k - 1) // 2
    out = np.zeros((t, cout))
    for ti in range(t):
        for j in range(k):
            src = ti + j - pad
            if 0 <= src < t:
                for ci in range(cin):
                    for co in range(cout):
                        out[ti, co] += x[src, ci] * w[j, ci, co]
    return out + bias


def leaf(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


# --- matmul ---------------------------------------------------------------------

def test_matmul_identity_and_zero():
    b = Tensor([[3, 4], [5, 6]])
    np.testing.assert_array_equal(tc.matmul(Tensor(np.eye(2)), b).data, [[3, 4], [5, 6]])
    np.testing.assert_array_equal(tc.matmul(Tensor([[1, 2]]), Tensor([[0], [0]])).data, [[0]])


def test_matmul_hand_case_matches_triple_loop():
    a = np.array([[1, 2], [3, 4]], dtype=np.float64)
    b = np.array([[5, 6], [7, 8]], dtype=np.float64)
    expected = naive_matmul(a, b)
    np.testing.assert_array_equal(expected, [[19, 22], [43, 50]])
    np.testing.assert_array_equal(tc.matmul(Tensor(a), Tensor(b)).data, expected)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        tc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_matmul_agrees_with_loop_oracle(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (m, k)).astype(np.float32)
    b = rng.uniform(-1, 1, (k, n)).astype(np.float32)
    np.testing.assert_allclose(tc.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-5)


# --- conv1d -----------------------------------------------------------------------

def test_conv1d_zero_and_identity():
    x = Tensor(np.zeros((4, 3), dtype=np.float32))
    w = Tensor(np.random.default_rng(0).normal(size=(3, 3, 2)).astype(np.float32))
    np.testing.assert_array_equal(tc.conv1d(x, w, Tensor(np.zeros(2, np.float32))).data, 0)
    x = Tensor(np.arange(12, dtype=np.float32).reshape(4, 3))
    eye = Tensor(np.eye(3, dtype=np.float32)[None])
    np.testing.assert_array_equal(tc.conv1d(x, eye, Tensor(np.zeros(3, np.float32))).data, x.data)


def test_conv1d_hand_case():
    x = np.array([[1.0], [2.0], [3.0]])
    w = np.ones((3, 1, 1))
    expected = naive_conv1d(x, w, np.zeros(1))
    np.testing.assert_array_equal(expected.ravel(), [3, 6, 5])
    out = tc.conv1d(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data.ravel(), [3, 6, 5])


def test_conv1d_rejects_even_kernel():
    with pytest.raises(ConfigurationError):
        tc.conv1d(Tensor(np.zeros((3, 1))), Tensor(np.zeros((2, 1, 1))))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 7), st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3, 5]),
       st.integers(0, 10_000))
def test_conv1d_agrees_with_loop_oracle(t, cin, cout, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (t, cin)).astype(np.float32)
    w = rng.uniform(-1, 1, (k, cin, cout)).astype(np.float32)
    b = rng.uniform(-1, 1, cout).astype(np.float32)
    out = tc.conv1d(Tensor(x), Tensor(w), Tensor(b)).data
    assert out.shape == (t, cout)
    np.testing.assert_allclose(out, naive_conv1d(x, w, b), atol=1e-5)


def test_conv1d_batched_matches_per_item():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 6, 2))
    w = Tensor(rng.normal(size=(3, 2, 4)))
    b = Tensor(rng.normal(size=4))
    batched = tc.conv1d(Tensor(x), w, b).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], tc.conv1d(Tensor(x[i]), w, b).data, atol=1e-12)


# --- activations and normalization ---------------------------------------------

def test_activation_fixed_points():
    zero = Tensor(np.zeros(1, np.float32))
    assert tc.activation(zero, "tanh").data[0] == 0
    assert tc.activation(zero, "sigmoid").data[0] == 0.5
    assert tc.activation(Tensor([-1.0]), "relu").data[0] == 0
    for c in (-50.0, 0.0, 3.5, 1e4):
        out = tc.activation(Tensor(np.full((1, 3), c)), "softmax_lastdim").data
        np.testing.assert_allclose(out, 1 / 3, atol=1e-12)


def test_sigmoid_against_high_precision():
    mpmath.mp.dps = 40
    reference = float(1 / (1 + mpmath.exp(-1)))
    assert abs(reference - 0.731059) < 1e-6
    got = tc.sigmoid(Tensor(np.array([1.0], np.float32))).data[0]
    assert abs(got - reference) < 1e-7


def test_sigmoid_is_finite_at_extremes():
    out = tc.sigmoid(Tensor(np.array([-1e4, 1e4], np.float32))).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0, 1])


def test_layer_norm_cases():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_array_equal(tc.layer_norm(Tensor([[2.0, 2.0, 2.0]]), one, zero).data, 0)
    x = np.array([1.0, 2.0, 3.0])
    mu, sd = x.mean(), x.std()
    expected = (x - mu) / sd
    np.testing.assert_allclose(expected, [-1.2247, 0, 1.2247], atol=1e-4)
    np.testing.assert_allclose(tc.layer_norm(Tensor(x), one, zero, eps=0.0).data, expected, atol=1e-12)


def test_layer_norm_moments_on_random_rows():
    x = np.random.default_rng(3).normal(2.0, 5.0, size=(6, 16)).astype(np.float32)
    out = tc.layer_norm(Tensor(x), Tensor(np.ones(16, np.float32)), Tensor(np.zeros(16, np.float32))).data
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-6)
    assert np.all(np.abs(out.var(axis=-1) - 1) < 1e-4)


# --- attention ----------------------------------------------------------------------

def test_attention_single_key():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(1, 4))
    out, w = tc.scaled_dot_attention(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(1, 4))), Tensor(v))
    np.testing.assert_array_equal(w.data, 1.0)
    np.testing.assert_allclose(out.data, np.repeat(v, 3, axis=0), atol=1e-12)


def test_attention_identical_keys_give_uniform_weights():
    k = np.tile([[0.3, -0.2, 0.5]], (5, 1))
    _, w = tc.scaled_dot_attention(Tensor(np.eye(3)), Tensor(k), Tensor(np.zeros((5, 3))))
    np.testing.assert_allclose(w.data, 1 / 5, atol=1e-12)


def test_attention_hand_case():
    scores = np.array([1 / math.sqrt(2), 0.0])
    expected = np.exp(scores) / np.exp(scores).sum()
    _, w = tc.scaled_dot_attention(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor(np.eye(2)))
    np.testing.assert_allclose(w.data[0], expected, atol=1e-12)


def test_attention_mask_rows_and_degenerate_mask():
    rng = np.random.default_rng(5)
    q, k, v = (Tensor(rng.normal(size=(4, 3)).astype(np.float32)) for _ in range(3))
    causal = np.tril(np.ones((4, 4), dtype=bool))
    _, w = tc.scaled_dot_attention(q, k, v, causal)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1, atol=1e-5)
    assert np.all(w.data[~causal] < 1e-7)
    bad = causal.copy()
    bad[2] = False
    with pytest.raises(DegenerateMaskError):
        tc.scaled_dot_attention(q, k, v, bad)


# --- backward ----------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = leaf(np.random.default_rng(0).normal(size=(2, 3, 4)))
    with Tape():
        loss = tc.tsum(x)
    backward(loss)
    np.testing.assert_array_equal(x.grad, 1)


def test_backward_zero_weighted_loss_gives_zeros():
    x = leaf([0.5, -1.0, 2.0])
    with Tape():
        loss = tc.scale(tc.tsum(tc.tanh(x)), 0.0)
    backward(loss)
    np.testing.assert_array_equal(x.grad, 0)


def test_backward_least_squares_closed_form():
    a = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 4.0]])
    y = np.array([[1.0], [0.0], [-2.0]])
    x = leaf([[0.3], [-0.7]])
    with Tape():
        loss = tc.tsum(tc.square(tc.matmul(Tensor(a), x) - Tensor(y)))
    backward(loss)
    np.testing.assert_allclose(x.grad, 2 * a.T @ (a @ x.data - y), atol=1e-12)


def test_backward_accumulates_until_reset():
    x = leaf([1.0, 2.0])
    for _ in range(2):
        with Tape():
            loss = tc.tsum(tc.square(x))
        backward(loss)
    np.testing.assert_allclose(x.grad, 2 * 2 * x.data)
    x.zero_grad()
    assert x.grad is None


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with Tape():
        y = tc.square(x)
    with pytest.raises(ContractError):
        backward(y)


def test_tape_visits_each_node_once():
    x = leaf([1.0, 2.0])
    calls = []
    with Tape() as tape:
        h = tc.tanh(x)
        loss = tc.tsum(h * h + h)
    for i, (out, inputs, fn) in enumerate(tape.nodes):
        tape.nodes[i] = (out, inputs, (lambda f, j: (lambda g: (calls.append(j), f(g))[1]))(fn, i))
    backward(loss)
    assert sorted(calls) == list(range(len(tape.nodes)))
    assert calls == sorted(calls, reverse=True)


def test_no_tape_means_nothing_recorded():
    x = leaf([1.0])
    y = tc.square(x)
    assert y._tape is None


# --- grad_check -----------------------------------------------------------------------

def test_grad_check_polynomial():
    x = leaf([1.0, 2.0])
    assert grad_check(lambda: tc.tsum(tc.square(x)), [x]) < 1e-6


def test_grad_check_constant_function():
    x = leaf([1.0, 2.0])
    assert grad_check(lambda: Tensor(np.array(3.0)), [x]) == 0.0


def test_grad_check_detects_nondeterminism():
    x = leaf([1.0])
    rng = np.random.default_rng(0)
    with pytest.raises(DeterminismError):
        grad_check(lambda: tc.tsum(x * float(rng.normal())), [x])


def test_grad_check_restores_dtype():
    x = Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
    grad_check(lambda: tc.tsum(tc.square(x)), [x])
    assert x.dtype == np.float32 and x.grad is None


def _random_case(rng, kind):
    shapes = {"matmul": ((3, 4), (4, 2)), "conv1d": ((5, 3), (3, 3, 2), (2,)),
              "layer_norm": ((4, 6), (6,), (6,)), "attention": ((3, 4), (5, 4), (5, 4)),
              "softmax": ((3, 5),), "tanh": ((4,),), "sigmoid": ((4,),), "relu": ((7,),),
              "embedding": ((6, 3),), "concat": ((2, 3), (2, 2)), "getitem": ((6, 2),),
              "bce": ((5,),), "div": ((3,), (3,)), "broadcast_add": ((3, 4), (4,))}[kind]
    params = [leaf(rng.uniform(-1, 1, s)) for s in shapes]
    if kind == "div":
        params[1].data = rng.uniform(1, 2, 3)
    if kind == "relu":
        params[0].data = rng.uniform(0.1, 1, 7) * rng.choice([-1, 1], 7)
    weights = Tensor(rng.normal(size=(64,)))

    def f():
        if kind == "matmul":
            out = tc.matmul(*params)
        elif kind == "conv1d":
            out = tc.conv1d(*params)
        elif kind == "layer_norm":
            out = tc.layer_norm(*params)
        elif kind == "attention":
            mask = np.ones((3, 5), dtype=bool)
            mask[0, 3:] = False
            out = tc.scaled_dot_attention(*params, mask)[0]
        elif kind == "softmax":
            out = tc.softmax(params[0])
        elif kind == "embedding":
            out = tc.embedding(params[0], [[0, 2, 2], [5, 1, 0]])
        elif kind == "concat":
            out = tc.concat(params, axis=-1)
        elif kind == "getitem":
            out = params[0][::2]
        elif kind == "bce":
            out = tc.bce_with_logits(params[0], [0, 1, 0, 1, 0.5])
        elif kind == "div":
            out = tc.div(*params)
        elif kind == "broadcast_add":
            out = tc.add(*params)
        else:
            out = getattr(tc, kind)(params[0])
        flat = tc.reshape(out, (-1,))
        return tc.tsum(flat * Tensor(weights.data[: flat.size]))
    return f, params


KINDS = ["matmul", "conv1d", "layer_norm", "attention", "softmax", "tanh", "sigmoid", "relu",
         "embedding", "concat", "getitem", "bce", "div", "broadcast_add"]


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_op_passes_grad_check(kind, seed):
    f, params = _random_case(np.random.default_rng(seed), kind)
    assert grad_check(f, params) < 1e-5


@pytest.mark.parametrize("kind", ["matmul", "conv1d", "layer_norm", "attention", "tanh"])
def test_grad_check_in_float32_within_loose_gate(kind):
    f, params = _random_case(np.random.default_rng(7), kind)
    for p in params:
        p.data = p.data.astype(np.float32)
    assert grad_check(f, params, eps=1e-3, dtype=np.float32, order=2) < 1e-1
    assert grad_check(f, params) < 1e-3


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(11)
    q, k, v = (Tensor(rng.normal(size=(6, 8)).astype(np.float32)) for _ in range(3))
    a = tc.scaled_dot_attention(q, k, v)[0].data
    b = tc.scaled_dot_attention(q, k, v)[0].data
    assert a.tobytes() == b.tobytes()


def test_bce_with_infinite_logits_is_zero():
    z = Tensor(np.array([np.inf, -np.inf, 1e3, -1e3]))
    out = tc.bce_with_logits(z, [1, 0, 1, 0]).data
    np.testing.assert_array_equal(out, 0)
