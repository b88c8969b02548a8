import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lmforge import tensor as T
from gradcheck import check_op

R = np.random.default_rng(7)


def randn(*shape):
    return R.normal(size=shape)


def positive(*shape):
    return R.uniform(0.5, 2.0, size=shape)


IDX = (np.array([0, 2, 2, 1]), np.array([1, 0, 0, 3]))
IDS = np.array([[0, 3, 3], [1, 0, 4]])
TARGETS = np.array([[1, -100, 4], [0, 2, -100]])
MASK = np.where(R.random((2, 1, 1, 5)) < 0.3, -50.0, 0.0)

OPS = {
    "add": (lambda a, b: a + b, [randn(2, 3, 4), randn(3, 4)]),
    "sub": (lambda a, b: a - b, [randn(2, 3), randn(2, 3)]),
    "mul": (lambda a, b: a * b, [randn(2, 3, 4), randn(4)]),
    "div": (lambda a, b: a / b, [randn(3, 4), positive(3, 4)]),
    "neg": (lambda a: -a, [randn(5)]),
    "add_constant": (lambda a: T.add_constant(a, MASK), [randn(2, 3, 4, 5)]),
    "exp": (T.exp, [randn(3, 3)]),
    "log": (T.log, [positive(3, 3)]),
    "sqrt": (T.sqrt, [positive(4)]),
    "tanh": (T.tanh, [randn(2, 5)]),
    "gelu_tanh": (lambda a: T.gelu(a, "tanh"), [randn(3, 4) * 2]),
    "gelu_erf": (lambda a: T.gelu(a, "none"), [randn(3, 4) * 2]),
    "reshape": (lambda a: T.reshape(a, (4, 3)), [randn(2, 6)]),
    "transpose": (lambda a: T.transpose(a, (0, 2, 1)), [randn(2, 3, 4)]),
    "index": (lambda a: T.index(a, IDX), [randn(3, 4)]),
    "embedding": (lambda w: T.embedding(w, IDS), [randn(5, 3)]),
    "sum_axis": (lambda a: T.tsum(a, axis=1, keepdims=True), [randn(2, 3, 4)]),
    "mean": (lambda a: T.mean(a, axis=-1), [randn(2, 3, 4)]),
    "matmul_batched": (T.matmul, [randn(2, 3, 4), randn(2, 4, 5)]),
    "matmul_shared": (T.matmul, [randn(2, 3, 4), randn(4, 5)]),
    "matmul_4d": (T.matmul, [randn(2, 2, 3, 4), randn(2, 2, 4, 3)]),
    "softmax": (lambda a: T.softmax(a, axis=-1), [randn(3, 5)]),
    "log_softmax": (lambda a: T.log_softmax(a, axis=-1), [randn(3, 5)]),
    "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b, eps=1e-5), [randn(2, 3, 6), randn(6), randn(6)]),
    "cross_entropy": (lambda z: T.cross_entropy(z, TARGETS), [randn(2, 3, 6)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradient_float32(name):
    fn, arrs = OPS[name]
    assert check_op(fn, arrs, dtype=np.float32) < 1e-2


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradient_float64_tight(name):
    fn, arrs = OPS[name]
    assert check_op(fn, arrs, dtype=np.float64) < 1e-6


def test_softmax_against_mpmath():
    x = [0.3, -1.2, 2.5, 0.0, 7.0]
    mpmath.mp.dps = 50
    exps = [mpmath.exp(v) for v in x]
    want = [float(e / sum(exps)) for e in exps]
    got = T.softmax(T.tensor(x, dtype=np.float64)).data
    np.testing.assert_allclose(got, want, rtol=1e-13)


def test_gelu_tanh_form_against_mpmath():
    mpmath.mp.dps = 50
    x = mpmath.mpf(1)
    c = mpmath.sqrt(2 / mpmath.pi)
    want = float(x / 2 * (1 + mpmath.tanh(c * (x + mpmath.mpf("0.044715") * x ** 3))))
    got = T.gelu(T.tensor([1.0], dtype=np.float64), "tanh").data[0]
    assert abs(got - want) < 1e-12
    exact = float(x / 2 * (1 + mpmath.erf(x / mpmath.sqrt(2))))
    assert abs(T.gelu(T.tensor([1.0], dtype=np.float64), "none").data[0] - exact) < 1e-12


def test_layer_norm_known_value():
    out = T.layer_norm(T.tensor([1.0, 2.0, 3.0], dtype=np.float64), T.tensor(np.ones(3), dtype=np.float64),
                       T.tensor(np.zeros(3), dtype=np.float64)).data
    s = math.sqrt(1.5)
    np.testing.assert_allclose(out, [-s, 0.0, s], atol=1e-9)


def test_fan_out_accumulates():
    x = T.tensor([1.5, -2.0], requires_grad=True, dtype=np.float64)
    y = (x * x + x).sum()
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_tied_weight_sums_both_uses():
    w = T.tensor(randn(4, 3), requires_grad=True, dtype=np.float64)
    h = T.embedding(w, np.array([0, 2]))
    logits = T.matmul(h, w.T)
    logits.sum().backward()
    g_embed = np.zeros((4, 3))
    rows = logits.data.shape[0]
    # d/dw of sum(h @ w^T): embedding path + projection path
    proj = np.tile(h.data.sum(axis=0), (4, 1))
    col = np.ones((rows, 4)) @ w.data
    np.add.at(g_embed, [0, 2], col)
    np.testing.assert_allclose(w.grad, proj + g_embed, rtol=1e-12)


def test_only_requires_grad_leaves_get_grad():
    a = T.tensor([1.0, 2.0], requires_grad=True)
    b = T.tensor([3.0, 4.0])
    (a * b).sum().backward()
    assert a.grad is not None and b.grad is None


def test_non_scalar_backward_needs_seed():
    a = T.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        (a * 2.0).backward()
    (a * 2.0).backward(np.ones(2, dtype=np.float32))
    np.testing.assert_allclose(a.grad, [2.0, 2.0])


def test_trailing_broadcast_rejected():
    with pytest.raises(T.DimensionError):
        T.tensor(np.ones((2, 3))) + T.tensor(np.ones((2, 1)))


def test_non_finite_detected():
    with pytest.raises(T.NonFiniteError):
        with np.errstate(all="ignore"):
            T.log(T.tensor([-1.0]))


def test_cross_entropy_nothing_selected():
    with pytest.raises(ValueError):
        T.cross_entropy(T.tensor(np.zeros((2, 3))), np.array([-100, -100]))


def test_cross_entropy_uniform_is_log_v():
    z = T.tensor(np.zeros((4, 10)), dtype=np.float64)
    assert abs(T.cross_entropy(z, np.arange(4)).item() - math.log(10)) < 1e-12


def test_adam_first_step_is_lr_times_sign():
    p = T.tensor([1.0, -3.0, 0.5], requires_grad=True, dtype=np.float64)
    g = np.array([0.2, -5.0, 1e-3])
    T.adam_step([p], [g], T.AdamState(lr=0.1))
    np.testing.assert_allclose(p.data, [0.9, -2.9, 0.4], atol=1e-5)


def test_adam_zero_lr_leaves_params_bit_identical():
    p = T.tensor(randn(3, 3), requires_grad=True)
    before = p.data.copy()
    state = T.AdamState(lr=0.0)
    for _ in range(3):
        T.adam_step([p], [np.ones((3, 3), dtype=np.float32)], state)
    assert np.array_equal(p.data, before)


def test_adam_matches_reference_recurrence():
    p = T.tensor([0.5], requires_grad=True, dtype=np.float64)
    state = T.AdamState(lr=0.01)
    m = v = 0.0
    x = 0.5
    for t, g in enumerate([0.3, -0.1, 0.7], start=1):
        T.adam_step([p], [np.array([g])], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert abs(p.data[0] - x) < 1e-12


def test_warmup_linear_shape():
    lrs = [T.warmup_linear(s, 100, 1.0, 0.1) for s in range(100)]
    assert lrs[9] == pytest.approx(1.0)
    assert all(a <= b for a, b in zip(lrs[:10], lrs[1:10]))
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
    assert lrs[-1] > 0 and T.warmup_linear(100, 100, 1.0, 0.1) == 0.0


def test_backward_is_deterministic():
    def run():
        a = T.tensor(np.linspace(-1, 1, 12).reshape(3, 4), requires_grad=True)
        w = T.tensor(np.linspace(0, 2, 20).reshape(4, 5), requires_grad=True)
        T.cross_entropy(T.matmul(a, w), np.array([0, 3, 4])).backward()
        return a.grad.copy(), w.grad.copy()

    (a1, w1), (a2, w2) = run(), run()
    assert np.array_equal(a1, a2) and np.array_equal(w1, w2)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-30, 30)))
def test_softmax_is_a_distribution(x):
    p = T.softmax(T.tensor(x, dtype=np.float64)).data
    assert abs(p.sum() - 1) < 1e-12 and (p >= 0).all()
    logp = T.log_softmax(T.tensor(x, dtype=np.float64)).data
    np.testing.assert_allclose(np.exp(logp), p, rtol=1e-12, atol=1e-300)
