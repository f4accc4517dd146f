import numpy as np
import pytest
from hypothesis import given, strategies as st

from regionsep.autodiff import (
    NumericalError,
    Tape,
    Tensor,
    abs_,
    concat,
    exp,
    istft_op,
    log,
    lstm,
    no_record,
    sigmoid,
    sqrt,
    stack,
    stft_op,
    tanh,
)
from regionsep.dsp import StftConfig, istft, stft

SMALL = StftConfig(16000, 32, 8, 32)


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def check(fn, *shapes, seed=0, positive=False, tol=1e-6):
    g = np.random.default_rng(seed)
    vals = [g.uniform(0.5, 2.0, s) if positive else g.standard_normal(s) for s in shapes]
    leaves = {str(i): Tensor(v, requires_grad=True) for i, v in enumerate(vals)}
    with Tape() as tape:
        out = fn(*leaves.values())
    grads = tape.backward(out, leaves)
    for i, v in enumerate(vals):
        def f(xi, i=i):
            args = [Tensor(xi if j == i else vals[j]) for j in range(len(vals))]
            return float(fn(*args).value)
        np.testing.assert_allclose(grads[str(i)], numeric_grad(f, v), atol=tol, rtol=tol)


def test_arithmetic_broadcast_grads():
    check(lambda a, b: ((a * b + a - b) / (b * b + 1.0)).sum(), (3, 4), (4,))


def test_matmul_grads():
    check(lambda a, b: (a @ b).sum(), (2, 3, 4), (4, 5))


def test_elementwise_grads():
    check(lambda a: (tanh(a) + sigmoid(a) + exp(a * 0.3)).sum(), (5,))
    check(lambda a: (log(a) + sqrt(a)).sum(), (5,), positive=True)
    check(lambda a: abs_(a).sum(), (6,))


def test_shape_op_grads():
    check(lambda a: (a.reshape(4, 3).transpose(1, 0) * np.arange(12.0).reshape(3, 4)).sum(), (3, 4))
    check(lambda a: (a[1:, ::2] * 3.0).sum() + a[[0, 0, 1]].sum(), (3, 4))
    check(lambda a, b: (concat([a, b], axis=0) * np.arange(5.0)[:, None]).sum(), (2, 3), (3, 3))
    check(lambda a, b: (stack([a, b]) * np.array([[1.0], [2.0]])).sum(), (3,), (3,))
    check(lambda a: a.mean(axis=1).sum() + a.swapaxes(0, 1)[0].sum(), (2, 3))
    check(lambda a: (a.expand((4, 3)) * np.arange(12.0).reshape(4, 3)).sum(), (1, 3))


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_grads(reverse):
    H = 3
    fn = lambda x, w, u, b: (lstm(x, w, u, b, reverse) * np.linspace(-1, 1, H)).sum()
    check(fn, (2, 4, 5), (4 * H, 5), (4 * H, H), (4 * H,))


def test_stft_op_matches_stft_and_grads():
    g = np.random.default_rng(0)
    x = g.standard_normal((2, 80))
    out = stft_op(Tensor(x), SMALL).value
    ref = stft(x, SMALL).data
    np.testing.assert_allclose(out[:, 0], ref.real, atol=1e-12)
    np.testing.assert_allclose(out[:, 1], ref.imag, atol=1e-12)
    w = g.standard_normal(out.shape)
    check(lambda a: (stft_op(a, SMALL) * w).sum(), (2, 80))


def test_istft_op_matches_istft_and_grads():
    g = np.random.default_rng(1)
    x = g.standard_normal(80)
    spec = stft(x, SMALL)
    z = np.stack([spec.data.real, spec.data.imag])
    np.testing.assert_allclose(istft_op(Tensor(z), SMALL, 80).value, istft(spec), atol=1e-12)
    w = g.standard_normal(80)
    check(lambda a: (istft_op(a, SMALL, 80) * w).sum(), z.shape)


def test_no_grad_without_tape():
    a = Tensor(np.ones(3), requires_grad=True)
    out = (a * 2).sum()
    assert out._back is None
    with Tape() as tape, no_record():
        out = (a * 2).sum()
    assert not tape.nodes


def test_backward_errors():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = a * 2
    with pytest.raises(ValueError):
        tape.backward(out)
    with Tape() as tape, np.errstate(divide="ignore"):
        out = (log(a * 0.0)).sum()
    with pytest.raises(NumericalError):
        tape.backward(out, {"a": a})


def test_nonfinite_gradient_names_block():
    a = Tensor(np.zeros(2), requires_grad=True)
    with Tape() as tape:
        out = (sqrt(a) * 0.0).sum()
    with pytest.raises(NumericalError, match="block 'blk'"):
        with np.errstate(all="ignore"):
            tape.backward(out, {"blk": a})


@given(st.integers(0, 2**31 - 1))
def test_sum_of_products_grad_is_other_factor(seed):
    g = np.random.default_rng(seed)
    av, bv = g.standard_normal((2, 7))
    a, b = Tensor(av, requires_grad=True), Tensor(bv, requires_grad=True)
    with Tape() as tape:
        out = (a * b).sum()
    grads = tape.backward(out, {"a": a, "b": b})
    np.testing.assert_allclose(grads["a"], bv)
    np.testing.assert_allclose(grads["b"], av)
