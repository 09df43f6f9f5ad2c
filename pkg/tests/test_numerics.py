import zlib

import numpy as np
import pytest

from varflow import numerics as N
from varflow.numerics import Tensor, backward, finite_diff_grad, rel_error


def _grad(f, x):
    t = Tensor(x, requires_grad=True)
    backward(f(t))
    return t.grad


def test_backward_polynomial():
    assert _grad(lambda t: t * t, 3.0) == pytest.approx(6.0)


def test_backward_constant_gives_zero():
    x = Tensor(2.0, requires_grad=True)
    y = Tensor(5.0, requires_grad=True)
    backward(y * 1.0 + x * 0.0)
    assert x.grad == 0.0


def test_backward_softplus_at_zero():
    assert _grad(N.softplus, 0.0) == pytest.approx(0.5)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(N.ContractViolation):
        backward(x * 2.0)


def test_finite_diff_examples():
    assert finite_diff_grad(lambda x: float(x**2), np.array(3.0), 1e-4) == pytest.approx(6.0, abs=1e-6)
    assert finite_diff_grad(lambda x: float(np.exp(x)), np.array(0.0), 1e-4) == pytest.approx(1.0, abs=1e-6)


def test_finite_diff_propagates_nan():
    g = finite_diff_grad(lambda x: float("nan"), np.zeros(2))
    assert np.isnan(g).all()


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(N.tsum(x * x + x))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_records_nothing():
    x = Tensor(1.0, requires_grad=True)
    with N.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.parents == ()


def test_trace_replay_bit_identical():
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 4)))
    out = N.tsum(N.softmax(N.tanh(x @ w), axis=-1) * 3.0)
    rec = N.trace(out)
    assert rec.ops[-1] == "sum"
    replayed = rec.replay()
    for node, value in zip(rec.nodes, replayed):
        assert np.array_equal(node.data, value)


# --- per-primitive adjoint vs central differences ---------------------------

def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _off_kink(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 2.0, size=shape)


_ATTN_MASK = np.array([[True, True, True, False]])

CASES = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)], None),
    "sub": (lambda a, b: a - b, [(3, 1), (3, 4)], None),
    "mul": (lambda a, b: a * b, [(3, 4), (3, 4)], None),
    "div": (lambda a, b: a / b, [(3, 4), (4,)], _pos),
    "pow": (lambda a: a**1.7, [(5,)], _pos),
    "exp": (N.exp, [(5,)], None),
    "log": (N.log, [(5,)], _pos),
    "tanh": (N.tanh, [(5,)], None),
    "sigmoid": (N.sigmoid, [(5,)], None),
    "softplus": (N.softplus, [(5,)], None),
    "relu": (N.relu, [(5,)], _off_kink),
    "sqrt": (N.sqrt, [(5,)], _pos),
    "matmul": (lambda a, b: a @ b, [(2, 3, 4), (4, 5)], None),
    "sum_axis": (lambda a: N.tsum(a, axis=1), [(3, 4)], None),
    "mean": (lambda a: N.mean(a, axis=0, keepdims=True), [(3, 4)], None),
    "masked_mean": (lambda a: N.masked_mean(a, np.array([1, 0, 1, 1])), [(2, 4)], None),
    "reshape_transpose": (lambda a: a.reshape(4, 3).transpose(1, 0), [(3, 4)], None),
    "slice": (lambda a: a[:, 1:3], [(3, 4)], None),
    "concat": (lambda a, b: N.concat([a, b], axis=0), [(2, 3), (1, 3)], None),
    "softmax": (lambda a: N.softmax(a, axis=-1), [(3, 4)], None),
    "cumsum": (lambda a: N.cumsum(a, axis=-1), [(3, 4)], None),
    "gather": (lambda a: N.gather(a, np.array([[0, 2, 2], [3, 1, 0]]), axis=1), [(2, 4)], None),
    "embedding": (lambda t: N.embedding(t, np.array([[1, 1, 0], [2, 0, 1]])), [(3, 4)], None),
    "where": (lambda a, b: N.where(np.array([True, False, True]), a, b), [(3,), (3,)], None),
    "layer_norm": (lambda x, g, b: N.layer_norm(x, g, b), [(2, 3, 5), (5,), (5,)], None),
    "conv1d": (lambda x, w, b: N.conv1d(x, w, b), [(2, 6, 3), (3, 3, 4), (4,)], None),
    "dropout": (lambda a: N.dropout(a, np.array([True, False, True, True]), 0.25), [(4,)], None),
    "attention": (
        lambda q, k, v: N.softmax(q @ k.transpose(0, 2, 1) + np.where(_ATTN_MASK, 0.0, -1e9), -1) @ v,
        [(1, 4, 3), (1, 4, 3), (1, 4, 3)],
        None,
    ),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_adjoint_matches_finite_differences(name):
    fn, shapes, sampler = CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        arrays = [(sampler or (lambda r, s: r.normal(size=s)))(rng, s) for s in shapes]
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
        proj = rng.normal(size=out_shape)

        def scalar(*xs):
            return N.tsum(fn(*xs) * proj)

        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        backward(scalar(*leaves))
        for i, leaf in enumerate(leaves):
            def f_i(xi, i=i):
                xs = [Tensor(a) for a in arrays]
                xs[i] = Tensor(xi)
                return scalar(*xs)

            numeric = finite_diff_grad(f_i, arrays[i], eps=1e-6)
            worst = max(worst, rel_error(leaf.grad, numeric))
    assert worst < 1e-4, f"{name}: worst relative error {worst:.2e}"


def test_dropout_layer_is_seeded():
    x = Tensor(np.ones((4, 8)))
    a = N.nn.dropout(x, 0.5, np.random.default_rng(3), active=True)
    b = N.nn.dropout(x, 0.5, np.random.default_rng(3), active=True)
    c = N.nn.dropout(x, 0.5, None, active=False)
    assert np.array_equal(a.data, b.data)
    assert c is x
    assert set(np.unique(a.data)) <= {0.0, 2.0}


def test_module_parameter_discovery():
    rng = np.random.default_rng(0)
    block = N.nn.FFTBlock(8, 2, 16, 3, 0.1, rng)
    names = [n for n, _ in block.named_parameters()]
    assert "attn.q.weight" in names and "norm2.beta" in names
    assert len(names) == len(set(names))
