import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivtlr import substrate as S
from ivtlr.substrate import Tensor


def rand(rng, *shape, grad=True):
    return Tensor(rng.uniform(-1, 1, shape), requires_grad=grad)


def central_diff(f, x, h=1e-6):
    """Independent float64 finite-difference gradient of a scalar numpy function."""
    x = x.astype(np.float64).copy()
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x)
        flat[i] = keep - h
        down = f(x)
        flat[i] = keep
        gflat[i] = (up - down) / (2 * h)
    return g


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3)).astype(np.float32)
    out = S.matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_softmax_uniform():
    out = S.softmax_rows(Tensor(np.zeros((1, 4))))
    np.testing.assert_allclose(out.data, [[0.25] * 4], atol=1e-7)


def test_layer_norm_moments():
    x = Tensor(np.random.default_rng(1).normal(3.0, 5.0, size=(7, 32)))
    y = S.layer_norm(x).data.astype(np.float64)
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-5)


def test_shape_mismatch_is_dimension_error():
    with pytest.raises(S.DimensionError):
        S.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(S.DimensionError):
        S.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(S.DimensionError):
        S.concat_rows([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))])


def test_non_finite_is_numeric_error():
    with pytest.raises(S.NumericError):
        S.scale(Tensor(np.array([[1e30]], dtype=np.float32)), 1e30)


def test_requires_grad_propagates_and_records():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 2)))
    with S.Graph() as g:
        c = S.add(a, b)
        d = S.add(b, b)
    assert c.requires_grad and not d.requires_grad
    assert len(g) == 1 and g.nodes[0].out is c


def test_backward_linear():
    x = Tensor(np.random.default_rng(2).uniform(-1, 1, (3, 4)), requires_grad=True)
    with S.Graph() as g:
        loss = S.total(S.scale(x, 3.0))
        grads = S.backward(loss, g)
    np.testing.assert_allclose(S.grad_of(grads, x), 3.0)
    np.testing.assert_allclose(x.grad, 3.0)


def test_backward_unreachable_is_zero():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = Tensor(np.ones((2, 2)), requires_grad=True)
    with S.Graph() as g:
        loss = S.total(S.scale(y, 2.0))
        grads = S.backward(loss, g)
    np.testing.assert_array_equal(S.grad_of(grads, x), 0.0)


def test_backward_needs_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with S.Graph() as g:
        y = S.scale(x, 2.0)
        with pytest.raises(S.ContractError):
            S.backward(y, g)


def test_grad_check_rejects_zero_step():
    with pytest.raises(S.ContractError):
        S.grad_check(lambda t: S.total(t), Tensor(np.ones((2, 2))), h=0.0)


def test_grad_check_linear_exact():
    w = Tensor(np.random.default_rng(3).normal(size=(4, 1)))
    x = Tensor(np.random.default_rng(4).normal(size=(2, 4)), requires_grad=True)
    assert S.grad_check(lambda t: S.total(S.matmul(t, w)), x, h=1e-3) < 1e-6


def test_grad_check_non_finite():
    x = Tensor(np.ones((1, 1)), requires_grad=True)

    def f(t):
        return Tensor(np.array(np.nan)) if t.data[0, 0] > 1.0 else S.total(t)

    with pytest.raises(S.NumericError):
        S.grad_check(f, x, h=0.5)


# every op against an independent numpy finite-difference oracle

rng = np.random.default_rng(11)
_W = rng.uniform(-1, 1, (5, 3))
_PROBE = {}


def _probe(shape):
    if shape not in _PROBE:
        _PROBE[shape] = np.random.default_rng(len(_PROBE) + 100).uniform(-1, 1, shape)
    return _PROBE[shape]


CASES = {
    "matmul": ((2, 4, 5), lambda t: S.matmul(t, Tensor(_W, requires_grad=False))),
    "matmul_weight": ((5, 3), lambda t: S.matmul(Tensor(_probe((2, 4, 5))), t)),
    "matmul_batched": ((2, 3, 4), lambda t: S.matmul(t, S.transpose(t))),
    "add_bias": ((3,), lambda t: S.add(Tensor(_probe((4, 3))), t)),
    "scale": ((3, 4), lambda t: S.scale(t, -1.7)),
    "softmax": ((2, 3, 5), lambda t: S.softmax_rows(t)),
    "softmax_causal": ((2, 4, 4), lambda t: S.softmax_rows(t, causal=True)),
    "layer_norm": ((3, 6), lambda t: S.layer_norm(t, Tensor(_probe((6,))), Tensor(_probe((6,)) * 0.5))),
    "layer_norm_gain": ((6,), lambda t: S.layer_norm(Tensor(_probe((2, 3, 6))), t, None)),
    "gelu": ((3, 5), lambda t: S.gelu(S.scale(t, 2.0))),
    "embed_lookup": ((6, 3), lambda t: S.embed_lookup(t, np.array([[0, 2, 2], [5, 1, 0]]))),
    "embed_lookup_batched": ((2, 5, 3), lambda t: S.embed_lookup(t, np.array([[4, 1], [0, 0]]))),
    "concat_rows": ((2, 3), lambda t: S.concat_rows([t, Tensor(_probe((1, 3))), t])),
    "slice_rows": ((5, 3), lambda t: S.slice_rows(t, 1, 4)),
    "transpose": ((3, 4), lambda t: S.transpose(t)),
    "split_merge": ((2, 3, 8), lambda t: S.merge_heads(S.scale(S.split_heads(t, 4), 2.0))),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_backward_matches_finite_differences(name):
    shape, build = CASES[name]
    x = Tensor(np.random.default_rng(7).uniform(-1, 1, shape).astype(np.float64), requires_grad=True)
    width = build(x).shape[-1]
    # a random linear functional of the output keeps softmax/layer_norm gradients non-degenerate
    w = Tensor(np.random.default_rng(8).uniform(-1, 1, (width, 3)))

    def loss(t):
        return S.total(S.matmul(build(t), w))

    with S.Graph() as g:
        analytic = S.grad_of(S.backward(loss(x), g), x)
    numeric = central_diff(lambda arr: float(loss(Tensor(arr)).data), x.data)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / scale
    assert rel[scale > 1e-7].max(initial=0.0) < 1e-4


def test_softmax_rows_properties():
    x = Tensor(np.random.default_rng(5).uniform(-30, 30, (6, 9)))
    y = S.softmax_rows(x).data.astype(np.float64)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    assert (y > 0).all()


@settings(max_examples=40, deadline=None)
@given(rows=st.integers(1, 6), cols=st.integers(1, 5), cut=st.integers(0, 6))
def test_concat_then_slice_is_identity(rows, cols, cut):
    cut = min(cut, rows)
    x = np.random.default_rng(rows * 31 + cols).normal(size=(rows, cols)).astype(np.float32)
    a, b = Tensor(x[:cut]), Tensor(x[cut:])
    joined = S.concat_rows([a, b])
    np.testing.assert_array_equal(S.slice_rows(joined, 0, cut).data, x[:cut])
    np.testing.assert_array_equal(S.slice_rows(joined, cut, rows).data, x[cut:])


def test_replay_is_bitwise_deterministic():
    rng = np.random.default_rng(9)
    a, b = rand(rng, 4, 8), rand(rng, 8, 8)

    def run():
        with S.Graph() as g:
            y = S.softmax_rows(S.matmul(S.gelu(S.matmul(a, b)), S.transpose(b)), causal=False)
            loss = S.total(S.layer_norm(y))
            grads = S.backward(loss, g)
        return y.data.copy(), S.grad_of(grads, b).copy()

    y1, g1 = run()
    y2, g2 = run()
    assert y1.tobytes() == y2.tobytes()
    assert g1.tobytes() == g2.tobytes()


def test_causal_softmax_zeroes_future():
    y = S.softmax_rows(Tensor(np.random.default_rng(0).normal(size=(2, 5, 5))), causal=True).data
    assert np.all(y[:, np.triu_indices(5, 1)[0], np.triu_indices(5, 1)[1]] == 0.0)


def test_nll_uniform_two_tokens():
    logits = Tensor(np.zeros((1, 2)), requires_grad=True)
    loss = S.nll(logits, np.array([1]), np.array([True]))
    assert abs(float(loss.data) - np.log(2.0)) < 1e-7
