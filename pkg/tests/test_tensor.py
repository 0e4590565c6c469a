import numpy as np
import pytest

from more_kit import tensor as T
from more_kit.tensor import NumericsError, Tensor

from fdcheck import assert_gradients_close, finite_difference_gradient

OP_TOL = 1e-4
N_SEEDS = 100


def _loss_through(op, arrays, wrt, **kwargs):
    """Scalar pipeline: weighted sum of op output, for FD checking."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors, **kwargs)
    weights = np.linspace(0.5, 1.5, out.data.size).reshape(out.shape)
    loss = T.tsum(T.mul(out, Tensor(weights)))
    loss.backward()

    def f(args):
        outs = op(*[Tensor(a) for a in args], **kwargs)
        return float((outs.data * weights).sum())

    numeric = finite_difference_gradient(f, arrays, wrt)
    return tensors[wrt].grad, numeric


def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[1.0], [2.0]]))
    assert np.array_equal(out.data, [[1.0], [2.0]])


def test_matmul_zero():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [0.0]]))
    assert np.array_equal(out.data, [[0.0], [0.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    for wrt in (0, 1):
        analytic, numeric = _loss_through(T.matmul, [a, b], wrt)
        assert_gradients_close(analytic, numeric, 1e-5)


@pytest.mark.parametrize("shapes", [
    ((3, 4), (4, 2)),
    ((2, 3, 4), (4, 5)),
    ((2, 3, 4), (2, 4, 5)),
    ((4,), (4, 3)),
    ((3, 4), (4,)),
    ((4,), (4,)),
])
def test_matmul_gradient_shapes(shapes):
    rng = np.random.default_rng(7)
    arrays = [rng.normal(size=s) for s in shapes]
    for wrt in range(2):
        analytic, numeric = _loss_through(T.matmul, arrays, wrt)
        assert_gradients_close(analytic, numeric, OP_TOL)


def test_softmax_uniform():
    out = T.softmax(Tensor([0.0, 0.0, 0.0, 0.0]), temperature=1.0)
    assert np.allclose(out.data, 0.25, atol=1e-15)


def test_softmax_extreme_logits_stay_finite():
    out = T.softmax(Tensor([1000.0, 0.0]), temperature=1.0)
    assert abs(out.data[0] - 1.0) < 1e-12
    assert abs(out.data[1]) < 1e-12


def test_softmax_rejects_nonpositive_temperature():
    with pytest.raises(ValueError):
        T.softmax(Tensor([1.0, 2.0]), temperature=0.0)


def test_softmax_jacobian_matches_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(20):
        v = rng.normal(size=5)
        analytic, numeric = _loss_through(T.softmax, [v], 0, temperature=0.7)
        assert_gradients_close(analytic, numeric, 1e-5)


def test_slice_rows_and_cols_shapes():
    a = Tensor(np.arange(8 * 16, dtype=float).reshape(8, 16))
    assert T.slice_rows(a, 3).shape == (3, 16)
    b = Tensor(np.arange(32 * 8, dtype=float).reshape(32, 8))
    assert T.slice_cols(b, 3).shape == (32, 3)


def test_slice_rows_out_of_range():
    a = Tensor(np.ones((4, 4)))
    with pytest.raises(ValueError):
        T.slice_rows(a, 5)
    with pytest.raises(ValueError):
        T.slice_cols(a, 0)


def test_slice_rows_gradient_scatters():
    a = Tensor(np.random.default_rng(1).normal(size=(4, 3)), requires_grad=True)
    T.tsum(T.slice_rows(a, 2)).backward()
    assert np.array_equal(a.grad[:2], np.ones((2, 3)))
    assert np.array_equal(a.grad[2:], np.zeros((2, 3)))


def test_stop_gradient_identity_and_zero_grad():
    x = Tensor([0.2, 0.7, 0.1], requires_grad=True)
    out = T.stop_gradient(x)
    assert np.array_equal(out.data, [0.2, 0.7, 0.1])
    loss = T.tsum(out)
    loss.backward()
    assert x.grad is None  # no gradient path at all


def test_ste_algebra_constant_forward_identity_backward():
    x = Tensor([0.3, -1.2, 4.0], requires_grad=True)
    out = T.add(x, T.stop_gradient(T.mul(x, -1.0)))
    assert np.allclose(out.data, 0.0)
    T.tsum(out).backward()
    assert np.array_equal(x.grad, np.ones(3))


def test_diamond_graph_accumulates_both_branches():
    x = Tensor([2.0], requires_grad=True)
    left = T.mul(x, 3.0)
    right = T.mul(x, 5.0)
    T.tsum(T.add(left, right)).backward()
    assert np.array_equal(x.grad, [8.0])


def test_fanout_reuse_accumulates():
    x = Tensor([1.5], requires_grad=True)
    y = T.mul(x, x)  # same tensor twice
    T.tsum(y).backward()
    assert np.allclose(x.grad, [3.0])


def test_nan_output_is_an_error():
    with pytest.raises(NumericsError):
        T.power(Tensor([-1.0]), 0.5)


def test_log_clamps_at_floor():
    out = T.log(Tensor([0.0]))
    assert np.isfinite(out.data[0])
    assert out.data[0] < -600


def test_one_hot():
    v = T.one_hot(2, 5)
    assert np.array_equal(v.data, [0, 0, 1, 0, 0])
    assert not v.requires_grad
    with pytest.raises(ValueError):
        T.one_hot(5, 5)


def test_take_and_take_row_gradients():
    p = Tensor([0.2, 0.7, 0.1], requires_grad=True)
    T.take(p, 1).backward()
    assert np.array_equal(p.grad, [0.0, 1.0, 0.0])

    m = Tensor(np.arange(6, dtype=float).reshape(3, 2), requires_grad=True)
    T.tsum(T.take_row(m, 2)).backward()
    expected = np.zeros((3, 2))
    expected[2] = 1.0
    assert np.array_equal(m.grad, expected)


def test_cross_entropy_direct_formula_oracle():
    rng = np.random.default_rng(11)
    logits = rng.normal(size=(5, 7))
    probs = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
    targets = rng.integers(0, 7, size=5)
    out = T.cross_entropy(Tensor(probs), targets)
    expected = -np.mean([np.log(probs[i, t]) for i, t in enumerate(targets)])
    assert abs(out.item() - expected) < 1e-12


def test_cross_entropy_target_out_of_range():
    probs = np.full((2, 3), 1.0 / 3.0)
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor(probs), np.array([0, 3]))


def test_cosine_similarity_zero_norm_is_error():
    with pytest.raises(ValueError):
        T.cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


def test_cosine_similarity_value():
    a = Tensor([1.0, 0.0])
    b = Tensor([1.0, 1.0])
    out = T.cosine_similarity(a, b)
    assert abs(out.item() - 1.0 / np.sqrt(2.0)) < 1e-14


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_all_ops_gradients_over_seeds(seed):
    """Every differentiable op against central differences, one seed each."""
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    m = rng.normal(size=(4, 3))
    v = rng.normal(size=6)

    cases = [
        (T.add, [a, b], {}),
        (T.sub, [a, b], {}),
        (T.mul, [a, b], {}),
        (T.matmul, [a, m], {}),
        (T.exp, [a * 0.3], {}),
        (T.log, [np.abs(a) + 0.5], {}),
        (T.tanh, [a], {}),
        (T.power, [np.abs(a) + 0.5], {"exponent": -0.5}),
        (T.tsum, [a], {"axis": 1}),
        (T.mean, [a], {"axis": 0}),
        (T.softmax, [v], {"temperature": 0.5}),
        (T.narrow, [a], {"axis": 1, "start": 1, "length": 2}),
        (T.reshape, [a], {"shape": (4, 3)}),
        (T.transpose_last, [a], {}),
    ]
    for op, arrays, kwargs in cases:
        for wrt in range(len(arrays)):
            analytic, numeric = _loss_through(op, arrays, wrt, **kwargs)
            assert_gradients_close(analytic, numeric, OP_TOL)


def test_broadcast_add_gradient():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(2, 3, 4))
    bias = rng.normal(size=4)
    for wrt in range(2):
        analytic, numeric = _loss_through(T.add, [a, bias], wrt)
        assert_gradients_close(analytic, numeric, OP_TOL)


def test_concat_gradient():
    rng = np.random.default_rng(9)
    parts = [rng.normal(size=(2, 3)) for _ in range(3)]
    tensors = [Tensor(p, requires_grad=True) for p in parts]
    out = T.concat(tensors, axis=1)
    assert out.shape == (2, 9)
    weights = np.linspace(0.0, 1.0, 18).reshape(2, 9)
    T.tsum(T.mul(out, Tensor(weights))).backward()
    for i, t in enumerate(tensors):
        assert np.array_equal(t.grad, weights[:, 3 * i:3 * (i + 1)])


def test_backward_requires_scalar_or_seed():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = T.mul(x, 2.0)
    with pytest.raises(ValueError):
        y.backward()
    y.backward(np.ones((2, 2)))
    assert np.array_equal(x.grad, 2 * np.ones((2, 2)))
