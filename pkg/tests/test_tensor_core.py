import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clca import autodiff as ad
from clca.autodiff import DimensionError, NonFiniteError, Parameter, Tape, Tensor, backward

from .oracles import gelu_erf, matmul_loops, numeric_grad, softmax_formula


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# matmul

def test_matmul_identity():
    out = ad.matmul(T(np.eye(2)), T([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_row_by_column():
    assert ad.matmul(T([[1, 2]]), T([[3], [4]])).data.tolist() == [[11]]


def test_matmul_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
    expected = matmul_loops(a.tolist(), b.tolist())
    assert np.abs(ad.matmul(T(a), T(b)).data - expected).max() < 1e-6


def test_matmul_batch_broadcast():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
    np.testing.assert_allclose(ad.matmul(T(a), T(b)).data, a @ b)


def test_matmul_shape_error_mentions_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


# ---------------------------------------------------------------------------
# softmax

def test_softmax_symmetric():
    np.testing.assert_allclose(ad.softmax_lastdim(T([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_large_logits_do_not_overflow():
    out = ad.softmax_lastdim(T([1000.0, 0.0])).data
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_matches_formula():
    np.testing.assert_allclose(
        ad.softmax_lastdim(T([1.0, 2.0, 3.0])).data, softmax_formula([1, 2, 3]), atol=1e-7
    )


def test_softmax_empty_last_dim():
    with pytest.raises(DimensionError):
        ad.softmax_lastdim(T(np.zeros((2, 0))))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).normal(0, 10, size=(rows, cols)).astype(np.float32)
    out = ad.softmax_lastdim(Tensor(x)).data
    assert np.abs(out.sum(-1) - 1).max() < 1e-6
    assert (out >= 0).all()


# ---------------------------------------------------------------------------
# layer norm

def test_layer_norm_constant_token():
    out = ad.layer_norm(T([5, 5, 5, 5]), T(np.ones(4)), T(np.zeros(4)), 1e-5)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_zero_gamma_returns_beta():
    beta = np.array([0.5, -1.0, 2.0])
    out = ad.layer_norm(T(np.random.default_rng(0).standard_normal((4, 3))), T(np.zeros(3)), T(beta))
    np.testing.assert_allclose(out.data, np.tile(beta, (4, 1)))


def test_layer_norm_statistics():
    x = np.random.default_rng(3).normal(2.0, 5.0, size=(6, 32))
    out = ad.layer_norm(T(x), T(np.ones(32)), T(np.zeros(32)), 1e-6).data
    assert np.abs(out.mean(-1)).max() < 1e-5
    assert np.abs(out.var(-1) - 1).max() < 1e-5


def test_layer_norm_width_mismatch():
    with pytest.raises(DimensionError):
        ad.layer_norm(T(np.ones((2, 4))), T(np.ones(3)), T(np.zeros(3)))


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        ad.layer_norm(T(np.ones((2, 4))), T(np.ones(4)), T(np.zeros(4)), 0.0)


# ---------------------------------------------------------------------------
# batch norm

def _bn(x, training, mean=None, var=None, c=None):
    c = c or x.shape[1]
    rm = np.zeros(c) if mean is None else mean
    rv = np.ones(c) if var is None else var
    out = ad.batch_norm(T(x), T(np.ones(c)), T(np.zeros(c)), rm, rv, training)
    return out.data, rm, rv


def test_batch_norm_train_unit_pair():
    out, _, _ = _bn(np.array([[[-1.0]], [[1.0]]]), training=True)
    np.testing.assert_allclose(out.reshape(-1), [-1.0, 1.0], atol=1e-5)


def test_batch_norm_eval_identity_with_init_stats():
    x = np.random.default_rng(0).standard_normal((3, 4, 2))
    out, _, _ = _bn(x, training=False)
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5))


def test_batch_norm_train_statistics_and_running_update():
    x = np.random.default_rng(1).normal(3.0, 2.0, size=(8, 5, 3))
    out, rm, rv = _bn(x, training=True)
    assert np.abs(out.mean(axis=(0, 2))).max() < 1e-6
    assert np.abs(out.var(axis=(0, 2)) - 1).max() < 1e-4
    mu = x.mean(axis=(0, 2))
    var = x.var(axis=(0, 2), ddof=1)
    np.testing.assert_allclose(rm, 0.1 * mu)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var)


def test_batch_norm_eval_is_affine():
    rng = np.random.default_rng(2)
    mean, var = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
    x1, x2 = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
    f = lambda x: _bn(x, False, mean.copy(), var.copy())[0]  # noqa: E731
    np.testing.assert_allclose(f(0.3 * x1 + 0.7 * x2), 0.3 * f(x1) + 0.7 * f(x2), atol=1e-12)


# ---------------------------------------------------------------------------
# gelu

def test_gelu_zero():
    assert ad.gelu(T([0.0])).data[0] == 0.0


def test_gelu_asymptote():
    assert abs(ad.gelu(T([10.0])).data[0] - 10.0) < 1e-6


def test_gelu_matches_erf_oracle():
    xs = [-3.0, -1.0, -0.1, 0.5, 1.0, 2.5]
    np.testing.assert_allclose(ad.gelu(T(xs)).data, [gelu_erf(v) for v in xs], atol=1e-7)
    assert ad.gelu(T([1.0])).data[0] == pytest.approx(0.5 * (1 + math.erf(1 / math.sqrt(2))), abs=1e-7)


# ---------------------------------------------------------------------------
# topk

def test_topk_worked_example():
    assert ad.topk_stable([0.3, 0.05, 0.2, 0.1, 0.25, 0.1], 3).tolist() == [0, 2, 4]


def test_topk_keep_all():
    assert ad.topk_stable([3.0, 1.0, 2.0], 3).tolist() == [0, 1, 2]


def test_topk_ties_prefer_low_index():
    assert ad.topk_stable([1.0, 1.0, 1.0, 1.0], 2).tolist() == [0, 1]


@pytest.mark.parametrize("k", [0, 7])
def test_topk_k_out_of_range(k):
    with pytest.raises(ValueError):
        ad.topk_stable(np.zeros(6), k)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=20), st.data())
def test_topk_sorted_unique_and_matches_sort_oracle(values, data):
    k = data.draw(st.integers(1, len(values)))
    got = ad.topk_stable(np.array(values, dtype=float), k).tolist()
    expected = sorted(sorted(range(len(values)), key=lambda i: (-values[i], i))[:k])
    assert got == expected
    assert got == sorted(set(got))


# ---------------------------------------------------------------------------
# tape / backward

def test_backward_sum_gives_ones():
    x = Parameter("x", np.array([1.0, -2.0, 3.0]))
    with Tape() as tape:
        loss = ad.sum(x)
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_sum_of_squares():
    x = Parameter("x", np.array([1.0, 2.0]))
    with Tape() as tape:
        loss = ad.sum(ad.mul(x, x))
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_unreachable_leaf_gets_zero_grad():
    x = Parameter("x", np.array([1.0, 2.0]))
    y = Parameter("y", np.array([5.0]))
    with Tape() as tape:
        _unused = ad.mul(y, 2.0)
        loss = ad.sum(x)
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads[y], [0.0])


def test_backward_rejects_non_scalar():
    x = Parameter("x", np.array([1.0, 2.0]))
    with Tape() as tape:
        y = ad.mul(x, 3.0)
    with pytest.raises(DimensionError):
        backward(tape, y)


def test_tape_is_topologically_ordered():
    x = Parameter("x", np.ones(3))
    with Tape() as tape:
        y = ad.mul(x, 2.0)
        ad.sum(ad.add(y, x))
    produced = set()
    for entry in tape.entries:
        for inp in entry.inputs:
            assert inp is x or id(inp) in produced or not inp.requires_grad
        produced.add(id(entry.output))


def test_no_recording_without_tape():
    x = Parameter("x", np.ones(3))
    assert not ad.mul(x, 2.0).requires_grad


def test_nonfinite_output_is_an_error():
    with pytest.raises(NonFiniteError):
        ad.log(T([0.0]))


def test_elementwise_requires_suffix_broadcast():
    with pytest.raises(DimensionError):
        ad.add(T(np.ones((2, 3))), T(np.ones((2, 1))))
    assert ad.add(T(np.ones((4, 2, 3))), T(np.ones(3))).shape == (4, 2, 3)


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((16, 32)).astype(np.float32), rng.standard_normal((32, 8)).astype(np.float32)
    outs = [ad.gelu(ad.matmul(Tensor(a), Tensor(b))).data.tobytes() for _ in range(3)]
    assert len(set(outs)) == 1


# ---------------------------------------------------------------------------
# finite-difference property: every differentiable op, float64

def _rel(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def _check_op(fn, *shapes, seed=0, positive=False):
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(0.5, 2.0, s) if positive else rng.standard_normal(s) for s in shapes]
    params = [Parameter(f"x{i}", a) for i, a in enumerate(arrays)]
    weights = None

    def scalar(out_arr):
        return float((out_arr * weights).sum())

    with Tape() as tape:
        out = fn(*params)
        weights = rng.standard_normal(out.shape)
        loss = ad.sum(ad.mul(out, Tensor(weights)))
    backward(tape, loss)
    for prm in params:
        num = numeric_grad(lambda: scalar(fn(*[Tensor(p.data) for p in params]).data), prm.data)
        assert _rel(prm.grad, num).max() < 1e-4, prm.name


OPS = {
    "add": (lambda a, b: ad.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: ad.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: ad.mul(a, b), [(2, 3, 4), (3, 4)]),
    "div": (lambda a, b: ad.div(a, b), [(3, 4), (3, 4)]),
    "matmul": (lambda a, b: ad.matmul(a, b), [(2, 3, 4), (4, 5)]),
    "batched_matmul": (lambda a, b: ad.matmul(a, b), [(2, 3, 4), (2, 4, 2)]),
    "softmax": (lambda a: ad.softmax_lastdim(a), [(3, 5)]),
    "gelu": (lambda a: ad.gelu(a), [(4, 6)]),
    "layer_norm": (lambda x, g, b: ad.layer_norm(x, g, b, 1e-6), [(3, 6), (6,), (6,)]),
    "mean": (lambda a: ad.mean(a, axis=1), [(3, 4, 2)]),
    "sum_keepdims": (lambda a: ad.sum(a, axis=0, keepdims=True), [(3, 4)]),
    "reshape_transpose": (lambda a: ad.transpose(ad.reshape(a, (2, 6)), (1, 0)), [(3, 4)]),
    "broadcast": (lambda a: ad.broadcast_to(a, (4, 3)), [(1, 3)]),
    "slice": (lambda a: ad.slice_axis(a, 1, 1, 3), [(2, 4, 3)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    "gather_rows": (lambda a: ad.gather_rows(a, np.array([[0, 2, 2], [1, 0, 3]])), [(2, 4, 3)]),
    "square": (lambda a: ad.square(a), [(5,)]),
    "exp": (lambda a: ad.exp(a), [(5,)]),
    "cross_entropy": (
        lambda a: ad.cross_entropy(a, np.array([0, 2, 1]), label_smoothing=0.1), [(3, 4)]
    ),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", [0, 1])
def test_op_gradients_match_finite_differences(name, seed):
    fn, shapes = OPS[name]
    _check_op(fn, *shapes, seed=seed, positive=name == "div")


def test_log_gradient():
    _check_op(lambda a: ad.log(a), (5,), positive=True)


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(training):
    rm = np.array([0.2, -0.1, 0.3])
    rv = np.array([1.5, 0.7, 1.1])

    def fn(x, s, b):
        return ad.batch_norm(x, s, b, rm.copy(), rv.copy(), training)

    _check_op(fn, (4, 3, 2), (3,), (3,))
