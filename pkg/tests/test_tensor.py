import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ligprot import tensor as T
from oracles import central_difference, relative_error


def fd_check(build, inputs, tol=1e-6, n_probe=None, rng=None):
    """Compare analytic and central-difference gradients of ``sum(w * build(*inputs))``.

    A fixed random weighting ``w`` turns any output into a scalar with a
    non-trivial upstream gradient.
    """
    rng = rng or np.random.default_rng(0)
    out = build(*inputs)
    weight = rng.normal(size=out.shape)

    def loss():
        with T.no_grad():
            return float((build(*inputs).data * weight).sum())

    for x in inputs:
        x.grad = None
    T.sum_all(T.multiply(build(*inputs), T.Tensor(weight))).backward()
    worst = 0.0
    for x in inputs:
        if not x.requires_grad:
            continue
        idx = list(np.ndindex(x.shape))
        if n_probe is not None and len(idx) > n_probe:
            idx = [idx[k] for k in rng.choice(len(idx), n_probe, replace=False)]
        for i in idx:
            numeric = central_difference(loss, x.data, i)
            worst = max(worst, relative_error(x.grad[i], numeric))
    assert worst < tol, worst
    return worst


def leaf(shape, rng, scale=1.0):
    return T.Tensor(rng.normal(size=shape) * scale, requires_grad=True)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    eye = T.Tensor(np.eye(2))
    np.testing.assert_array_equal(T.matmul(eye, eye).data, np.eye(2))


def test_matmul_hand_example():
    out = T.matmul(T.Tensor([[1, 2], [3, 4]]), T.Tensor([[0], [1]]))
    np.testing.assert_array_equal(out.data, [[2], [4]])


def test_matmul_gradient_3x4_by_4x2():
    rng = np.random.default_rng(1)
    fd_check(T.matmul, [leaf((3, 4), rng), leaf((4, 2), rng)], tol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))


def test_matmul_batched_shared_right_operand():
    rng = np.random.default_rng(2)
    fd_check(T.matmul, [leaf((2, 3, 4), rng), leaf((4, 5), rng)])


# ---------------------------------------------------------------------------
# softmax


def test_softmax_symmetric():
    np.testing.assert_allclose(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_large_logits_do_not_overflow():
    out = T.softmax(T.Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_of_logs_normalises():
    out = T.softmax(T.Tensor(np.log([1.0, 2.0, 3.0]))).data
    np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    out = T.softmax(T.Tensor(x), axis=-1).data
    assert np.all(out >= 0) and np.all(out <= 1)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 24))
    a = T.softmax(T.Tensor(x)).data
    b = T.softmax(T.Tensor(x + 123.25)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


# ---------------------------------------------------------------------------
# layer norm


def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(T.Tensor([[5.0, 5.0, 5.0]]), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 3)))


def test_layer_norm_two_values():
    out = T.layer_norm(T.Tensor([[1.0, 3.0]]), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-10)


def test_layer_norm_rows_standardised():
    rng = np.random.default_rng(4)
    out = T.layer_norm(T.Tensor(rng.normal(3, 2, size=(6, 16))), T.Tensor(np.ones(16)),
                       T.Tensor(np.zeros(16)), eps=1e-12).data
    np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=-1), 1, atol=1e-6)


def test_layer_norm_gradient():
    rng = np.random.default_rng(5)
    fd_check(T.layer_norm, [leaf((3, 6), rng), leaf((6,), rng), leaf((6,), rng)], tol=1e-6)


# ---------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_uniform():
    loss = T.cross_entropy(T.Tensor(np.zeros((1, 20))), [7])
    assert loss.item() == pytest.approx(math.log(20), abs=1e-12)
    assert loss.item() == pytest.approx(2.9957, abs=1e-4)


def test_cross_entropy_confident():
    logits = np.zeros((1, 20))
    logits[0, 3] = 30.0
    # exact value is log(1 + 19 e^-30), about 1.8e-12
    assert T.cross_entropy(T.Tensor(logits), [3]).item() == pytest.approx(19 * math.exp(-30), rel=1e-6)


def test_cross_entropy_all_ignored_warns_and_is_zero():
    with pytest.warns(T.EmptyTargetWarning):
        loss = T.cross_entropy(T.Tensor(np.ones((3, 5))), [0, 0, 0], ignore_index=0)
    assert loss.item() == 0.0


def test_cross_entropy_out_of_range_target():
    with pytest.raises(IndexError):
        T.cross_entropy(T.Tensor(np.zeros((2, 5))), [1, 5])


def test_cross_entropy_sum_vs_mean_and_gradient():
    rng = np.random.default_rng(6)
    x = leaf((4, 7), rng)
    targets = [1, 0, 6, 0]
    s = T.cross_entropy(x, targets, ignore_index=0).item()
    m = T.cross_entropy(x, targets, ignore_index=0, reduction="mean").item()
    assert m == pytest.approx(s / 2)
    fd_check(lambda z: T.cross_entropy(z, targets, ignore_index=0), [x], tol=1e-6)


# ---------------------------------------------------------------------------
# backward


def test_backward_sum_gives_ones():
    x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    T.sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_gives_twice_x():
    x = T.Tensor([1.0, -2.0, 3.5], requires_grad=True)
    T.sum_all(T.multiply(x, x)).backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_accumulates_until_zeroed():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    T.sum_all(x).backward()
    T.sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    T.sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_backward_non_scalar_is_error():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.scale(x, 2.0).backward()


def test_backward_reused_subexpression():
    # y is used twice; its gradient must be the sum of both paths
    x = T.Tensor([0.5, -1.0], requires_grad=True)
    y = T.multiply(x, x)
    T.sum_all(T.add(y, T.scale(y, 3.0))).backward()
    np.testing.assert_allclose(x.grad, 8 * x.data)


def test_graph_is_topologically_ordered_and_unique():
    rng = np.random.default_rng(7)
    a, b = leaf((3, 3), rng), leaf((3, 3), rng)
    h = T.matmul(a, b)
    out = T.sum_all(T.add(T.gelu(h), T.softmax(h)))
    nodes = T.ComputeGraph.from_output(out).nodes
    assert len({id(n) for n in nodes}) == len(nodes)
    position = {id(n): k for k, n in enumerate(nodes)}
    for n in nodes:
        for p in n._parents:
            if p.requires_grad:
                assert position[id(p)] < position[id(n)]


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(8)
        a, b = leaf((4, 5), rng), leaf((5, 3), rng)
        T.sum_all(T.gelu(T.matmul(a, b))).backward()
        return a.grad.copy(), b.grad.copy()

    (a1, b1), (a2, b2) = run(), run()
    assert a1.tobytes() == a2.tobytes() and b1.tobytes() == b2.tobytes()


def test_no_grad_records_nothing():
    x = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.scale(x, 2.0)
    assert not y.requires_grad and y.is_leaf


# ---------------------------------------------------------------------------
# remaining ops


def test_add_allows_only_trailing_bias():
    rng = np.random.default_rng(9)
    fd_check(T.add, [leaf((2, 3, 4), rng), leaf((4,), rng)])
    with pytest.raises(T.ShapeError):
        T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 1))))
    with pytest.raises(T.ShapeError):
        T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((3, 3))))


def test_embedding_unused_rows_get_exact_zero():
    table = T.Tensor(np.random.default_rng(10).normal(size=(6, 3)), requires_grad=True)
    out = T.embedding_lookup(table, [1, 4, 1])
    T.sum_all(T.multiply(out, out)).backward()
    assert np.all(table.grad[[0, 2, 3, 5]] == 0.0)
    np.testing.assert_allclose(table.grad[1], 4 * table.data[1])


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        T.embedding_lookup(T.Tensor(np.zeros((3, 2))), [3])


def test_masked_fill_blocks_gradient():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    mask = np.array([[False, True], [False, False]])
    out = T.masked_fill(x, mask, -np.inf)
    assert out.data[0, 1] == -np.inf
    T.sum_all(T.softmax(out)).backward()
    assert x.grad[0, 1] == 0.0


def test_dropout_is_identity_without_rng():
    x = T.Tensor(np.ones(5))
    assert T.dropout(x, 0.5, None) is x


def test_dropout_scales_kept_units():
    out = T.dropout(T.Tensor(np.ones(1000)), 0.25, np.random.default_rng(0)).data
    kept = out[out != 0]
    np.testing.assert_allclose(kept, 1 / 0.75)


def test_reshape_returns_new_tensor():
    x = T.Tensor(np.arange(6.0))
    y = T.reshape(x, (2, 3))
    assert x.shape == (6,) and y.shape == (2, 3)
    with pytest.raises(T.ShapeError):
        T.reshape(x, (4, 2))


OPS = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: T.sub(a, b), [(3, 4), (3, 4)]),
    "multiply": (lambda a, b: T.multiply(a, b), [(2, 5), (2, 5)]),
    "scale": (lambda a: T.scale(a, -1.7), [(4,)]),
    "matmul": (lambda a, b: T.matmul(a, b), [(3, 2), (2, 4)]),
    "matmul_batched": (lambda a, b: T.matmul(a, b), [(2, 3, 2), (2, 2, 3)]),
    "transpose": (lambda a: T.transpose(a, (1, 0, 2)), [(2, 3, 2)]),
    "reshape": (lambda a: T.reshape(a, (3, 4)), [(2, 6)]),
    "softmax": (lambda a: T.softmax(a, axis=-1), [(3, 5)]),
    "softmax_axis0": (lambda a: T.softmax(a, axis=0), [(4, 2)]),
    "layer_norm": (lambda a, g, b: T.layer_norm(a, g, b), [(3, 5), (5,), (5,)]),
    "gelu": (T.gelu, [(3, 4)]),
    "concat": (lambda a, b: T.concat([a, b], axis=0), [(2, 3), (4, 3)]),
    "slice": (lambda a: T.slice_axis(a, 1, 3, axis=1), [(2, 5)]),
    "embedding": (lambda e: T.embedding_lookup(e, [0, 2, 2, 3]), [(5, 3)]),
    "masked_fill": (lambda a: T.masked_fill(a, np.tri(3, 3, -1).T.astype(bool), -4.0), [(3, 3)]),
    "cross_entropy": (lambda a: T.cross_entropy(a, [2, 0, 1]), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_over_100_seeds(name):
    build, shapes = OPS[name]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        inputs = [leaf(s, rng) for s in shapes]
        worst = max(worst, fd_check(build, inputs, tol=1e-4, rng=rng))
    assert worst < 1e-4


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(11)
    x = T.Tensor(rng.choice([-1, 1], size=(3, 3)) * rng.uniform(0.1, 1, size=(3, 3)), requires_grad=True)
    fd_check(T.relu, [x])


def test_gelu_matches_tanh_form():
    x = np.linspace(-4, 4, 17)
    expected = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(T.gelu(T.Tensor(x)).data, expected, rtol=1e-14)


def test_warnings_module_untouched():
    # cross_entropy with normal targets must not warn
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        T.cross_entropy(T.Tensor(np.zeros((2, 3))), [0, 1])
