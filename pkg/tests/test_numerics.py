import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adapter_fusion.numerics import DimensionError, NonFiniteError, Tape, finite_diff_check, matmul, relu


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def test_matmul_identity_and_zeros(rng):
    m = rng.standard_normal((2, 2))
    assert np.array_equal(matmul(np.eye(2), m), m)
    assert np.array_equal(matmul(np.zeros((2, 3)), rng.standard_normal((3, 2))), np.zeros((2, 2)))


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    assert np.max(np.abs(matmul(a, b) - naive_matmul(a, b))) <= 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matmul_associative(seed):
    r = np.random.default_rng(seed)
    a, b, c = r.standard_normal((3, 4)), r.standard_normal((4, 5)), r.standard_normal((5, 2))
    left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
    assert np.max(np.abs(left - right)) <= 1e-10 * max(1.0, np.max(np.abs(left)))


def test_relu_cases(rng):
    assert np.array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    assert np.array_equal(relu(-np.abs(rng.standard_normal(5)) - 0.1), np.zeros(5))
    x = rng.standard_normal((4, 5))
    assert np.array_equal(relu(x), np.vectorize(lambda v: max(0.0, v))(x))


def test_relu_subgradient_at_zero_is_zero():
    tape = Tape()
    x = tape.leaf(np.array([0.0, 1.0, -1.0]))
    g = tape.backward(tape.sum(tape.relu(x)))[x]
    assert np.array_equal(g, [0.0, 1.0, 0.0])


def test_backward_sum_and_quadratic(rng):
    theta = rng.standard_normal(5)
    tape = Tape()
    node = tape.leaf(theta)
    assert np.array_equal(tape.backward(tape.sum(node))[node], np.ones(5))

    tape = Tape()
    node = tape.leaf(theta)
    loss = tape.scale(tape.sum(tape.mul(node, node)), 0.5)
    np.testing.assert_allclose(tape.backward(loss)[node], theta, rtol=0, atol=1e-15)


def test_backward_rejects_non_scalar():
    tape = Tape()
    node = tape.leaf(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(node)


def test_unreached_and_detached_nodes_get_zero():
    tape = Tape()
    a = tape.leaf(np.ones(2))
    b = tape.leaf(np.full(2, 3.0))  # never used
    c = tape.const(np.full(2, 2.0))
    loss = tape.sum(tape.mul(a, c))
    grads = tape.backward(loss)
    assert np.array_equal(grads[b], np.zeros(2))
    assert np.array_equal(grads[c], np.zeros(2))
    assert np.array_equal(grads[a], np.full(2, 2.0))


def _mlp_loss(shapes, x, y):
    (d_in, hid, n_cls) = shapes

    def f(tape, theta):
        w1 = tape.view(theta, 0, (d_in, hid))
        w2 = tape.view(theta, d_in * hid, (hid, n_cls))
        h = tape.relu(tape.matmul(tape.const(x), w1))
        return tape.cross_entropy(tape.matmul(h, w2), y)

    return f


@pytest.mark.parametrize("seed", range(100))
def test_mlp_cross_entropy_gradient_matches_finite_differences(seed):
    r = np.random.default_rng(seed)
    shapes = (4, 5, 3)
    x = r.standard_normal((6, 4))
    y = r.integers(0, 3, size=6)
    theta = r.standard_normal(4 * 5 + 5 * 3)
    assert finite_diff_check(_mlp_loss(shapes, x, y), theta, h=1e-5) <= 1e-4


def test_finite_diff_check_quadratic_and_constant(rng):
    theta = rng.standard_normal(7)
    assert finite_diff_check(lambda t, n: t.sum(t.mul(n, n)), theta) <= 1e-7
    assert finite_diff_check(lambda t, n: t.sum(t.const(np.ones(3))), theta) == 0.0


def test_finite_diff_check_validates_inputs(rng):
    with pytest.raises(ValueError):
        finite_diff_check(lambda t, n: t.sum(n), rng.standard_normal(2), h=0.0)
    with pytest.raises(NonFiniteError):
        finite_diff_check(lambda t, n: t.sum(t.scale(n, np.inf)), np.ones(2))


def test_backward_is_bitwise_deterministic(rng):
    x = rng.standard_normal((5, 4))
    y = rng.integers(0, 3, size=5)
    theta = rng.standard_normal(4 * 5 + 5 * 3)
    f = _mlp_loss((4, 5, 3), x, y)
    grads = []
    for _ in range(2):
        tape = Tape()
        node = tape.leaf(theta)
        grads.append(tape.backward(f(tape, node))[node])
    assert grads[0].tobytes() == grads[1].tobytes()


def test_replay_recomputes_with_new_leaf_values():
    tape = Tape()
    a = tape.leaf(np.array([1.0, 2.0]))
    out = tape.sum(tape.mul(a, a))
    assert float(tape.value(out)) == 5.0
    tape.replay({a: np.array([3.0, 0.0])})
    assert float(tape.value(out)) == 9.0


def test_nonfinite_values_rejected():
    with pytest.raises(NonFiniteError):
        Tape().leaf(np.array([np.nan]))


@pytest.mark.parametrize("axis", [0, 1])
def test_normalize_unit_norm_and_gradient(rng, axis):
    x = rng.standard_normal((4, 3))
    tape = Tape()
    out = tape.value(tape.normalize(tape.leaf(x), axis=axis))
    assert np.allclose(np.linalg.norm(out, axis=axis), 1.0, rtol=0, atol=1e-12)
    w = rng.standard_normal((4, 3))

    def f(t, n):
        return t.sum(t.mul(t.normalize(t.view(n, 0, (4, 3)), axis=axis), t.const(w)))

    assert finite_diff_check(f, x.ravel()) <= 1e-7


def test_normalize_rejects_bad_axis():
    tape = Tape()
    with pytest.raises(ValueError):
        tape.normalize(tape.leaf(np.ones((2, 2))), axis=2)
