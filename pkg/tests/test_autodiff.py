import numpy as np
import pytest

from gridcf.autodiff import (
    EXPM_TRACE_TERMS,
    GradCheckError,
    ShapeError,
    Tape,
    expm_trace,
    grad_check,
)

RNG = np.random.default_rng(20240811)


def test_add_forward():
    t = Tape()
    out = t.record("add", [t.leaf(2.0), t.leaf(3.0)])
    assert t.scalar(out) == 5.0


def test_matmul_identity():
    t = Tape()
    a = RNG.normal(size=(2, 3))
    out = t.matmul(t.leaf(np.eye(2)), t.leaf(a))
    np.testing.assert_array_equal(t.value(out), a)


def test_expm_trace_of_zero_matrix():
    t = Tape()
    out = t.matrix_exp_trace(t.leaf(np.zeros((3, 3))))
    assert t.scalar(out) == 3.0


def test_backward_product_rule():
    t = Tape()
    x, y = t.leaf(3.0), t.leaf(4.0)
    grad = t.backward(t.mul(x, y))
    assert float(grad.wrt(x)) == 4.0
    assert float(grad.wrt(y)) == 3.0


def test_backward_sigmoid_at_zero():
    t = Tape()
    x = t.leaf(0.0)
    grad = t.backward(t.sigmoid(x))
    assert float(grad.wrt(x)) == pytest.approx(0.25, abs=1e-15)


def test_expm_trace_gradient_matches_finite_differences():
    a = RNG.normal(size=(3, 3))

    def build(tape, ids):
        return tape.matrix_exp_trace(tape.hadamard(ids[0], ids[0]))

    assert grad_check(build, [a], eps=1e-5) <= 1e-7


def test_grad_check_on_squared_norm():
    def build(tape, ids):
        return tape.sum(tape.square(ids[0]))

    x = np.array([1.0, 2.0, 3.0])
    err = grad_check(build, [x], eps=1e-5)
    assert err <= 1e-6
    # analytic gradient is 2x
    t = Tape()
    xid = t.leaf(x)
    grad = t.backward(t.sum(t.square(xid)))
    np.testing.assert_allclose(grad.wrt(xid), 2 * x, rtol=0, atol=1e-14)


def test_grad_check_constant_loss():
    def build(tape, ids):
        return tape.sum(tape.scale(ids[0], 0.0))

    assert grad_check(build, [np.array([1.0, -2.0])]) == 0.0


def _unary_builders():
    return {
        "tanh": lambda t, a: t.sum(t.tanh(a)),
        "sigmoid": lambda t, a: t.sum(t.sigmoid(a)),
        "relu": lambda t, a: t.sum(t.square(t.relu(a))),
        "abs": lambda t, a: t.sum(t.abs(a)),
        "square": lambda t, a: t.sum(t.square(a)),
        "mean": lambda t, a: t.mean(t.square(a)),
        "sum": lambda t, a: t.sum(t.square(a)),
        "scale": lambda t, a: t.sum(t.scale(a, -2.5)),
        "slice": lambda t, a: t.sum(t.square(t.slice(a, 1, 3))),
    }


@pytest.mark.parametrize("name", sorted(_unary_builders()))
def test_unary_op_gradients(name):
    build_op = _unary_builders()[name]
    worst = 0.0
    for k in range(20):
        rng = np.random.default_rng(1000 + 17 * k)
        x = rng.normal(size=4) + 0.05  # keep away from relu/abs kinks
        worst = max(worst, grad_check(lambda t, ids: build_op(t, ids[0]), [x]))
    assert worst <= 1e-4


@pytest.mark.parametrize(
    "name,builder",
    [
        ("add", lambda t, a, b: t.sum(t.square(t.add(a, b)))),
        ("sub", lambda t, a, b: t.sum(t.square(t.sub(a, b)))),
        ("mul", lambda t, a, b: t.sum(t.mul(a, b))),
        ("hadamard", lambda t, a, b: t.sum(t.hadamard(a, b))),
    ],
)
def test_binary_op_gradients(name, builder):
    worst = 0.0
    for k in range(20):
        rng = np.random.default_rng(2000 + 13 * k)
        x, y = rng.normal(size=5), rng.normal(size=5)
        worst = max(worst, grad_check(lambda t, ids: builder(t, ids[0], ids[1]), [x, y]))
    assert worst <= 1e-4


def test_matmul_gradients_all_rank_combinations():
    shapes = [((2, 3), (3, 4)), ((3,), (3, 4)), ((2, 3), (3,)), ((3,), (3,))]
    for k, (sa, sb) in enumerate(shapes):
        for rep in range(5):
            rng = np.random.default_rng(3000 + 7 * k + rep)
            a, b = rng.normal(size=sa), rng.normal(size=sb)
            err = grad_check(
                lambda t, ids: t.sum(t.square(t.matmul(ids[0], ids[1]))), [a, b]
            )
            assert err <= 1e-4, (sa, sb)


def test_concat_and_slice_gradients():
    for k in range(20):
        rng = np.random.default_rng(4000 + k)
        a, b = rng.normal(size=3), rng.normal(size=2)
        err = grad_check(
            lambda t, ids: t.sum(t.square(t.concat([ids[0], ids[1]]))), [a, b]
        )
        assert err <= 1e-4


def test_expm_trace_gradients_random():
    for k in range(20):
        rng = np.random.default_rng(5000 + k)
        a = rng.normal(size=(4, 4)) * 0.5
        err = grad_check(
            lambda t, ids: t.matrix_exp_trace(t.hadamard(ids[0], ids[0])), [a]
        )
        assert err <= 1e-4


def test_broadcast_row_bias_gradient():
    x, b = RNG.normal(size=(4, 3)), RNG.normal(size=3)
    err = grad_check(lambda t, ids: t.sum(t.square(t.add(ids[0], ids[1]))), [x, b])
    assert err <= 1e-4


def test_backward_rejects_nonscalar_loss():
    t = Tape()
    v = t.leaf(np.array([1.0, 2.0]))
    node = t.square(v)
    with pytest.raises(ShapeError, match="scalar"):
        t.backward(node)


def test_shape_mismatch_names_op_and_dims():
    t = Tape()
    a = t.leaf(np.ones((2, 3)))
    b = t.leaf(np.ones((4, 2)))
    with pytest.raises(ShapeError, match="matmul"):
        t.matmul(a, b)
    with pytest.raises(ShapeError, match="hadamard"):
        t.hadamard(a, b)


def test_unreachable_nodes_have_zero_adjoints():
    t = Tape()
    x = t.leaf(2.0)
    unused = t.square(t.leaf(7.0))
    loss = t.square(x)
    grad = t.backward(loss)
    assert float(grad.wrt(unused)) == 0.0
    assert float(grad.wrt(x)) == 4.0


def test_replay_is_bit_identical():
    t = Tape()
    x = t.leaf(RNG.normal(size=(3, 3)))
    y = t.tanh(t.matmul(x, x))
    t.mean(t.square(y))
    replayed = t.replay()
    for nid in range(len(t)):
        np.testing.assert_array_equal(replayed[nid], t.value(nid))


def test_backward_linearity():
    rng = np.random.default_rng(77)
    x = rng.normal(size=4)
    a, b = 2.5, -1.25

    def grad_of(scale_f, scale_g):
        t = Tape()
        xid = t.leaf(x)
        f = t.sum(t.square(xid))
        g = t.mean(t.tanh(xid))
        loss = t.add(t.scale(f, scale_f), t.scale(g, scale_g))
        return t.backward(loss).wrt(xid)

    combined = grad_of(a, b)
    expected = a * grad_of(1.0, 0.0) + b * grad_of(0.0, 1.0)
    np.testing.assert_allclose(combined, expected, rtol=0, atol=1e-10)


@pytest.mark.filterwarnings("ignore:overflow")
def test_grad_check_reports_nonfinite():
    def build(tape, ids):
        # log-free graph: produce an inf via overflow in square of huge scale
        return tape.sum(tape.square(tape.scale(ids[0], 1e200)))

    with pytest.raises(GradCheckError, match="coordinate"):
        grad_check(build, [np.array([1.0])])


def test_expm_trace_truncation_matches_closed_form():
    # A = [[0, 1], [1, 0]] -> A*A has eigenvalues +1, -1 so tr(exp) = e + 1/e
    a = np.array([[0.0, 1.0], [1.0, 0.0]])
    val = expm_trace(a * a, EXPM_TRACE_TERMS)
    assert val == pytest.approx(np.e + 1.0 / np.e, abs=1e-8)
