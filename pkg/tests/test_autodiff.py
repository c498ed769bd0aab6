import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentshape import autodiff as ad
from helpers import check_op_grads, fd_grad, rel_err


def _rand(rng, *shape):
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# per-primitive VJP vs central finite differences
# ---------------------------------------------------------------------------

BINARY_CASES = [
    (ad.add, "same"), (ad.sub, "same"), (ad.mul, "same"), (ad.div, "same"),
    (ad.add, "broadcast"), (ad.mul, "broadcast"), (ad.div, "broadcast"),
]


@pytest.mark.parametrize("op,mode", BINARY_CASES, ids=lambda c: getattr(c, "__name__", c))
def test_binary_op_grads(op, mode):
    rng = np.random.default_rng(0)
    for trial in range(20):
        a = _rand(rng, 3, 4)
        b = _rand(rng, 3, 4) if mode == "same" else _rand(rng, 4)
        if op is ad.div:
            b = b + 3.0 * np.sign(b)  # keep denominators away from zero
        check_op_grads(op, [a, b], rng, tol=1e-6)


UNARY_CASES = {
    "neg": (ad.neg, None),
    "square": (ad.square, None),
    "sqrt": (ad.sqrt, "positive"),
    "exp": (ad.exp, None),
    "absolute": (ad.absolute, "away_from_zero"),
    "sigmoid": (ad.sigmoid, None),
    "silu": (ad.silu, None),
    "relu": (ad.relu, "away_from_zero"),
    "softmax": (ad.softmax, None),
    "norm2": (ad.norm2, None),
}


@pytest.mark.parametrize("name", sorted(UNARY_CASES))
def test_unary_op_grads(name):
    op, constraint = UNARY_CASES[name]
    rng = np.random.default_rng(1)
    for trial in range(20):
        x = _rand(rng, 4, 5)
        if constraint == "positive":
            x = np.abs(x) + 0.5
        elif constraint == "away_from_zero":
            x = x + 0.2 * np.sign(x)
        check_op_grads(op, [x], rng, tol=1e-6)


def test_power_grad():
    rng = np.random.default_rng(2)
    for trial in range(20):
        x = np.abs(_rand(rng, 3, 3)) + 0.5
        check_op_grads(lambda a: ad.power(a, -0.5), [x], rng, tol=1e-6)
        check_op_grads(lambda a: ad.power(a, 1.7), [x], rng, tol=1e-6)


def test_matmul_grads():
    rng = np.random.default_rng(3)
    for trial in range(20):
        check_op_grads(ad.matmul, [_rand(rng, 3, 4), _rand(rng, 4, 5)], rng, tol=1e-6)
    # batched against unbatched operand
    check_op_grads(ad.matmul, [_rand(rng, 2, 3, 4), _rand(rng, 4, 5)], rng, tol=1e-6)
    check_op_grads(ad.matmul, [_rand(rng, 2, 3, 4), _rand(rng, 2, 4, 5)], rng, tol=1e-6)


def test_reduction_and_shape_op_grads():
    rng = np.random.default_rng(4)
    for trial in range(20):
        x = _rand(rng, 3, 4)
        check_op_grads(lambda a: ad.tensor_sum(a), [x], rng, tol=1e-6)
        check_op_grads(lambda a: ad.tensor_sum(a, axis=1), [x], rng, tol=1e-6)
        check_op_grads(lambda a: ad.mean(a, axis=0, keepdims=True), [x], rng, tol=1e-6)
        check_op_grads(lambda a: ad.reshape(a, (4, 3)), [x], rng, tol=1e-6)
        check_op_grads(lambda a: ad.transpose(a, (1, 0)), [x], rng, tol=1e-6)


def test_gather_scatter_concat_grads():
    rng = np.random.default_rng(5)
    idx = np.array([0, 2, 2, 1])
    for trial in range(20):
        x = _rand(rng, 3, 4)
        y = _rand(rng, 3, 4)
        check_op_grads(lambda a: ad.gather(a, idx, axis=0), [x], rng, tol=1e-6)
        check_op_grads(lambda a: ad.scatter_add(a, np.array([1, 0, 1]), 2, axis=0),
                       [x], rng, tol=1e-6)
        check_op_grads(lambda a, b: ad.concat([a, b], axis=1), [x, y], rng, tol=1e-6)


def test_record_dispatch_square():
    tape = ad.Tape()
    x = tape.leaf([3.0])
    y = ad.record("square", x)
    grads = ad.backward(tape, ad.tensor_sum(y))
    assert grads[x.node][0] == pytest.approx(6.0)
    with pytest.raises(ValueError, match="unknown primitive"):
        ad.record("no_such_op", x)


def test_primitive_registry_covers_spec_set():
    names = set(ad.primitive_names())
    required = {"matmul", "add", "mul", "softmax", "sigmoid", "silu",
                "absolute", "square", "sum", "mean", "gather", "scatter_add", "norm2"}
    assert required <= names


# ---------------------------------------------------------------------------
# backward semantics
# ---------------------------------------------------------------------------

def test_unreachable_leaf_gets_zero():
    tape = ad.Tape()
    x = tape.leaf([1.0, 2.0])
    y = tape.leaf([3.0, 4.0])
    out = ad.tensor_sum(ad.square(x))
    grads = ad.backward(tape, out)
    assert np.array_equal(grads[y.node], np.zeros(2))


def test_sum_of_two_leaves_all_ones():
    tape = ad.Tape()
    x = tape.leaf(np.arange(4.0))
    y = tape.leaf(np.arange(4.0) + 1)
    out = ad.tensor_sum(ad.add(x, y))
    grads = ad.backward(tape, out)
    assert np.array_equal(grads[x.node], np.ones(4))
    assert np.array_equal(grads[y.node], np.ones(4))


def test_non_scalar_backward_rejected():
    tape = ad.Tape()
    x = tape.leaf([1.0, 2.0])
    y = ad.square(x)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(tape, y)


def test_matmul_silu_matmul_chain_vs_fd():
    rng = np.random.default_rng(7)

    def chain(x, w1, w2):
        return ad.matmul(ad.silu(ad.matmul(x, w1)), w2)

    for trial in range(5):
        check_op_grads(chain, [_rand(rng, 2, 3), _rand(rng, 3, 5), _rand(rng, 5, 2)],
                       rng, tol=1e-6)


def test_five_layer_mlp_grad_vs_fd():
    rng = np.random.default_rng(8)
    widths = [6, 8, 8, 8, 8, 1]
    weights = [_rand(rng, widths[i], widths[i + 1]) * 0.5 for i in range(5)]
    biases = [_rand(rng, widths[i + 1]) * 0.1 for i in range(5)]
    x0 = _rand(rng, 4, 6)

    def mlp(x, *params):
        ws, bs = params[:5], params[5:]
        h = x
        for i in range(5):
            h = ad.add(ad.matmul(h, ws[i]), bs[i])
            if i < 4:
                h = ad.silu(h)
        return ad.mean(ad.square(h))

    tape = ad.Tape()
    leaves = [tape.leaf(x0)] + [tape.leaf(w) for w in weights] + [tape.leaf(b) for b in biases]
    loss = mlp(*leaves)
    grads = ad.backward(tape, loss)

    packed = [x0] + weights + biases
    for i, leaf in enumerate(leaves):
        def scalar(v, i=i):
            vals = [p.copy() for p in packed]
            vals[i] = v
            return float(mlp(*vals))
        fd = fd_grad(scalar, packed[i])
        assert rel_err(grads[leaf.node], fd) < 1e-5


def test_fanout_accumulates_additively():
    tape = ad.Tape()
    x = tape.leaf([2.0])
    y = ad.add(ad.square(x), ad.mul(x, 3.0))  # x^2 + 3x -> 2x + 3 = 7
    grads = ad.backward(tape, ad.tensor_sum(y))
    assert grads[x.node][0] == pytest.approx(7.0)


def test_softmax_shift_invariance_of_gradient():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((3, 6))
    w = rng.standard_normal((3, 6))

    def grad_of(xv):
        tape = ad.Tape()
        leaf = tape.leaf(xv)
        loss = ad.tensor_sum(ad.mul(ad.softmax(leaf), w))
        return ad.backward(tape, loss)[leaf.node]

    g0 = grad_of(x)
    g1 = grad_of(x + 5.0)
    assert np.abs(g0 - g1).max() < 1e-12


def test_tape_replay_bitwise_deterministic():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((16, 8))
    w = rng.standard_normal((8, 8))

    def run():
        tape = ad.Tape()
        lx, lw = tape.leaf(x), tape.leaf(w)
        loss = ad.tensor_sum(ad.square(ad.softmax(ad.matmul(ad.silu(lx), lw))))
        grads = ad.backward(tape, loss)
        return loss.values.copy(), grads[lw.node].copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1.tobytes() == l2.tobytes()
    assert g1.tobytes() == g2.tobytes()


def test_shape_mismatch_diagnostics():
    tape = ad.Tape()
    a = tape.leaf(np.ones((2, 3)))
    b = tape.leaf(np.ones((4, 5)))
    with pytest.raises(ValueError, match="matmul"):
        ad.matmul(a, b)
    with pytest.raises(ValueError, match="add"):
        ad.add(a, b)


def test_mixed_tapes_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    a = t1.leaf([1.0])
    b = t2.leaf([2.0])
    with pytest.raises(ValueError, match="tapes"):
        ad.add(a, b)


def test_plain_array_fast_path_returns_ndarray():
    out = ad.add(np.ones(3), 2.0)
    assert isinstance(out, np.ndarray)
    assert np.array_equal(out, np.full(3, 3.0))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(row):
    out = ad.softmax(np.array([row]))
    assert abs(out.sum() - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_grad_leaves_param_and_decays_moments():
    state = ad.AdamState(lr=0.01)
    p = np.array([1.0, -2.0])
    snapshot = p.copy()
    for _ in range(5):
        ad.adam_step(state, p, np.zeros(2))
    assert np.array_equal(p, snapshot)
    assert np.array_equal(state.m, np.zeros(2))
    assert state.step == 5
    # after a real gradient, zero-grad steps shrink the moments geometrically
    ad.adam_step(state, p, np.array([1.0, 1.0]))
    m_prev, v_prev = np.abs(state.m).max(), np.abs(state.v).max()
    ad.adam_step(state, p, np.zeros(2))
    assert np.abs(state.m).max() < m_prev
    assert np.abs(state.v).max() < v_prev


def test_adam_first_step_closed_form():
    lr, eps = 0.01, 1e-8
    g = np.array([0.3, -1.2, 4.0])
    p = np.zeros(3)
    state = ad.AdamState(lr=lr, eps=eps)
    ad.adam_step(state, p, g)
    # bias correction makes mhat = g, vhat = g^2 on step one
    expected = -lr * g / (np.abs(g) + eps)
    np.testing.assert_allclose(p, expected, rtol=0, atol=1e-15)
    assert state.step == 1


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(11)
        p = rng.standard_normal(8)
        state = ad.AdamState(lr=1e-3)
        for _ in range(20):
            ad.adam_step(state, p, rng.standard_normal(8))
        return p, state

    p1, s1 = run()
    p2, s2 = run()
    assert p1.tobytes() == p2.tobytes()
    assert s1.m.tobytes() == s2.m.tobytes()
    assert s1.v.tobytes() == s2.v.tobytes()


def test_adam_rejects_non_finite_grad_with_index():
    state = ad.AdamState()
    p = np.zeros(4)
    g = np.array([0.0, 1.0, np.nan, 2.0])
    with pytest.raises(ad.DivergenceError, match="index 2"):
        ad.adam_step(state, p, g)


def test_adam_shape_mismatch_rejected():
    state = ad.AdamState()
    with pytest.raises(ValueError, match="shape"):
        ad.adam_step(state, np.zeros(3), np.zeros(4))
