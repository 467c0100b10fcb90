import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bertjam import numkernel as nk
from bertjam.numkernel import DimensionError, Module, NumericalError, Parameter, RngStream, Tensor


def P(rng, *shape, scale=1.0):
    return Parameter(rng.normal(scale=scale, size=shape))


# -- matmul ------------------------------------------------------------------------

def test_matmul_identity():
    out = nk.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_row_by_column():
    assert nk.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as err:
        nk.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "(2, 3)" in str(err.value)
    assert str(err.value).count("(2, 3)") == 2


# -- masked softmax ------------------------------------------------------------------

def test_softmax_uniform_row():
    out = nk.masked_softmax(Tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_softmax_single_attendable():
    out = nk.masked_softmax(Tensor([[5.0, 5.0]]), np.array([[True, False]]))
    assert out.data.tolist() == [[1.0, 0.0]]


def test_softmax_matches_exp_normalize_oracle():
    x = [1.0, 2.0, 3.0]
    e = [math.exp(v) for v in x]
    oracle = [v / sum(e) for v in e]
    out = nk.masked_softmax(Tensor([x])).data[0]
    np.testing.assert_allclose(out, oracle, rtol=0, atol=1e-15)
    assert abs(out.sum() - 1.0) <= 1e-12


def test_softmax_fully_masked_row_raises():
    with pytest.raises(ValueError, match="no attendable"):
        nk.masked_softmax(Tensor([[1.0, 2.0], [0.0, 0.0]]), np.array([[True, True], [False, False]]))


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 7))
def test_softmax_rows_are_distributions(seed, rows, cols):
    r = np.random.default_rng(seed)
    x = r.normal(scale=5, size=(rows, cols))
    mask = r.random((rows, cols)) < 0.6
    mask[np.arange(rows), r.integers(0, cols, rows)] = True
    out = nk.masked_softmax(Tensor(x), mask).data
    assert (out >= 0).all()
    assert np.all(out[~mask] == 0.0)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-9)


@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_softmax_argmax_shift_invariant(seed, c):
    x = np.random.default_rng(seed).normal(size=(3, 5))
    a = nk.masked_softmax(Tensor(x)).data.argmax(-1)
    b = nk.masked_softmax(Tensor(x + c)).data.argmax(-1)
    assert (a == b).all()


# -- layer norm ---------------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = nk.layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert np.all(out.data == 0.0)


def test_layer_norm_biased_variance_oracle():
    # biased variance of [1, -1] is 1, so the row only picks up the eps term
    eps = 1e-5
    out = nk.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps)
    expect = np.array([1.0, -1.0]) / math.sqrt(1.0 + eps)
    np.testing.assert_allclose(out.data[0], expect, rtol=0, atol=1e-15)


def test_layer_norm_zero_gain_gives_bias():
    bias = np.array([0.5, -2.0, 7.0])
    x = np.random.default_rng(0).normal(size=(4, 3))
    out = nk.layer_norm(Tensor(x), Tensor(np.zeros(3)), Tensor(bias))
    np.testing.assert_array_equal(out.data, np.broadcast_to(bias, (4, 3)))


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        nk.layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


@given(st.integers(0, 10_000))
def test_layer_norm_standardises_rows(seed):
    x = np.random.default_rng(seed).normal(loc=3, scale=4, size=(5, 8))
    out = nk.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=1e-12).data
    np.testing.assert_allclose(out.mean(-1), 0, atol=1e-9)
    np.testing.assert_allclose(out.var(-1), 1, atol=1e-6)


# -- backward ------------------------------------------------------------------------

def test_backward_square_sum():
    x = Parameter([1.0, -2.0, 3.5])
    nk.sum_(x * x).backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_matmul_finite_difference(rng):
    x, w = P(rng, 3, 4), P(rng, 4, 2)
    assert nk.check_gradients(lambda: nk.sum_(nk.matmul(x, w)), [x, w]) <= 1e-6


def test_backward_twice_doubles():
    x = Parameter([0.3, -1.2])
    loss = nk.sum_(nk.exp(x))
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(x.grad, 2 * first)


def test_backward_requires_scalar():
    x = Parameter([1.0, 2.0])
    with pytest.raises(DimensionError):
        (x * 2.0).backward()


def test_zero_grad_then_backward_reproduces(rng):
    w = P(rng, 3, 3)
    x = Tensor(rng.normal(size=(2, 3)))

    def run():
        nk.sum_(nk.tanh(nk.matmul(x, w))).backward()

    run()
    first = w.grad.copy()
    w.grad[...] = 0.0
    assert np.all(w.grad == 0.0)
    run()
    np.testing.assert_array_equal(w.grad, first)


def test_no_grad_records_nothing(rng):
    w = P(rng, 2, 2)
    with nk.no_grad():
        out = nk.matmul(w, w)
    assert not out.requires_grad and out._parents == ()


# -- check_gradients ------------------------------------------------------------------

def test_check_gradients_quadratic():
    x = Parameter([0.7, -0.4, 2.0])
    assert nk.check_gradients(lambda: nk.sum_(x * x * 3.0 + x), [x]) <= 1e-8


@pytest.mark.parametrize("eps", [0.0, 1e-9, 1e-2])
def test_check_gradients_eps_precondition(eps):
    x = Parameter([1.0])
    with pytest.raises(ValueError):
        nk.check_gradients(lambda: nk.sum_(x * x), [x], eps=eps)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_check_gradients_non_finite():
    x = Parameter([-1.0])
    with pytest.raises(NumericalError):
        nk.check_gradients(lambda: nk.sum_(nk.log(x)), [x])


# -- per-op finite differences (10 seeds, 1e-6) -----------------------------------------

def _ops(r):
    """(name, params, loss closure) for every differentiable op."""
    a, b = P(r, 3, 4), P(r, 3, 4)
    pos = Parameter(r.uniform(0.5, 2.0, size=(3, 4)))
    rel = Parameter(r.normal(size=(3, 4)) + np.sign(r.normal(size=(3, 4))) * 0.2)
    w, bias = P(r, 4, 5), P(r, 5)
    v = P(r, 1, 4)
    proj = Tensor(r.normal(size=(3, 4)))
    mask = r.random((3, 4)) < 0.7
    mask[:, 0] = True
    gain, beta = P(r, 4), P(r, 4)
    table = P(r, 6, 3)
    ids = r.integers(0, 6, size=(2, 5))
    coeff = P(r, 3)
    items = [P(r, 2, 3) for _ in range(3)]
    logits = P(r, 2, 3, 5)
    targets = r.integers(0, 5, size=(2, 3))
    tmask = r.random((2, 3)) < 0.8
    tmask[0, 0] = True

    def dot(t):
        # fixed random projection so the loss depends on every output entry
        return nk.sum_(t * Tensor(np.random.default_rng(99).normal(size=t.shape)))

    return [
        ("add_broadcast", [a, v], lambda: dot(nk.add(a, v))),
        ("sub", [a, b], lambda: dot(nk.sub(a, b))),
        ("mul", [a, b], lambda: dot(nk.mul(a, b))),
        ("div", [a, pos], lambda: dot(a / pos)),
        ("pow", [pos], lambda: dot(nk.pow_scalar(pos, 1.7))),
        ("exp", [a], lambda: dot(nk.exp(a))),
        ("log", [pos], lambda: dot(nk.log(pos))),
        ("relu", [rel], lambda: dot(nk.relu(rel))),
        ("sigmoid", [a], lambda: dot(nk.sigmoid(a))),
        ("tanh", [a], lambda: dot(nk.tanh(a))),
        ("sum_axis", [a], lambda: dot(nk.sum_(a, axis=1, keepdims=True))),
        ("mean", [a], lambda: dot(nk.mean(a, axis=0))),
        ("reshape", [a], lambda: dot(nk.reshape(a, (4, 3)))),
        ("transpose", [a], lambda: dot(nk.transpose(a, (1, 0)))),
        ("getitem", [a], lambda: dot(nk.getitem(a, (slice(1, 3), [0, 2, 2])))),
        ("concat", [a, b], lambda: dot(nk.concat([a, b], axis=1))),
        ("embedding", [table], lambda: dot(nk.embedding(table, ids))),
        ("weighted_sum", items + [coeff], lambda: dot(nk.weighted_sum(items, coeff))),
        ("matmul", [a, w], lambda: dot(nk.matmul(a, w))),
        ("linear", [a, w, bias], lambda: dot(nk.linear(a, w, bias))),
        ("masked_softmax", [a], lambda: dot(nk.masked_softmax(a, mask))),
        ("log_softmax", [a], lambda: dot(nk.log_softmax(a))),
        ("layer_norm", [a, gain, beta], lambda: dot(nk.layer_norm(a * proj, gain, beta))),
        ("cross_entropy", [logits], lambda: nk.cross_entropy(logits, targets, tmask)),
        ("cross_entropy_smoothed", [logits], lambda: nk.cross_entropy(logits, targets, tmask, 0.1)),
    ]


OP_NAMES = [name for name, _, _ in _ops(np.random.default_rng(0))]


@pytest.mark.parametrize("name", OP_NAMES)
def test_every_op_matches_finite_differences(name):
    # step 1e-5 balances O(eps^2) truncation against 1e-16/eps rounding; at
    # 1e-6 rounding alone reaches 1e-6 relative on gradient entries near 1e-5
    worst = 0.0
    for seed in range(10):
        ops = {n: (ps, f) for n, ps, f in _ops(np.random.default_rng(seed))}
        params, f = ops[name]
        worst = max(worst, nk.check_gradients(f, params, eps=1e-5))
    assert worst <= 1e-6, f"{name}: {worst:.2e}"


# -- cross entropy -----------------------------------------------------------------------

def test_cross_entropy_uniform_is_log_v():
    out = nk.cross_entropy(Tensor(np.zeros((2, 3, 4))), np.zeros((2, 3), int))
    assert abs(out.item() - math.log(4)) < 1e-15


def test_cross_entropy_lse_oracle(rng):
    logits = rng.normal(size=(2, 3, 5))
    tgt = rng.integers(0, 5, size=(2, 3))
    mask = np.array([[1, 1, 0], [1, 0, 0]], bool)
    total = 0.0
    for i in range(2):
        for j in range(3):
            if mask[i, j]:
                row = logits[i, j]
                total += math.log(sum(math.exp(x) for x in row)) - row[tgt[i, j]]
    oracle = total / mask.sum()
    assert abs(nk.cross_entropy(Tensor(logits), tgt, mask).item() - oracle) <= 1e-12


def test_cross_entropy_all_pad_raises():
    with pytest.raises(ValueError):
        nk.cross_entropy(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), int), np.zeros((1, 2), bool))


# -- dropout and rng ------------------------------------------------------------------------

def test_dropout_is_inverted_and_off_in_eval():
    x = Tensor(np.ones((200, 50)))
    g = np.random.default_rng(0)
    out = nk.dropout(x, 0.3, g, training=True).data
    assert set(np.unique(out)) <= {0.0, 1 / 0.7}
    assert abs(out.mean() - 1.0) < 0.02
    assert nk.dropout(x, 0.3, g, training=False) is x


@given(st.integers(0, 2**63 - 1), st.integers(0, 50))
def test_rng_stream_reproducible(seed, stream):
    a = RngStream(seed, stream).generator().random(5)
    b = RngStream(seed, stream).generator().random(5)
    assert np.array_equal(a, b)


def test_rng_streams_are_distinct():
    assert not np.array_equal(RngStream(1, 0).generator().random(4), RngStream(1, 1).generator().random(4))


# -- parameters and modules -----------------------------------------------------------------

class _Toy(Module):
    def __init__(self, r):
        self.w = P(r, 2, 3)
        self.inner = [_Leaf(r), _Leaf(r)]


class _Leaf(Module):
    def __init__(self, r):
        self.b = P(r, 3)


def test_named_parameters_are_hierarchical_and_unique(rng):
    names = [n for n, _ in _Toy(rng).named_parameters()]
    assert names == ["w", "inner.0.b", "inner.1.b"]


def test_trainable_toggle_keeps_values_and_blocks_grads(rng):
    p = P(rng, 3)
    before = p.data.copy()
    p.trainable = False
    nk.sum_(p * p).backward()
    assert np.array_equal(p.data, before)
    assert np.all(p.grad == 0.0)
    p.trainable = True
    assert np.array_equal(p.data, before)


def test_load_state_dict_errors(rng):
    m = _Toy(rng)
    state = m.state_dict()
    bad = dict(state)
    bad["inner.9.b"] = bad.pop("inner.1.b")
    with pytest.raises(KeyError, match="inner.1.b"):
        m.load_state_dict(bad)
    bad = dict(state)
    bad["w"] = np.zeros((3, 2))
    with pytest.raises(DimensionError, match="'w'"):
        m.load_state_dict(bad)
