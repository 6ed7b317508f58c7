import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepformer import numerics as nx
from deepformer.numerics import DimensionError, DivergenceError, Parameter, StaleTapeError, Tape


def param(values, name="w"):
    return Parameter(np.asarray(values, dtype=np.float64), name=name)


# -- matmul -------------------------------------------------------------------

def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_matmul_identity_and_dot():
    eye = nx.Tensor([[1.0, 0.0], [0.0, 1.0]])
    m = nx.Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(nx.matmul(eye, m).data, m.data)
    assert nx.matmul(nx.Tensor([[1.0, 2.0]]), nx.Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    assert np.max(np.abs(nx.matmul(nx.Tensor(a), nx.Tensor(b)).data - naive_matmul(a, b))) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31 - 1))
def test_matmul_property_triple_loop(p, q, r, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(p, q)), rng.normal(size=(q, r))
    assert np.max(np.abs(nx.matmul(nx.Tensor(a), nx.Tensor(b)).data - naive_matmul(a, b))) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as info:
        nx.matmul(nx.Tensor(np.ones((2, 3))), nx.Tensor(np.ones((4, 5))))
    assert "(2, 3)" in str(info.value) and "(4, 5)" in str(info.value)


def test_matmul_batched_broadcast():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(5, 6))
    assert np.allclose(nx.matmul(nx.Tensor(a), nx.Tensor(b)).data, a @ b, atol=1e-12)


# -- softmax ------------------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(nx.softmax(nx.Tensor([0.0, 0.0, 0.0, 0.0])).data, 0.25)
    big = nx.softmax(nx.Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big))
    assert abs(big[0] - 1.0) < 1e-12 and abs(big[1]) < 1e-12


def test_softmax_extended_precision_oracle():
    x = np.array([1.0, 2.0, 3.0], dtype=np.longdouble)
    oracle = np.exp(x) / np.exp(x).sum()
    got = nx.softmax(nx.Tensor([1.0, 2.0, 3.0])).data
    assert np.max(np.abs(got - oracle.astype(np.float64))) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=1, max_size=20))
def test_softmax_sums_to_one(values):
    out = nx.softmax(nx.Tensor(values)).data
    assert abs(out.sum() - 1.0) < 1e-6
    assert np.all(out >= 0)


# -- layer norm ---------------------------------------------------------------

def test_layer_norm_hand_example():
    out = nx.layer_norm(nx.Tensor([1.0, 2.0, 3.0]), nx.Tensor(np.ones(3)), nx.Tensor(np.zeros(3)), eps=0.0)
    assert np.allclose(out.data, [-1.224745, 0.0, 1.224745], atol=1e-6)


def test_layer_norm_constant_vector():
    out = nx.layer_norm(nx.Tensor([5.0, 5.0, 5.0]), nx.Tensor(np.ones(3)), nx.Tensor(np.zeros(3)), eps=1e-5)
    assert np.array_equal(out.data, np.zeros(3))


@pytest.mark.parametrize("c", [1e-3, 1.0, 7.3, 1e3])
def test_layer_norm_scale_invariance(c):
    # eps must stay negligible next to var(c * x), so x is drawn wide enough
    # that even c = 1e-3 leaves activations of scale 10
    rng = np.random.default_rng(3)
    x = rng.normal(scale=1e4, size=(4, 16))
    g, b = nx.Tensor(rng.normal(size=16)), nx.Tensor(rng.normal(size=16))
    base = nx.layer_norm(nx.Tensor(x), g, b, 1e-5).data
    scaled = nx.layer_norm(nx.Tensor(c * x), g, b, 1e-5).data
    assert np.max(np.abs(base - scaled)) < 1e-6


def test_layer_norm_moments_before_affine():
    rng = np.random.default_rng(4)
    out = nx.layer_norm(nx.Tensor(rng.normal(3, 5, size=(6, 32))), nx.Tensor(np.ones(32)),
                        nx.Tensor(np.zeros(32)), 1e-12).data
    assert np.allclose(out.mean(axis=-1), 0, atol=1e-12)
    assert np.allclose(out.var(axis=-1), 1, atol=1e-9)


# -- cross entropy -------------------------------------------------------------

def test_cross_entropy_peaked_and_uniform():
    logits = np.full((1, 2, 5), -1e3)
    logits[0, 0, 2] = logits[0, 1, 4] = 1e3
    loss = nx.cross_entropy_ls(nx.Tensor(logits), np.array([[2, 4]]), 0.0, pad_id=0)
    assert float(loss.data) < 1e-12
    uni = nx.cross_entropy_ls(nx.Tensor(np.zeros((2, 3, 7))), np.full((2, 3), 5), 0.0, pad_id=0)
    assert abs(float(uni.data) - math.log(7)) < 1e-12


def test_cross_entropy_per_token_oracle():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(2, 3, 5))
    targets = np.array([[1, 4, 0], [2, 3, 3]])
    eps = 0.1
    total, n = 0.0, 0
    for i in range(2):
        for j in range(3):
            if targets[i, j] == 0:
                continue
            z = logits[i, j]
            logp = z - z.max() - math.log(sum(math.exp(v - z.max()) for v in z))
            total += (1 - eps) * -logp[targets[i, j]] + eps * -logp.mean()
            n += 1
    got = nx.cross_entropy_ls(nx.Tensor(logits), targets, eps, pad_id=0)
    assert abs(float(got.data) - total / n) < 1e-10


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        nx.cross_entropy_ls(nx.Tensor(np.zeros((1, 2, 5))), np.array([[1, 5]]), 0.0)


def test_cross_entropy_sum_reduction():
    rng = np.random.default_rng(6)
    logits = nx.Tensor(rng.normal(size=(2, 4, 6)))
    t = np.array([[1, 2, 3, 0], [4, 5, 0, 0]])
    mean = float(nx.cross_entropy_ls(logits, t, 0.1, 0, "mean").data)
    total = float(nx.cross_entropy_ls(logits, t, 0.1, 0, "sum").data)
    assert abs(total - 5 * mean) < 1e-12


# -- backward -----------------------------------------------------------------

def test_backward_sum():
    w = param([1.0, 2.0, 3.0])
    with Tape() as tape:
        loss = nx.tsum(w)
    tape.backward(loss)
    assert w.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_sum_of_squares():
    w = param([1.0, 2.0, 3.0])
    with Tape():
        loss = nx.tsum(w * w)
    nx.backward(loss)
    assert w.grad.tolist() == [2.0, 4.0, 6.0]


def test_backward_twice_is_stale():
    w = param([1.0, 2.0])
    with Tape() as tape:
        loss = nx.tsum(w * w)
    tape.backward(loss)
    with pytest.raises(StaleTapeError):
        tape.backward(loss)
    with pytest.raises(StaleTapeError):
        with tape:
            pass


def test_backward_needs_scalar():
    w = param([1.0, 2.0])
    with Tape() as tape:
        y = w * 2.0
    with pytest.raises(DimensionError):
        tape.backward(y)


def test_unreachable_parameter_grad_stays_zero():
    w, dead = param([1.0, 2.0]), param([5.0], "dead")
    with Tape() as tape:
        loss = nx.tsum(w * w)
    tape.backward(loss)
    assert dead.grad.tolist() == [0.0]


def test_gradients_accumulate_across_tapes():
    w = param([1.0, -1.0])
    for _ in range(2):
        with Tape() as tape:
            loss = nx.tsum(w * 3.0)
        tape.backward(loss)
    assert w.grad.tolist() == [6.0, 6.0]


def test_no_grad_records_nothing():
    w = param([1.0])
    with Tape() as tape:
        with nx.no_grad():
            y = w * 2.0
    assert tape.nodes == [] and not y.requires_grad


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        nx.embedding(param(np.zeros((4, 2))), np.array([[1, 4]]))


def test_dropout_identity_when_not_training():
    x = nx.Tensor(np.ones((3, 4)))
    assert nx.dropout(x, 0.5, np.random.default_rng(0), training=False) is x


def test_dropout_inverted_scaling():
    x = nx.Tensor(np.ones((200, 200)))
    out = nx.dropout(x, 0.25, np.random.default_rng(0), training=True).data
    kept = out[out != 0]
    assert np.allclose(kept, 1 / 0.75)
    assert abs((out == 0).mean() - 0.25) < 0.01


# -- grad check -----------------------------------------------------------------

def test_grad_check_sum_of_squares():
    w = param(np.random.default_rng(0).normal(size=5))
    assert nx.grad_check(lambda: nx.tsum(w * w), [w]) < 1e-9


def test_grad_check_layer_norm_softmax_chain():
    rng = np.random.default_rng(1)
    x = param(rng.normal(size=(3, 6)), "x")
    g, b = param(rng.normal(size=6), "g"), param(rng.normal(size=6), "b")
    t = nx.Tensor(rng.normal(size=(3, 6)))
    f = lambda: nx.tsum(nx.softmax(nx.layer_norm(x, g, b, 1e-5)) * t)  # noqa: E731
    assert nx.grad_check(f, [x, g, b]) < 1e-6


def test_grad_check_dead_parameter():
    w, dead = param([1.0, 2.0]), param([3.0], "dead")
    assert nx.grad_check(lambda: nx.tsum(w * w), [w, dead]) < 1e-9


def test_grad_check_rejects_bad_step_and_dtype():
    w = param([1.0])
    with pytest.raises(ValueError):
        nx.grad_check(lambda: nx.tsum(w), [w], h=1e-2)
    w32 = Parameter(np.ones(2, dtype=np.float32))
    with pytest.raises(TypeError):
        nx.grad_check(lambda: nx.tsum(w32), [w32])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_non_finite():
    w = param([0.0])
    with pytest.raises(DivergenceError):
        nx.grad_check(lambda: nx.div(nx.tsum(w), nx.tsum(w)), [w])


def test_grad_check_restores_parameters():
    w = param([1.5, -2.0])
    before = w.data.copy()
    nx.grad_check(lambda: nx.tsum(w * w), [w])
    assert w.data.dtype == np.float64 and np.array_equal(w.data, before)


OPS = {
    "add": lambda a, b: nx.add(a, b),
    "sub": lambda a, b: nx.sub(a, b),
    "mul": lambda a, b: nx.mul(a, b),
    "div": lambda a, b: nx.div(a, nx.add(nx.mul(b, b), 1.0)),
    "matmul": lambda a, b: nx.matmul(a, nx.transpose(b)),
    "relu": lambda a, b: nx.mul(nx.relu(a), b),
    "softmax": lambda a, b: nx.mul(nx.softmax(a), b),
    "layer_norm": lambda a, b: nx.layer_norm(a, nx.Tensor(np.linspace(0.5, 1.5, 4)), nx.Tensor(np.zeros(4)), 1e-5) * b,
    "transpose_reshape": lambda a, b: nx.mul(nx.reshape(nx.transpose(a), (4, 3)), nx.transpose(b)),
    "masked_fill": lambda a, b: nx.mul(nx.masked_fill(a, np.array([[1, 0, 1, 1]] * 3, bool), 0.0), b),
    "mean": lambda a, b: nx.mul(nx.mean(a), b),
    "linear": lambda a, b: nx.linear(a, nx.transpose(b), nx.Tensor(np.ones(3))),
}


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("op", sorted(OPS))
def test_every_op_matches_finite_differences(op, seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng.normal(size=(3, 4)), "a"), param(rng.normal(size=(3, 4)), "b")
    a.data[np.abs(a.data) < 1e-3] = 0.5  # keep relu away from its kink
    w = nx.Tensor(rng.normal(size=OPS[op](a, b).shape))
    f = lambda: nx.tsum(nx.mul(OPS[op](a, b), w))  # noqa: E731
    assert nx.grad_check(f, [a, b]) < 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_cross_entropy_and_embedding_grads(seed):
    rng = np.random.default_rng(seed)
    emb = param(rng.normal(size=(7, 5)), "emb")
    ids = rng.integers(0, 7, size=(2, 3))
    targets = rng.integers(1, 5, size=(2, 3))
    targets[1, 2] = 0
    f = lambda: nx.cross_entropy_ls(nx.embedding(emb, ids), targets, 0.1, 0)  # noqa: E731
    assert nx.grad_check(f, [emb]) < 1e-5


def test_global_norm():
    assert nx.global_norm([np.array([3.0]), np.array([[4.0]])]) == 5.0
