import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lexa import ndgrad as nd
from lexa.ndgrad import (
    Adam,
    DomainError,
    GRUCell,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    backward,
    grad_check,
    gru_cell,
)
from lexa.ndgrad.checkpoint import MAGIC, CheckpointError, read_checkpoint, save_parameters

finite = st.floats(-3, 3, allow_nan=False, width=32)


def leaf(data):
    return Tensor(np.asarray(data, np.float32), requires_grad=True)


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def test_matmul_identity():
    out = nd.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1, 0], [0, 1]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_tanh_zero():
    assert nd.tanh(Tensor(0.0)).data == 0.0


def test_mean_axis0():
    np.testing.assert_array_equal(nd.mean(Tensor([[1, 2], [3, 4]]), axis=0).data, [2, 3])


def test_data_is_float32():
    assert Tensor([1, 2, 3]).data.dtype == np.float32


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\[2, 3\].*\[4\]"):
        nd.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))
    with pytest.raises(ShapeError, match=r"\[2, 3\].*\[2, 3\]"):
        nd.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_log_sqrt_reject_negative():
    with pytest.raises(DomainError):
        nd.log(Tensor([1.0, -1.0]))
    with pytest.raises(DomainError):
        nd.sqrt(Tensor([-0.5]))


def test_leading_batch_broadcast():
    out = nd.add(Tensor(np.ones((4, 3))), Tensor([1, 2, 3]))
    np.testing.assert_array_equal(out.data[2], [2, 3, 4])


ELEMENTWISE = {
    "tanh": (nd.tanh, np.tanh),
    "sigmoid": (nd.sigmoid, lambda x: 1 / (1 + np.exp(-x))),
    "elu": (nd.elu, lambda x: np.where(x > 0, x, np.expm1(x))),
    "exp": (nd.exp, np.exp),
    "softplus": (nd.softplus, lambda x: np.log1p(np.exp(x))),
    "square": (nd.square, np.square),
    "neg": (nd.neg, np.negative),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_elementwise_forward_matches_numpy(name):
    op, ref = ELEMENTWISE[name]
    x = np.linspace(-4, 4, 33).astype(np.float32)
    np.testing.assert_allclose(op(Tensor(x)).data, ref(x.astype(np.float64)), rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_elementwise_gradients(name):
    op, _ = ELEMENTWISE[name]
    x = leaf(np.random.default_rng(1).uniform(-2, 2, 7))
    assert grad_check(lambda t: nd.sum_(op(t)), x) < 1e-5


@pytest.mark.parametrize("fn", [
    lambda a, b: nd.sum_(nd.mul(a, b)),
    lambda a, b: nd.sum_(nd.div(a, nd.add(nd.square(b), 1.0))),
    lambda a, b: nd.sum_(nd.sub(a, b)),
    lambda a, b: nd.sum_(nd.log(nd.add(nd.square(a), 0.5))),
    lambda a, b: nd.sum_(nd.sqrt(nd.add(nd.square(b), 0.1))),
    lambda a, b: nd.mean(nd.concat([a, b], axis=0)),
    lambda a, b: nd.sum_(nd.square(nd.stack([a, b])[1])),
    lambda a, b: nd.sum_(nd.getitem(a, np.array([0, 0, 2]))),
    lambda a, b: nd.sum_(nd.maximum(a, 0.1)),
    lambda a, b: nd.sum_(nd.reshape(nd.mul(a, b), (3, 2))),
    lambda a, b: nd.sum_(nd.relu(a)),
])
def test_binary_and_structural_gradients(fn):
    rng = np.random.default_rng(2)
    a, b = leaf(rng.uniform(-1, 1, 6) + 0.05), leaf(rng.uniform(-1, 1, 6))
    assert grad_check(lambda ts: fn(*ts), [a, b]) < 1e-5


def test_matmul_affine_broadcast_gradients():
    rng = np.random.default_rng(3)
    x = leaf(rng.normal(size=(4, 3)))
    w = leaf(rng.normal(size=(2, 3, 5)))
    b = leaf(rng.normal(size=(2, 1, 5)))
    assert grad_check(lambda ts: nd.sum_(nd.square(nd.affine(*ts))), [x, w, b]) < 1e-5
    assert grad_check(lambda ts: nd.sum_(nd.tanh(nd.matmul(ts[0], ts[1]))), [x, w]) < 1e-5
    row = leaf(rng.normal(size=(5,)))
    m = leaf(rng.normal(size=(4, 5)))
    assert grad_check(lambda ts: nd.sum_(nd.square(nd.mul(ts[0], ts[1]))), [m, row]) < 1e-5


# ---------------------------------------------------------------------------
# backward and tape
# ---------------------------------------------------------------------------

def test_backward_sum():
    w = Parameter(np.zeros(3))
    with Tape() as tape:
        backward(nd.sum_(w), tape)
    np.testing.assert_array_equal(w.grad, [1, 1, 1])


def test_backward_sum_of_squares():
    w = Parameter([1.0, 2.0])
    with Tape() as tape:
        backward(nd.sum_(nd.mul(w, w)), tape)
    np.testing.assert_array_equal(w.grad, [2, 4])


def test_backward_constant_is_noop():
    with Tape() as tape:
        c = nd.add(Tensor(1.0), Tensor(2.0))
        backward(c, tape)
    assert len(tape) == 0


def test_backward_rejects_non_scalar():
    w = Parameter(np.ones(3))
    with Tape() as tape, pytest.raises(ShapeError):
        backward(nd.mul(w, 2.0), tape)


def test_gradients_accumulate_across_uses():
    w = Parameter([3.0])
    with Tape() as tape:
        backward(nd.sum_(nd.add(nd.mul(w, w), w)), tape)
    np.testing.assert_allclose(w.grad, [7.0])


def test_tape_replay_visits_each_op_once_and_clears():
    w = Parameter(np.ones(4))
    with Tape() as tape:
        y = nd.sum_(nd.tanh(nd.mul(nd.exp(w), 2.0)))
        calls = []
        for node in tape.ops:
            rule = node.rule
            node.rule = (lambda r, i: lambda g: calls.append(i) or r(g))(rule, id(node))
        ids = [id(n) for n in tape.ops]
        backward(y, tape)
    assert sorted(calls) == sorted(ids)
    assert calls == ids[::-1]
    assert len(tape) == 0


def test_no_recording_without_tape():
    w = Parameter(np.ones(2))
    y = nd.mul(w, 3.0)
    assert not y.requires_grad


def test_zero_grad_exact():
    w = Parameter(np.ones(3))
    with Tape() as tape:
        backward(nd.sum_(nd.square(w)), tape)
    w.zero_grad()
    assert np.all(w.grad == 0.0)
    assert w.grad.shape == w.shape


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def test_grad_check_sum_of_squares():
    x = leaf(np.random.default_rng(4).uniform(-1, 1, 10))
    assert grad_check(lambda t: nd.sum_(nd.square(t)), x, eps=1e-4) < 1e-3


def test_grad_check_linear_near_machine_precision():
    x = leaf(np.random.default_rng(5).uniform(-1, 1, 10))
    c = np.arange(10.0)
    assert grad_check(lambda t: nd.sum_(nd.mul(t, Tensor(c))), x) < 1e-8


def test_grad_check_gru_with_head():
    rng = np.random.default_rng(6)
    cell = GRUCell(rng, 10, 20)
    head = nd.Dense(rng, 20, 3)
    params = cell.parameters() + head.parameters()
    assert 1500 <= sum(p.data.size for p in params) <= 2500
    h0 = rng.normal(size=(2, 20)) * 0.5
    x = rng.normal(size=(2, 10))

    def f(_):
        h = gru_cell(Tensor(h0), Tensor(x), cell)
        return nd.sum_(nd.square(head(h)))

    assert grad_check(f, params) < 1e-3


def test_grad_check_restores_inputs():
    x = leaf(np.arange(3.0))
    grad_check(lambda t: nd.sum_(nd.square(t)), x)
    assert x.data.dtype == np.float32
    np.testing.assert_array_equal(x.data, [0, 1, 2])


def test_grad_check_rejects_bad_eps_and_nonfinite():
    x = leaf([1.0])
    with pytest.raises(ValueError):
        grad_check(lambda t: nd.sum_(t), x, eps=0.1)
    with pytest.raises(ValueError):
        grad_check(lambda t: nd.sum_(t), x, eps=0.0)
    with pytest.raises(ValueError):
        grad_check(lambda t: nd.sum_(nd.mul(t, float("inf"))), x)


# ---------------------------------------------------------------------------
# GRU cell
# ---------------------------------------------------------------------------

def _zero_cell(n_in, n_h):
    cell = GRUCell(np.random.default_rng(0), n_in, n_h)
    for p in cell.parameters():
        p.data[...] = 0.0
    return cell


def test_gru_zero_params_halves_state():
    h = np.random.default_rng(7).normal(size=(3, 5)).astype(np.float32)
    out = gru_cell(Tensor(h), Tensor(np.ones((3, 4))), _zero_cell(4, 5))
    np.testing.assert_allclose(out.data, 0.5 * h, rtol=1e-6)


def test_gru_zero_everything():
    out = gru_cell(Tensor(np.zeros((2, 5))), Tensor(np.zeros((2, 4))), _zero_cell(4, 5))
    np.testing.assert_array_equal(out.data, 0.0)


def test_gru_shape_and_mismatch():
    cell = GRUCell(np.random.default_rng(0), 4, 5)
    assert cell(Tensor(np.zeros((3, 5))), Tensor(np.zeros((3, 4)))).shape == (3, 5)
    with pytest.raises(ShapeError):
        cell(Tensor(np.zeros((3, 5))), Tensor(np.zeros((3, 6))))
    with pytest.raises(ShapeError):
        cell(Tensor(np.zeros((3, 7))), Tensor(np.zeros((3, 4))))


# ---------------------------------------------------------------------------
# distributions
# ---------------------------------------------------------------------------

def test_sample_at_floor_is_near_mean():
    m = np.linspace(-1, 1, 50)
    s = nd.gaussian_sample(Tensor(m), Tensor(np.full(50, nd.STD_FLOOR)), np.random.default_rng(0))
    assert np.max(np.abs(s.data - m)) < 5 * nd.STD_FLOOR


def test_sample_deterministic_given_seed():
    a = nd.gaussian_sample(Tensor(np.zeros(5)), Tensor(np.ones(5)), np.random.default_rng(9))
    b = nd.gaussian_sample(Tensor(np.zeros(5)), Tensor(np.ones(5)), np.random.default_rng(9))
    np.testing.assert_array_equal(a.data, b.data)


def test_sample_monte_carlo_moments():
    s = nd.gaussian_sample(Tensor(np.zeros(100_000)), Tensor(np.ones(100_000)),
                           np.random.default_rng(10)).data.astype(np.float64)
    assert abs(s.mean()) < 0.02
    assert abs(s.var() - 1.0) < 0.05


def test_sample_reparameterized_gradient():
    m, s = Parameter(np.zeros(4)), Parameter(np.ones(4))
    rng = np.random.default_rng(11)
    with Tape() as tape:
        x = nd.gaussian_sample(m, s, rng)
        backward(nd.sum_(x), tape)
    eps = np.random.default_rng(11).standard_normal(4).astype(np.float32)
    np.testing.assert_array_equal(m.grad, 1.0)
    np.testing.assert_allclose(s.grad, eps, rtol=1e-6)


def test_sample_rejects_nonpositive_std():
    with pytest.raises(DomainError):
        nd.gaussian_sample(Tensor([0.0]), Tensor([0.0]), np.random.default_rng(0))


def test_std_floor():
    s = nd.std_from_raw(Tensor([-100.0, 0.0, 100.0]))
    assert np.all(s.data >= nd.STD_FLOOR)


def test_kl_identical_is_zero():
    m, s = Tensor(np.random.default_rng(0).normal(size=(3, 4))), Tensor(np.full((3, 4), 0.7))
    np.testing.assert_array_equal(nd.kl_diag_gauss(m, s, m, s).data, 0.0)


def test_kl_hand_case():
    kl = nd.kl_diag_gauss(Tensor([[0.0]]), Tensor([[1.0]]), Tensor([[1.0]]), Tensor([[1.0]]))
    assert abs(float(kl.data[0]) - 0.5) < 1e-6


def test_kl_rejects_nonpositive_std():
    with pytest.raises(DomainError):
        nd.kl_diag_gauss(Tensor([0.0]), Tensor([-1.0]), Tensor([0.0]), Tensor([1.0]))


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite),
       arrays(np.float64, (3, 4), elements=st.floats(0.05, 3)),
       arrays(np.float64, (3, 4), elements=st.floats(0.05, 3)))
def test_kl_nonnegative(mq, mp, sq, sp):
    kl = nd.kl_diag_gauss(Tensor(mq), Tensor(sq), Tensor(mp), Tensor(sp)).data
    assert np.all(kl >= -1e-5)


def test_kl_gradients():
    rng = np.random.default_rng(12)
    ts = [leaf(rng.normal(size=(2, 3))), leaf(rng.uniform(0.5, 1.5, (2, 3))),
          leaf(rng.normal(size=(2, 3))), leaf(rng.uniform(0.5, 1.5, (2, 3)))]
    assert grad_check(lambda t: nd.sum_(nd.kl_diag_gauss(*t)), ts) < 1e-5


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_grad_leaves_params():
    p = Parameter(np.arange(4.0))
    before = p.data.copy()
    opt = Adam([p], lr=0.1)
    for _ in range(3):
        assert opt.step()
    np.testing.assert_array_equal(p.data, before)
    assert p.step_count == 3


def test_adam_zero_grad_after_updates_still_noop():
    p = Parameter([1.0])
    opt = Adam([p], lr=0.1)
    p.grad[...] = 1.0
    opt.step()
    p.zero_grad()
    before = p.data.copy()
    opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_adam_first_step_size():
    p = Parameter([0.0])
    opt = Adam([p], lr=1e-3)
    p.grad[...] = 1.0
    opt.step()
    assert abs(float(p.data[0]) + 1e-3) < 1e-7
    for _ in range(5):
        before = float(p.data[0])
        opt.step()
        assert abs(float(p.data[0]) - before + 1e-3) < 1e-7


def test_adam_clipping_halves_gradient():
    p = Parameter(np.zeros(4))
    p.grad[...] = 100.0   # global norm 200
    Adam([p], lr=1e-3, clip=100.0).step()
    np.testing.assert_allclose(p.adam_m, 0.1 * 50.0, rtol=1e-6)
    np.testing.assert_allclose(p.adam_v, 0.001 * 50.0 ** 2, rtol=1e-6)


def test_adam_below_threshold_unclipped():
    p = Parameter(np.zeros(4))
    p.grad[...] = 10.0
    Adam([p], lr=1e-3, clip=100.0).step()
    np.testing.assert_allclose(p.adam_m, 1.0, rtol=1e-6)


def test_adam_skips_nonfinite(caplog):
    p, q = Parameter([1.0]), Parameter([2.0])
    p.grad[...] = np.nan
    q.grad[...] = 1.0
    with caplog.at_level(logging.WARNING):
        assert not Adam([p, q], lr=0.1).step()
    assert "non-finite" in caplog.text
    assert p.step_count == q.step_count == 0
    assert float(q.data[0]) == 2.0


def test_step_count_increments_once_per_step():
    ps = [Parameter(np.ones(2)), Parameter(np.ones(3))]
    opt = Adam(ps)
    for i in range(4):
        for p in ps:
            p.grad[...] = 0.5
        opt.step()
        assert all(p.step_count == i + 1 for p in ps)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def _params(rng):
    ps = [Parameter(rng.normal(size=(3, 4))), Parameter(rng.normal(size=(5,))),
          Parameter(rng.normal(size=(2, 1, 3)))]
    for i, p in enumerate(ps):
        p.name = f"wm/layer{i}/w"
        p.adam_m[...] = rng.normal(size=p.shape)
        p.adam_v[...] = rng.uniform(size=p.shape)
        p.step_count = 17 + i
    return ps


def test_checkpoint_bit_exact_roundtrip(tmp_path):
    rng = np.random.default_rng(13)
    ps = _params(rng)
    path = tmp_path / "a.ckpt"
    save_parameters(path, ps, {"note": "x"})
    fresh = _params(np.random.default_rng(99))
    meta = nd.load_parameters(path, fresh)
    assert meta["note"] == "x"
    for a, b in zip(ps, fresh):
        assert a.data.tobytes() == b.data.tobytes()
        assert a.adam_m.tobytes() == b.adam_m.tobytes()
        assert a.adam_v.tobytes() == b.adam_v.tobytes()
        assert a.step_count == b.step_count


def test_checkpoint_layout(tmp_path):
    p = Parameter(np.array([[1.5, -2.0]], np.float32))
    p.name = "ab"
    path = tmp_path / "b.ckpt"
    save_parameters(path, [p])
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    version, n, name_len = np.frombuffer(raw[4:16], "<u4")
    assert (version, n, name_len) == (1, 1, 2)
    assert raw[16:18] == b"ab"
    rank, d0, d1 = np.frombuffer(raw[18:30], "<u4")
    assert (rank, d0, d1) == (2, 1, 2)
    np.testing.assert_array_equal(np.frombuffer(raw[30:38], "<f4"), [1.5, -2.0])


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError):
        read_checkpoint(path)


def test_checkpoint_rejects_missing_parameter(tmp_path):
    ps = _params(np.random.default_rng(1))
    save_parameters(tmp_path / "c.ckpt", ps[:2])
    with pytest.raises(CheckpointError):
        nd.load_parameters(tmp_path / "c.ckpt", ps)


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

UNARY = [nd.tanh, nd.sigmoid, nd.elu, nd.softplus, lambda t: nd.mul(t, 0.7)]


@given(st.lists(st.integers(0, len(UNARY) - 1), min_size=1, max_size=4), st.integers(0, 2**31))
def test_random_composed_graphs_pass_grad_check(ops, seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.uniform(-1, 1, (3, 4)))
    w = leaf(rng.normal(size=(4, 2)))

    def f(ts):
        h = nd.matmul(ts[0], ts[1])
        for i in ops:
            h = UNARY[i](h)
        return nd.mean(nd.square(h))

    assert grad_check(f, [x, w]) < 1e-3


@given(arrays(np.float32, (4, 3), elements=finite))
def test_forward_deterministic(x):
    a = nd.elu(nd.matmul(Tensor(x), Tensor(np.ones((3, 2))))).data
    b = nd.elu(nd.matmul(Tensor(x), Tensor(np.ones((3, 2))))).data
    assert a.tobytes() == b.tobytes()


@given(arrays(np.float64, (2, 5), elements=finite))
def test_sigmoid_bounded(x):
    y = nd.sigmoid(Tensor(x)).data
    assert np.all((y >= 0) & (y <= 1))
