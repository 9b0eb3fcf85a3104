import logging

import numpy as np
import pytest

from lexa.envs import PointRooms
from lexa.ndgrad import Tensor, no_tape
from lexa.worldmodel import SequenceBatch, WorldModel


def random_sequences(n, T, seed=0):
    env = PointRooms()
    rng = np.random.default_rng(seed)
    states = np.array([env.sample_state(rng) for _ in range(n)])
    images = [env.render_batch(states)]
    actions = [np.zeros((n, 2))]
    for _ in range(T - 1):
        a = rng.uniform(-1, 1, (n, 2))
        states = env.step_batch(states, a)
        images.append(env.render_batch(states))
        actions.append(a)
    return SequenceBatch(np.stack(images, 1).astype(np.float32), np.stack(actions, 1).astype(np.float32))


@pytest.fixture
def wm(tiny_wm_config):
    return WorldModel(np.random.default_rng(0), tiny_wm_config)


def state_bytes(s):
    return b"".join(t.data.tobytes() for t in (s.h, s.z, s.z_mean, s.z_std))


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def test_encode_deterministic_and_sized():
    wm = WorldModel(np.random.default_rng(0))
    x = random_sequences(3, 1).images[:, 0]
    a, b = wm.encode(x), wm.encode(x)
    assert a.data.tobytes() == b.data.tobytes()
    assert a.shape == (3, 64)


def test_encode_distinct_images_distinct_embeddings(wm):
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, (200, 16, 16, 3))
    e = wm.encode(x).data
    distinct = sum(not np.array_equal(e[2 * i], e[2 * i + 1]) for i in range(100))
    assert distinct == 100


def test_encode_rejects_out_of_range(wm):
    with pytest.raises(ValueError):
        wm.encode(np.full((1, 16, 16, 3), 1.5))
    with pytest.raises(ValueError):
        wm.encode(np.full((1, 16, 16, 3), -0.1))
    with pytest.raises(ValueError):
        wm.encode(np.zeros((1, 8, 8, 3)))


def test_default_dimensions():
    wm = WorldModel(np.random.default_rng(0))
    s = wm.initial(2)
    assert s.h.shape == (2, 128) and s.z.shape == (2, 32)
    assert s.features().shape == (2, 160)
    assert wm.feature_dim == 160
    assert all(p.name.startswith("wm/") for p in wm.parameters())


# ---------------------------------------------------------------------------
# latent transitions
# ---------------------------------------------------------------------------

def test_initial_state_is_zero(wm):
    s = wm.initial(3)
    assert not s.h.data.any() and not s.z.data.any()


def test_posterior_deterministic_given_seed(wm):
    emb = wm.encode(random_sequences(2, 1).images[:, 0])
    a = wm.posterior(wm.initial(2), Tensor(np.ones((2, 2))), emb, np.random.default_rng(5))
    b = wm.posterior(wm.initial(2), Tensor(np.ones((2, 2))), emb, np.random.default_rng(5))
    assert state_bytes(a) == state_bytes(b)


def test_std_floor(wm):
    batch = random_sequences(4, 6)
    posts, priors = wm.observe(batch.images, batch.actions, np.random.default_rng(0))
    for s in posts + priors:
        assert (s.z_std.data >= 0.01).all()


def test_prior_posterior_share_deterministic_path(wm):
    rng = np.random.default_rng(2)
    prev = wm.posterior(wm.initial(3), Tensor(np.zeros((3, 2))),
                        wm.encode(random_sequences(3, 1).images[:, 0]), rng)
    act = Tensor(rng.uniform(-1, 1, (3, 2)))
    emb = wm.encode(random_sequences(3, 1, seed=3).images[:, 0])
    p = wm.prior(prev, act, np.random.default_rng(0))
    q = wm.posterior(prev, act, emb, np.random.default_rng(0))
    assert p.h.data.tobytes() == q.h.data.tobytes()


def test_h_depends_on_action(wm):
    rng = np.random.default_rng(4)
    distinct = 0
    for _ in range(100):
        prev = wm.prior(wm.initial(1), Tensor(rng.uniform(-1, 1, (1, 2))), rng)
        a, b = rng.uniform(-1, 1, (2, 1, 2))
        ha = wm.prior(prev, Tensor(a), rng).h.data
        hb = wm.prior(prev, Tensor(b), rng).h.data
        distinct += not np.array_equal(ha, hb)
    assert distinct == 100


def test_prior_closure(wm):
    rng = np.random.default_rng(0)
    s = wm.initial(2)
    for _ in range(15):
        s = wm.prior(s, Tensor(rng.uniform(-1, 1, (2, 2))), rng)
    assert np.isfinite(s.features().data).all()


def test_decode_shape_and_render_clamp(wm):
    s = wm.prior(wm.initial(3), Tensor(np.zeros((3, 2))), np.random.default_rng(0))
    for p in wm.dec.parameters():
        p.data *= 50.0
    out = wm.decode(s)
    assert out.shape == (3, 16, 16, 3)
    assert out.data.min() < 0 or out.data.max() > 1
    img = wm.render(s)
    assert img.min() >= 0 and img.max() <= 1


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def test_beta_zero_total_is_reconstruction(tiny_wm_config):
    tiny_wm_config.beta = 0.0
    wm = WorldModel(np.random.default_rng(0), tiny_wm_config)
    _, losses = wm.observe_and_train(random_sequences(2, 5), np.random.default_rng(0))
    assert losses.total == losses.reconstruction_nll
    assert losses.kl >= 0


def test_total_is_nll_plus_beta_kl(tiny_wm_config):
    tiny_wm_config.beta = 0.5
    wm = WorldModel(np.random.default_rng(0), tiny_wm_config)
    _, losses = wm.observe_and_train(random_sequences(2, 5), np.random.default_rng(0))
    assert losses.total == pytest.approx(losses.reconstruction_nll + 0.5 * losses.kl, rel=1e-5)


def test_free_nats_floor_per_step(wm):
    T = 5
    _, losses = wm.observe_and_train(random_sequences(2, T), np.random.default_rng(0))
    assert losses.kl >= T * wm.config.free_nats - 1e-5


def test_observe_and_train_outputs(wm):
    B, T = 3, 4
    before = [p.data.copy() for p in wm.parameters()]
    states, losses = wm.observe_and_train(random_sequences(B, T), np.random.default_rng(0))
    assert len(states) == B * T
    assert not states.h.requires_grad
    assert np.isfinite(losses.total)
    assert any(not np.array_equal(b, p.data) for b, p in zip(before, wm.parameters()))
    assert all(p.step_count == 1 for p in wm.parameters())


def test_non_finite_loss_skips_step(wm, caplog):
    next(iter(wm.dec.parameters())).data[0, 0] = np.nan
    snapshot = [p.data.copy() for p in wm.parameters()]
    with caplog.at_level(logging.WARNING):
        _, losses = wm.observe_and_train(random_sequences(2, 3), np.random.default_rng(0))
    assert not np.isfinite(losses.total)
    assert wm.skipped == 1
    assert "skipped" in caplog.text
    for a, p in zip(snapshot, wm.parameters()):
        np.testing.assert_array_equal(a, p.data)


def test_overfit_one_batch(tiny_wm_config):
    tiny_wm_config.lr = 1e-3
    wm = WorldModel(np.random.default_rng(0), tiny_wm_config)
    batch = random_sequences(4, 8)
    losses = []
    for i in range(2000):
        _, l = wm.observe_and_train(batch, np.random.default_rng(i))
        losses.append(l.total)
    assert losses[-1] <= 0.5 * losses[0]
    ma = np.convolve(losses, np.ones(100) / 100, mode="valid")[::100]
    assert np.all(np.diff(ma) < 0)


def test_training_touches_only_world_model(wm):
    from lexa.explorer import Ensemble, EnsembleConfig
    ens = Ensemble(np.random.default_rng(1), wm.feature_dim + 2, wm.config.stoch, EnsembleConfig(heads=2, hidden=8))
    before = [p.data.copy() for p in ens.parameters()]
    wm.observe_and_train(random_sequences(2, 3), np.random.default_rng(0))
    for b, p in zip(before, ens.parameters()):
        np.testing.assert_array_equal(b, p.data)


def test_observe_is_order_deterministic(wm):
    batch = random_sequences(2, 6)
    with no_tape():
        a, _ = wm.observe(batch.images, batch.actions, np.random.default_rng(3))
        b, _ = wm.observe(batch.images, batch.actions, np.random.default_rng(3))
    assert all(state_bytes(x) == state_bytes(y) for x, y in zip(a, b))
