import logging
import math

import numpy as np
import pytest
from scipy.special import log_softmax

import bgaug.learner
from bgaug.augpipe import AugConfig, SampleStreams
from bgaug.errors import ConfigError, IntegrityError
from bgaug.learner import (
    ContrastiveState,
    KeyQueue,
    SupervisedState,
    TrainConfig,
    contrastive_loss_fn,
    contrastive_step,
    grad_check,
    infonce_loss,
    iter_batches,
    load_checkpoint,
    load_encoder,
    momentum_update,
    save_checkpoint,
    save_training,
    supervised_loss,
    supervised_loss_fn,
    train_contrastive,
    train_supervised,
    warm_up_queue,
)
from bgaug.network import encode, init_params, to_nchw
from bgaug.synthgen import gen_dataset
from bgaug.testing import tiny_synth


def unit_rows(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def small_train_config(**aug):
    return TrainConfig(
        batch_size=4,
        epochs=1,
        lr=0.05,
        queue_size=8,
        temperature=0.2,
        widths=(4, 8),
        hidden=8,
        embedding_dim=8,
        seed=1,
        aug=AugConfig(**aug),
    )


@pytest.fixture(scope="module")
def train_set():
    train, _ = gen_dataset(tiny_synth(n_train=16, n_test=4))
    return train


def test_infonce_uniform_logits():
    q = np.array([[1.0, 0.0]])
    k = np.array([[0.0, 1.0]])
    for n in (1, 5, 16):
        negatives = np.tile([[0.0, 1.0]], (n, 1))
        assert infonce_loss(q, k, negatives, 0.2).loss == pytest.approx(math.log(n + 1), abs=1e-12)


def test_infonce_closed_form():
    result = infonce_loss(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]), np.array([[-1.0, 0.0]]), 1.0)
    assert result.loss == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-12)
    assert result.loss == pytest.approx(0.126928, abs=1e-6)


def test_infonce_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, m, e, d = rng.integers(1, 5), rng.integers(1, 8), rng.integers(0, 2), rng.integers(2, 6)
        q, k = unit_rows(rng, n, d), unit_rows(rng, n, d)
        negatives = unit_rows(rng, m, d)
        extra = unit_rows(rng, n, e, d) if e else None
        tau = rng.uniform(0.05, 1.0)
        expected = 0.0
        for i in range(n):
            logits = [q[i] @ k[i]] + [q[i] @ neg for neg in negatives]
            if extra is not None:
                logits += [q[i] @ x for x in extra[i]]
            expected -= log_softmax(np.array(logits) / tau)[0]
        result = infonce_loss(q, k, negatives, tau, extra)
        assert abs(result.loss - expected / n) < 1e-10
        assert result.n_negatives == m + e


def test_infonce_gradients():
    rng = np.random.default_rng(1)
    q, k = unit_rows(rng, 3, 4), unit_rows(rng, 3, 4)
    negatives, extra = unit_rows(rng, 5, 4), unit_rows(rng, 3, 2, 4)

    checks = [
        (q, lambda v: (lambda r: (r.loss, r.d_q))(infonce_loss(v, k, negatives, 0.3, extra))),
        (k, lambda v: (lambda r: (r.loss, r.d_k))(infonce_loss(q, v, negatives, 0.3, extra))),
        (negatives, lambda v: (lambda r: (r.loss, r.d_negatives))(infonce_loss(q, k, v, 0.3, extra))),
        (extra, lambda v: (lambda r: (r.loss, r.d_extra))(infonce_loss(q, k, negatives, 0.3, v))),
    ]
    for value, loss_fn in checks:
        assert grad_check(value, loss_fn, fraction=1.0).max_rel_error < 1e-4


def test_infonce_per_query_negatives():
    rng = np.random.default_rng(2)
    q, k = unit_rows(rng, 2, 3), unit_rows(rng, 2, 3)
    shared = unit_rows(rng, 4, 3)
    a = infonce_loss(q, k, shared, 0.5)
    b = infonce_loss(q, k, np.stack([shared, shared]), 0.5)
    assert a.loss == pytest.approx(b.loss, abs=1e-12)
    assert np.allclose(a.d_q, b.d_q)


def test_infonce_rejects_temperature():
    with pytest.raises(ConfigError):
        infonce_loss(np.ones((1, 2)), np.ones((1, 2)), np.ones((1, 2)), 0.0)


def test_momentum_update():
    rng = np.random.default_rng(3)
    theta_k, theta_q = init_params(rng, 1, (2,), 3, 2), init_params(rng, 1, (2,), 3, 2)
    same = momentum_update(theta_k, theta_q, 1.0)
    follow = momentum_update(theta_k, theta_q, 0.0)
    half = momentum_update(theta_k, theta_q, 0.5)
    for name in theta_k:
        assert np.array_equal(same[name], theta_k[name])
        assert np.array_equal(follow[name], theta_q[name])
        assert np.allclose(half[name], (theta_k[name] + theta_q[name]) / 2)


def test_grad_check_least_squares():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(10, 5)), rng.normal(size=(10, 3))

    def loss_fn(w):
        residual = x @ w - y
        return float(np.sum(residual**2)), 2 * x.T @ residual

    check = grad_check(rng.normal(size=(5, 3)), loss_fn, eps=1e-4, fraction=1.0)
    assert check.n_checked == 15
    assert check.max_rel_error < 1e-8


def test_grad_check_eps_range():
    with pytest.raises(ConfigError):
        grad_check(np.zeros(2), lambda w: (0.0, w), eps=1e-2)


def encoder_problem(seed=5):
    rng = np.random.default_rng(seed)
    params = init_params(rng, 3, (3, 4), 5, 4)
    images = rng.random((3, 8, 8, 3))
    loss_fn = contrastive_loss_fn(images, unit_rows(rng, 3, 4), unit_rows(rng, 6, 4), 0.5, unit_rows(rng, 3, 1, 4))
    return params, loss_fn


def test_grad_check_encoder():
    params, loss_fn = encoder_problem()
    check = grad_check(params, loss_fn, fraction=0.2, rng=np.random.default_rng(0))
    assert check.max_rel_error < 1e-4
    assert check.n_checked >= len(params.bias_indices())


def test_grad_check_catches_faults():
    params, loss_fn = encoder_problem()

    def doubled(p):
        loss, grads = loss_fn(p)
        grads["head2.w"] = 2 * grads["head2.w"]
        return loss, grads

    def no_bias(p):
        loss, grads = loss_fn(p)
        grads["head2.b"] = np.zeros_like(grads["head2.b"])
        return loss, grads

    assert grad_check(params, doubled, fraction=1.0).max_rel_error > 0.1
    assert grad_check(params, no_bias, fraction=0.01).max_rel_error > 0.1


def test_supervised_gradients():
    rng = np.random.default_rng(6)
    cfg = TrainConfig(widths=(3, 4), hidden=5, embedding_dim=4, seed=6)
    state = SupervisedState.create(cfg, n_classes=3)
    loss_fn = supervised_loss_fn(rng.random((4, 8, 8, 3)), np.array([0, 1, 2, 1]))
    assert grad_check(state.params, loss_fn, fraction=0.3).max_rel_error < 1e-4


def test_encode_unit_norm_and_deterministic():
    rng = np.random.default_rng(7)
    params = init_params(rng, 3, (4, 8), 8, 6)
    images = rng.random((5, 16, 16, 3))
    z = encode(params, images)
    assert np.allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)
    assert np.array_equal(z, encode(params, images))
    assert np.array_equal(encode(params, images[0]), z[0])
    backbone = encode(params, images, "backbone")
    assert backbone.shape == (5, 8)


def test_encode_zero_head_guarded(caplog):
    params = init_params(np.random.default_rng(8), 3, (4,), 4, 3)
    params["head2.w"][:] = 0.0
    with caplog.at_level(logging.WARNING):
        z = encode(params, np.full((8, 8, 3), 0.5))
    assert np.all(np.isfinite(z))
    assert "fell below" in caplog.text


def test_key_queue_fifo():
    queue = KeyQueue(4, 2)
    queue.enqueue(np.ones((3, 2)), origin=0)
    assert not queue.full and len(queue.negatives()) == 3
    queue.enqueue(np.full((3, 2), 2.0), origin=1)
    assert queue.full
    assert queue.origin.tolist() == [1, 1, 0, 1]
    assert queue.ptr == 2


def test_train_config_validation():
    with pytest.raises(ConfigError, match="queue_size"):
        TrainConfig(batch_size=4, queue_size=6).validate()
    with pytest.raises(ConfigError, match="temperature"):
        TrainConfig(temperature=0).validate()


def test_iter_batches_drops_tail():
    batches = list(iter_batches(10, 4, 0, 0))
    assert len(batches) == 2
    seen = np.concatenate([b for _, b in batches])
    assert len(set(seen.tolist())) == 8


@pytest.mark.parametrize("p_neg", [0.0, 0.2, 1.0])
def test_negative_count_constant(train_set, p_neg):
    cfg = small_train_config(mode="bg_swaps", p_pos=0.5, p_neg=p_neg)
    cfg.epochs = 2
    log = train_contrastive(train_set, cfg).log
    assert len(log) == 8
    assert (log["n_negatives"] == cfg.queue_size + 1).all()
    assert (log["queue_norm_err"] < 1e-5).all()
    if p_neg == 0.0:
        assert (log["matched_negatives"] == 0).all()
    if p_neg == 1.0:
        assert (log["matched_negatives"] == cfg.batch_size).all()


def test_no_matched_negatives_when_disabled(train_set, monkeypatch):
    def fail(*args, **kwargs):
        raise AssertionError("matched negative built with p_neg=0")

    monkeypatch.setattr(bgaug.learner, "make_matched_negative", fail)
    train_contrastive(train_set, small_train_config(mode="bg_swaps", p_pos=1.0, p_neg=0.0))


def test_contrastive_step_updates(train_set):
    cfg = small_train_config(mode="bg_swaps", p_pos=0.5, p_neg=0.5)
    state = ContrastiveState.create(cfg)
    warm_up_queue(state, train_set, cfg)
    assert state.queue.full and state.queue.norm_error() < 1e-5

    theta_k = state.theta_k.copy()
    theta_q = state.theta_q.copy()
    batch = [train_set[i] for i in range(4)]
    step = contrastive_step(state, batch, 0, 0, cfg)
    assert np.isfinite(step.loss)
    assert state.step == 1
    expected = momentum_update(theta_k, state.theta_q, cfg.key_momentum)
    for name in theta_k:
        assert np.array_equal(state.theta_k[name], expected[name])
    assert any(not np.array_equal(theta_q[name], state.theta_q[name]) for name in theta_q)
    assert np.count_nonzero(state.queue.origin == 0) == cfg.batch_size


def test_warm_up_needs_enough_batches(train_set):
    cfg = small_train_config()
    cfg.queue_size = 32
    state = ContrastiveState.create(cfg)
    with pytest.raises(ConfigError, match="queue_size"):
        warm_up_queue(state, train_set, cfg)


def test_supervised_zero_lr_and_initial_loss(train_set):
    cfg = small_train_config()
    cfg.lr = 0.0
    state = SupervisedState.create(cfg, n_classes=4)
    before = state.params.copy()
    labels = np.arange(16) % 4
    loss, _, _ = supervised_loss(state.params, to_nchw(train_set.images), labels)
    assert loss == pytest.approx(math.log(4), abs=0.1)

    result = train_supervised(train_set, cfg)
    for name in before:
        assert np.array_equal(result.state.params[name], before[name])


def test_training_independent_of_workers(train_set):
    cfg = small_train_config(mode="bg_swaps", p_pos=0.5, p_neg=0.5)
    a = train_contrastive(train_set, cfg, workers=1)
    b = train_contrastive(train_set, cfg, workers=4)
    assert np.array_equal(a.state.theta_q.flat(), b.state.theta_q.flat())
    assert np.array_equal(a.log["loss"].to_numpy(), b.log["loss"].to_numpy())


def test_log_file(train_set, tmp_path):
    train_contrastive(train_set, small_train_config(), log_path=tmp_path / "log.jsonl")
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 4
    assert '"loss"' in lines[0]


def test_checkpoint_roundtrip(train_set, tmp_path):
    cfg = small_train_config()
    result = train_contrastive(train_set, cfg)
    save_training(tmp_path, result, cfg, {"seed": cfg.seed})
    encoder = load_encoder(tmp_path)
    for name, value in result.state.theta_q.items():
        assert np.allclose(encoder[name], value, rtol=1e-6, atol=1e-7)
    checkpoint = load_checkpoint(tmp_path)
    assert checkpoint.meta["step"] == result.state.step
    assert set(checkpoint.blobs) == {"encoder", "key_encoder", "velocity", "queue"}
    assert np.array_equal(checkpoint.counters["queue_origin"], result.state.queue.origin)
    assert checkpoint.counters["queue_origin"].dtype == np.int64

    data = (tmp_path / "encoder.bin").read_bytes()
    (tmp_path / "encoder.bin").write_bytes(data[:-8])
    with pytest.raises(IntegrityError):
        load_encoder(tmp_path)


def test_several_matched_negatives(train_set):
    cfg = small_train_config(mode="bg_swaps", p_pos=0.5, p_neg=1.0, n_matched=3)
    log = train_contrastive(train_set, cfg).log
    assert (log["n_negatives"] == cfg.queue_size + 3).all()
    assert (log["matched_negatives"] == 3 * cfg.batch_size).all()


@pytest.mark.parametrize("coupled", [True, False])
def test_negative_decision_streams(train_set, coupled):
    cfg = small_train_config(mode="bg_swaps", p_pos=0.5, p_neg=0.5, couple_neg_to_key=coupled)
    tag = "bg_decision_k" if coupled else "neg_decision"
    for batch_index, indices in iter_batches(len(train_set), cfg.batch_size, cfg.seed, 0):
        batch = [train_set[int(i)] for i in indices]
        views = bgaug.learner._batch_views(batch, 0, batch_index, cfg, None)
        for sample, view in zip(batch, views):
            draw = SampleStreams(cfg.seed, 0, sample.id).fresh(tag).random()
            assert view.matched == int(draw < cfg.aug.p_neg)


@pytest.mark.parametrize("augmented", [True, False])
def test_enqueued_keys(train_set, augmented):
    cfg = small_train_config(mode="bg_swaps", p_pos=1.0, p_neg=0.0, enqueue_augmented_keys=augmented)
    state = ContrastiveState.create(cfg)
    warm_up_queue(state, train_set, cfg)
    theta_k = state.theta_k.copy()
    batch = [train_set[i] for i in range(4)]
    contrastive_step(state, batch, 0, 0, cfg)

    views = bgaug.learner._batch_views(batch, 0, 0, cfg, None)
    assert any(not np.array_equal(v.k, v.k_plain) for v in views)
    images = [v.k if augmented else v.k_plain for v in views]
    expected = encode(theta_k, np.stack(images))
    np.testing.assert_allclose(state.queue.keys[state.queue.origin == 0], expected, rtol=0, atol=1e-12)


def test_loss_decreases_over_first_epoch():
    train, _ = gen_dataset(tiny_synth(n_train=640, n_test=4, image_size=16))
    cfg = TrainConfig(batch_size=16, epochs=1, queue_size=32, widths=(8, 16), hidden=16, embedding_dim=16, seed=2)
    log = train_contrastive(train, cfg).log
    assert len(log) == 40
    assert np.isfinite(log["loss"]).all()
    assert log["loss"].mean() < log["loss"].iloc[:10].mean()


def test_checkpoint_counters_exact(tmp_path):
    origin = np.array([np.iinfo(np.int64).min, 2**24 + 1, 2**40 + 3, -2], dtype=np.int64)
    params = init_params(np.random.default_rng(3), 3, (4,), 4, 4)
    save_checkpoint(tmp_path, {"encoder": params}, {"step": 0}, {"queue_origin": origin})
    checkpoint = load_checkpoint(tmp_path)
    assert np.array_equal(checkpoint.counters["queue_origin"], origin)

    (tmp_path / "queue_origin.bin").write_bytes(origin[:2].tobytes())
    with pytest.raises(IntegrityError, match="counters"):
        load_checkpoint(tmp_path)
