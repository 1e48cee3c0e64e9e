import logging
import math

import numpy as np
import pytest

from bgaug.evalkit import (
    AttackConfig,
    PixelLinearModel,
    ProbeConfig,
    ProbeParams,
    ProbedEncoder,
    accuracy,
    attack_table,
    eval_splits,
    fgsm,
    fit_probe,
    pgd,
    probe_loss,
    robust_accuracy,
    split_accuracies,
    train_probe,
)
from bgaug.learner import grad_check
from bgaug.network import encode, init_params
from bgaug.synthgen import ChallengeSplit, gen_dataset
from bgaug.testing import tiny_synth


class AlwaysZero:
    def predict(self, images):
        return np.zeros(len(images), dtype=np.int64)

    def loss_and_input_grad(self, images, labels):
        return np.zeros(len(images)), np.zeros_like(images)


def linear_model(seed=0, shape=(6, 6, 3), n_classes=4):
    rng = np.random.default_rng(seed)
    size = int(np.prod(shape))
    return PixelLinearModel(rng.normal(size=(size, n_classes)), rng.normal(size=n_classes))


def random_images(seed=1, n=20, shape=(6, 6, 3)):
    rng = np.random.default_rng(seed)
    return rng.random((n,) + shape), rng.integers(0, 4, size=n)


def test_probe_separable():
    rng = np.random.default_rng(2)
    x = np.vstack([rng.normal(-2.0, 0.3, size=(30, 4)), rng.normal(2.0, 0.3, size=(30, 4))])
    y = np.repeat([0, 1], 30)
    probe = fit_probe(x, y, 2, ProbeConfig(max_iter=500))
    assert np.all(probe.predict(x) == y)


def test_probe_initial_loss():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 5))
    loss, _, _ = probe_loss(np.zeros((5, 7)), np.zeros(7), x, rng.integers(0, 7, size=40))
    assert loss == pytest.approx(math.log(7), abs=1e-12)


def test_probe_gradients():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(12, 4)), rng.integers(0, 3, size=12)
    bias = rng.normal(size=3)

    def loss_fn(weight):
        loss, g_w, _ = probe_loss(weight, bias, x, y)
        return loss, g_w

    assert grad_check(rng.normal(size=(4, 3)), loss_fn, fraction=1.0).max_rel_error < 1e-6

    weight = rng.normal(size=(4, 3))

    def bias_fn(b):
        loss, _, g_b = probe_loss(weight, b, x, y)
        return loss, g_b

    assert grad_check(bias, bias_fn, fraction=1.0).max_rel_error < 1e-6


def test_probe_non_convergence_flagged(caplog):
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(20, 3)), rng.integers(0, 3, size=20)
    with caplog.at_level(logging.WARNING):
        probe = fit_probe(x, y, 3, ProbeConfig(max_iter=2))
    assert not probe.converged
    assert probe.flags
    assert "did not reach" in caplog.text
    assert probe.loss <= math.log(3)


def test_train_probe_deterministic():
    train, _ = gen_dataset(tiny_synth(n_train=12, n_test=4))
    params = init_params(np.random.default_rng(6), 3, (4, 8), 8, 6)
    a = train_probe(params, train, ProbeConfig(max_iter=50))
    b = train_probe(params, train, ProbeConfig(max_iter=50))
    assert np.array_equal(a.weight, b.weight)
    assert a.weight.shape == (6, 4)
    pooled = train_probe(params, train, ProbeConfig(max_iter=50, representation="backbone"))
    assert pooled.weight.shape == (8, 4)


def test_always_class_zero_accuracy():
    labels = np.repeat(np.arange(4), 5)
    split = ChallengeSplit("Original", np.zeros((20, 4, 4, 3)), labels)
    table = eval_splits(AlwaysZero(), {"Original": split})
    assert table["accuracy"].iloc[0] == pytest.approx(0.25)
    assert table["n"].iloc[0] == 20


def test_eval_splits_order_and_permutation():
    model = linear_model()
    images, labels = random_images()
    order = np.random.default_rng(7).permutation(len(labels))
    splits = {
        "Original": ChallengeSplit("Original", images, labels),
        "Mixed-Rand": ChallengeSplit("Mixed-Rand", images[order], labels[order]),
    }
    table = eval_splits(model, splits)
    assert table["split"].tolist() == ["Original", "Mixed-Rand"]
    results = split_accuracies(table)
    assert results["Original"] == results["Mixed-Rand"]
    assert results["Original"] == accuracy(model, images, labels)


def test_fgsm_bounds_and_zero():
    model = linear_model()
    images, labels = random_images()
    assert np.array_equal(fgsm(model, images, labels, 0.0), images)
    for eps in (2 / 255, 8 / 255, 0.3):
        adversarial = fgsm(model, images, labels, eps)
        assert np.max(np.abs(adversarial - images)) <= eps + 1e-12
        assert adversarial.min() >= 0.0 and adversarial.max() <= 1.0


def test_fgsm_increases_linear_loss():
    model = linear_model(8)
    images, labels = random_images(9)
    clean, _ = model.loss_and_input_grad(images, labels)
    attacked, _ = model.loss_and_input_grad(fgsm(model, images, labels, 8 / 255), labels)
    assert np.all(attacked >= clean - 1e-12)


def test_pgd_bounds_and_zero():
    model = linear_model()
    images, labels = random_images()
    cfg = AttackConfig("pgd", epsilon=0.0)
    assert np.array_equal(pgd(model, images, labels, cfg), images)
    for steps in (1, 5, 40):
        cfg = AttackConfig("pgd", epsilon=4 / 255, pgd_steps=steps, step_size=1 / 255)
        adversarial = pgd(model, images, labels, cfg)
        assert np.max(np.abs(adversarial - images)) <= 4 / 255 + 1e-12
        assert adversarial.min() >= 0.0 and adversarial.max() <= 1.0


def test_single_step_pgd_is_fgsm():
    model = linear_model(10)
    images, labels = random_images(11)
    for step in (8 / 255, 0.1):
        cfg = AttackConfig("pgd", epsilon=8 / 255, pgd_steps=1, step_size=step)
        assert np.array_equal(pgd(model, images, labels, cfg), fgsm(model, images, labels, 8 / 255))
    small = images.astype(np.float32)
    cfg = AttackConfig("pgd", epsilon=8 / 255, pgd_steps=1, step_size=8 / 255)
    assert np.array_equal(pgd(model, small, labels, cfg), fgsm(model, small, labels, 8 / 255))


def test_robust_accuracy_at_zero_is_clean():
    model = linear_model(12)
    images, labels = random_images(13)
    clean = accuracy(model, images, labels)
    assert robust_accuracy(model, images, labels, AttackConfig("pgd", 0.0)) == clean
    assert robust_accuracy(model, images, labels, AttackConfig("fgsm", 0.0), batch_size=7) == clean


def test_attack_table():
    model = linear_model(14)
    images, labels = random_images(15)
    configs = [AttackConfig(kind, eps / 255, pgd_steps=10) for kind in ("fgsm", "pgd") for eps in (2, 8)]
    table = attack_table(model, images, labels, configs)
    assert len(table) == 4
    assert table["epsilon_255"].tolist() == [2, 8, 2, 8]
    assert (table["attacked_loss"] >= table["clean_loss"] - 1e-12).all()
    assert table["robust_accuracy"].between(0, 1).all()


@pytest.mark.parametrize("representation", ["backbone", "embedding"])
def test_input_gradient(representation):
    rng = np.random.default_rng(16)
    params = init_params(rng, 3, (3, 4), 5, 4)
    # backbone width and embedding size are both 4
    probe = ProbeParams(rng.normal(size=(4, 3)), rng.normal(size=3))
    model = ProbedEncoder(params, probe, representation)
    labels = np.array([0, 2])

    def loss_fn(images):
        losses, grad = model.loss_and_input_grad(images, labels)
        return float(losses.sum()), grad

    check = grad_check(rng.random((2, 8, 8, 3)), loss_fn, fraction=0.2, rng=rng)
    assert check.max_rel_error < 1e-4


def test_probed_encoder_predict_matches_logits():
    rng = np.random.default_rng(17)
    params = init_params(rng, 3, (4,), 4, 3)
    model = ProbedEncoder(params, ProbeParams(rng.normal(size=(4, 2)), np.zeros(2)), "backbone")
    images = rng.random((5, 8, 8, 3))
    assert np.array_equal(model.predict(images), np.argmax(model.logits(images), axis=1))


def test_default_representation_is_embedding():
    assert ProbeConfig().representation == "embedding"
    rng = np.random.default_rng(18)
    params = init_params(rng, 3, (4,), 4, 3)
    probe = ProbeParams(rng.normal(size=(3, 2)), rng.normal(size=2))
    images = rng.random((4, 8, 8, 3))
    expected = encode(params, images) @ probe.weight + probe.bias
    np.testing.assert_allclose(ProbedEncoder(params, probe).logits(images), expected, rtol=1e-12, atol=1e-12)
