"""
Frozen-feature evaluation: linear probes, challenge-split accuracy and l-infinity
gradient-sign attacks on the probe-over-encoder composite.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import logsumexp, softmax
from typing_extensions import Literal, Protocol

from .errors import ConfigError
from .imgcore import apply_crop, center_crop_params
from .network import EncoderParams, Representation, backward, forward, to_nchw, to_nhwc
from .synthgen import ChallengeSplit, SampleSet

logger = logging.getLogger(__name__)

AttackKind = Literal["fgsm", "pgd"]

PGD_REL_STEP = 0.01 / 0.3


@dataclass
class ProbeConfig:
    max_iter: int = 2000
    tol: float = 1e-5
    representation: Representation = "embedding"
    batch_size: int = 256

    def validate(self):
        if self.max_iter < 1:
            raise ConfigError("probe.max_iter must be >= 1")
        if self.tol <= 0:
            raise ConfigError("probe.tol must be > 0")
        if self.representation not in ("backbone", "embedding"):
            raise ConfigError(f"probe.representation must be backbone or embedding, got {self.representation!r}")


@dataclass
class AttackConfig:
    kind: AttackKind = "pgd"
    epsilon: float = 2 / 255
    pgd_steps: int = 40
    pgd_rel_step: float = PGD_REL_STEP
    # absolute PGD step, overrides epsilon * pgd_rel_step
    step_size: Optional[float] = None

    def validate(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ConfigError(f"attack.kind must be fgsm or pgd, got {self.kind!r}")
        if self.epsilon < 0:
            raise ConfigError("attack.epsilon must be >= 0")
        if self.pgd_steps < 1:
            raise ConfigError("attack.pgd_steps must be >= 1")
        if self.pgd_rel_step <= 0 or (self.step_size is not None and self.step_size <= 0):
            raise ConfigError("attack step sizes must be > 0")

    @property
    def step(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon * self.pgd_rel_step


@dataclass
class ProbeParams:
    weight: np.ndarray
    bias: np.ndarray
    converged: bool = True
    iterations: int = 0
    loss: float = float("nan")
    flags: List[str] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.bias)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)


def probe_loss(
    weight: np.ndarray, bias: np.ndarray, x: np.ndarray, y: np.ndarray
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy and its gradients w.r.t. (weight, bias)."""
    logits = x @ weight + bias
    n = len(y)
    loss = float(np.mean(logsumexp(logits, axis=1) - logits[np.arange(n), y]))
    d = softmax(logits, axis=1)
    d[np.arange(n), y] -= 1.0
    d /= n
    return loss, x.T @ d, d.sum(axis=0)


def fit_probe(x: np.ndarray, y: np.ndarray, n_classes: int, cfg: Optional[ProbeConfig] = None) -> ProbeParams:
    """
    Multinomial logistic regression by full-batch gradient descent from zero.

    The step is 1/L with L = ||[x, 1]||_2^2 / (2 n), an upper bound on the curvature
    of the mean cross-entropy. Stops once the gradient norm drops below ``cfg.tol``;
    otherwise the lowest-loss iterate is returned with ``converged=False``.
    """
    cfg = cfg or ProbeConfig()
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, d = x.shape
    augmented = np.hstack([x, np.ones((n, 1))])
    lipschitz = max(np.linalg.norm(augmented, 2) ** 2 / (2 * n), 1e-12)
    lr = 1.0 / lipschitz

    weight, bias = np.zeros((d, n_classes)), np.zeros(n_classes)
    best = (np.inf, weight, bias)
    for iteration in range(1, cfg.max_iter + 1):
        loss, g_w, g_b = probe_loss(weight, bias, x, y)
        if loss < best[0]:
            best = (loss, weight, bias)
        grad_norm = np.sqrt(np.sum(g_w**2) + np.sum(g_b**2))
        if grad_norm < cfg.tol:
            return ProbeParams(weight, bias, True, iteration, loss)
        weight = weight - lr * g_w
        bias = bias - lr * g_b

    loss = probe_loss(weight, bias, x, y)[0]
    if loss < best[0]:
        best = (loss, weight, bias)
    message = f"Probe did not reach gradient norm {cfg.tol} in {cfg.max_iter} iterations"
    logger.warning(message)
    return ProbeParams(best[1], best[2], False, cfg.max_iter, best[0], [message])


def eval_view(images: np.ndarray) -> np.ndarray:
    """Centre-cropped to the largest square and resized back to the input size."""
    h, w = images.shape[1:3]
    crop = center_crop_params(h, w, out_size=(h, w))
    if crop.crop_h == h and crop.crop_w == w:
        return images
    return np.stack([apply_crop(img, crop) for img in images])


def embed(
    params: EncoderParams, images: np.ndarray, representation: Representation = "embedding", batch_size: int = 256
) -> np.ndarray:
    """Normalised features of uncropped evaluation views. No augmentation is applied."""
    images = eval_view(np.asarray(images))
    chunks = [
        forward(params, to_nchw(images[start : start + batch_size])).output(representation)
        for start in range(0, len(images), batch_size)
    ]
    return np.concatenate(chunks) if chunks else np.empty((0, 0))


def train_probe(params: EncoderParams, train_set: SampleSet, cfg: Optional[ProbeConfig] = None) -> ProbeParams:
    cfg = cfg or ProbeConfig()
    x = embed(params, train_set.images, cfg.representation, cfg.batch_size)
    return fit_probe(x, train_set.fg_classes, train_set.config.n_fg_classes, cfg)


class Classifier(Protocol):
    def predict(self, images: np.ndarray) -> np.ndarray:
        ...

    def loss_and_input_grad(self, images: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        ...


class ProbedEncoder:
    """
    A frozen encoder followed by a linear probe, seen as a pixel-space classifier.
    """

    def __init__(self, params: EncoderParams, probe: ProbeParams, representation: Representation = "embedding"):
        self.params = params
        self.probe = probe
        self.representation = representation

    def logits(self, images: np.ndarray) -> np.ndarray:
        return self.probe.logits(embed(self.params, images, self.representation))

    def predict(self, images: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(images), axis=1)

    def loss_and_input_grad(self, images: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Per-image cross-entropy and its gradient w.r.t. the (N, H, W, C) input."""
        acts = forward(self.params, to_nchw(images))
        feats = acts.output(self.representation)
        logits = self.probe.logits(feats)
        n = len(labels)
        losses = logsumexp(logits, axis=1) - logits[np.arange(n), labels]
        d = softmax(logits, axis=1)
        d[np.arange(n), labels] -= 1.0
        d_feats = d @ self.probe.weight.T
        if self.representation == "embedding":
            _, dx = backward(self.params, acts, d_embedding=d_feats, input_grad=True)
        else:
            _, dx = backward(self.params, acts, d_backbone=d_feats, input_grad=True)
        return losses, to_nhwc(dx).astype(np.asarray(images).dtype, copy=False)


class PixelLinearModel:
    """Softmax regression directly on flattened pixels."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = weight
        self.bias = bias

    def logits(self, images: np.ndarray) -> np.ndarray:
        return images.reshape(len(images), -1) @ self.weight + self.bias

    def predict(self, images: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(images), axis=1)

    def loss_and_input_grad(self, images: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        logits = self.logits(images)
        n = len(labels)
        losses = logsumexp(logits, axis=1) - logits[np.arange(n), labels]
        d = softmax(logits, axis=1)
        d[np.arange(n), labels] -= 1.0
        return losses, (d @ self.weight.T).reshape(images.shape)


def accuracy(model: Classifier, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(model.predict(images) == np.asarray(labels)))


def eval_splits(model: Classifier, splits: Mapping[str, ChallengeSplit]) -> pd.DataFrame:
    """Top-1 accuracy on every split, in the order given."""
    rows = [
        {"split": name, "n": len(split.labels), "accuracy": accuracy(model, split.images, split.labels)}
        for name, split in splits.items()
    ]
    return pd.DataFrame(rows, columns=["split", "n", "accuracy"])


def fgsm(model: Classifier, images: np.ndarray, labels: np.ndarray, epsilon: float) -> np.ndarray:
    """x' = clip(x + epsilon * sign(grad_x CE), 0, 1)."""
    if epsilon < 0:
        raise ConfigError("epsilon must be >= 0")
    _, grad = model.loss_and_input_grad(images, labels)
    step = np.asarray(epsilon, dtype=images.dtype)
    return np.clip(images + step * np.sign(grad).astype(images.dtype), 0.0, 1.0)


def pgd(model: Classifier, images: np.ndarray, labels: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """
    Iterated gradient-sign steps from the clean image, each followed by projection onto
    the epsilon ball around the input and onto [0, 1].
    """
    cfg.validate()
    epsilon = np.asarray(cfg.epsilon, dtype=images.dtype)
    step = np.asarray(cfg.step, dtype=images.dtype)
    lower, upper = images - epsilon, images + epsilon
    x = images.copy()
    for _ in range(cfg.pgd_steps):
        _, grad = model.loss_and_input_grad(x, labels)
        x = np.clip(np.clip(x + step * np.sign(grad).astype(images.dtype), lower, upper), 0.0, 1.0)
    return x


def attack(model: Classifier, images: np.ndarray, labels: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    if cfg.kind == "fgsm":
        return fgsm(model, images, labels, cfg.epsilon)
    return pgd(model, images, labels, cfg)


def robust_accuracy(
    model: Classifier, images: np.ndarray, labels: np.ndarray, cfg: AttackConfig, batch_size: int = 256
) -> float:
    adversarial = np.concatenate(
        [
            attack(model, images[start : start + batch_size], labels[start : start + batch_size], cfg)
            for start in range(0, len(images), batch_size)
        ]
    )
    return accuracy(model, adversarial, labels)


def attack_table(
    model: Classifier,
    images: np.ndarray,
    labels: np.ndarray,
    configs: Sequence[AttackConfig],
    batch_size: int = 256,
) -> pd.DataFrame:
    """
    Clean accuracy, robust accuracy and mean cross-entropy before and after each attack.
    """
    labels = np.asarray(labels)
    clean_loss = float(np.mean(model.loss_and_input_grad(images, labels)[0])) if len(labels) else float("nan")
    clean_acc = accuracy(model, images, labels)
    rows = []
    for cfg in configs:
        adversarial = np.concatenate(
            [
                attack(model, images[start : start + batch_size], labels[start : start + batch_size], cfg)
                for start in range(0, len(images), batch_size)
            ]
        )
        rows.append(
            {
                "kind": cfg.kind,
                "epsilon": cfg.epsilon,
                "epsilon_255": round(cfg.epsilon * 255, 6),
                "clean_accuracy": clean_acc,
                "robust_accuracy": accuracy(model, adversarial, labels),
                "clean_loss": clean_loss,
                "attacked_loss": float(np.mean(model.loss_and_input_grad(adversarial, labels)[0])),
            }
        )
    return pd.DataFrame(rows)


def split_accuracies(table: pd.DataFrame) -> Dict[str, float]:
    return dict(zip(table["split"], table["accuracy"]))
