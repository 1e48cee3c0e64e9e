"""
Momentum-contrast and supervised trainers for the small encoder in :mod:`bgaug.network`.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import logsumexp, softmax
from tqdm import tqdm
from typing_extensions import Literal

from .augpipe import (
    AugConfig,
    SampleStreams,
    assign_donors,
    augment_single,
    derive_rng,
    make_matched_negative,
    make_view_pair,
    standard_view,
)
from .errors import ConfigError, IntegrityError, NumericalError
from .network import EncoderParams, backward, forward, init_params, to_nchw
from .synthgen import Sample, SampleSet

logger = logging.getLogger(__name__)

Objective = Literal["contrastive", "supervised"]

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    objective: Objective = "contrastive"
    batch_size: int = 64
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    queue_size: int = 512
    temperature: float = 0.2
    key_momentum: float = 0.99
    seed: int = 0
    widths: Tuple[int, ...] = (16, 32, 64)
    hidden: int = 64
    embedding_dim: int = 32
    aug: AugConfig = field(default_factory=AugConfig)

    def validate(self):
        if self.objective not in ("contrastive", "supervised"):
            raise ConfigError(f"train.objective must be contrastive or supervised, got {self.objective!r}")
        if self.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2")
        if self.queue_size < self.batch_size or self.queue_size % self.batch_size:
            raise ConfigError("train.queue_size must be a positive multiple of train.batch_size")
        if self.temperature <= 0:
            raise ConfigError("train.temperature must be > 0")
        if not 0.0 <= self.key_momentum <= 1.0:
            raise ConfigError("train.key_momentum must be within [0, 1]")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("train.lr and train.weight_decay must be >= 0, train.momentum within [0, 1)")
        if not self.widths or min(self.widths) < 1 or self.hidden < 1 or self.embedding_dim < 1:
            raise ConfigError("train.widths, train.hidden and train.embedding_dim must be positive")
        self.aug.validate()


class InfoNCE(NamedTuple):
    loss: float
    d_q: np.ndarray
    d_k: np.ndarray
    d_negatives: np.ndarray
    d_extra: Optional[np.ndarray]
    n_negatives: int


def infonce_loss(
    q: np.ndarray,
    k: np.ndarray,
    negatives: np.ndarray,
    tau: float,
    extra: Optional[np.ndarray] = None,
) -> InfoNCE:
    """
    Mean InfoNCE loss of a batch and its exact gradients.

    :param q: (N, D) query embeddings.
    :param k: (N, D) positive key embeddings.
    :param negatives: (M, D) negatives shared by every query (the queue), or (N, M, D).
    :param extra: optional (N, E, D) per-query negatives appended after ``negatives``.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    q, k = np.atleast_2d(q), np.atleast_2d(k)
    n = q.shape[0]
    shared = negatives.ndim == 2

    pos = np.sum(q * k, axis=1, keepdims=True) / tau
    neg = (q @ negatives.T if shared else np.einsum("nd,nmd->nm", q, negatives)) / tau
    blocks = [pos, neg]
    if extra is not None:
        blocks.append(np.einsum("nd,ned->ne", q, extra) / tau)
    logits = np.concatenate(blocks, axis=1)

    loss = float(np.mean(logsumexp(logits, axis=1) - logits[:, 0]))
    d_logits = softmax(logits, axis=1)
    d_logits[:, 0] -= 1.0
    d_logits /= n * tau

    m = neg.shape[1]
    d_pos, d_neg = d_logits[:, :1], d_logits[:, 1 : 1 + m]
    d_q = d_pos * k + (d_neg @ negatives if shared else np.einsum("nm,nmd->nd", d_neg, negatives))
    d_k = d_pos * q
    d_negatives = d_neg.T @ q if shared else np.einsum("nm,nd->nmd", d_neg, q)
    d_extra = None
    if extra is not None:
        d_ext = d_logits[:, 1 + m :]
        d_q = d_q + np.einsum("ne,ned->nd", d_ext, extra)
        d_extra = np.einsum("ne,nd->ned", d_ext, q)
    return InfoNCE(loss, d_q, d_k, d_negatives, d_extra, logits.shape[1] - 1)


def momentum_update(theta_k: EncoderParams, theta_q: EncoderParams, m: float) -> EncoderParams:
    """theta_k <- m * theta_k + (1 - m) * theta_q, for every parameter."""
    return EncoderParams((name, m * value + (1.0 - m) * theta_q[name]) for name, value in theta_k.items())


def sgd_update(params: EncoderParams, grads: EncoderParams, velocity: EncoderParams, cfg: TrainConfig):
    """In-place SGD with momentum and L2 weight decay."""
    for name in params:
        velocity[name] = cfg.momentum * velocity[name] + grads[name] + cfg.weight_decay * params[name]
        params[name] = params[name] - cfg.lr * velocity[name]


class KeyQueue:
    """
    Fixed-size FIFO ring buffer of key embeddings. ``origin`` records which batch
    wrote each slot.
    """

    def __init__(self, size: int, dim: int):
        self.keys = np.zeros((size, dim))
        self.origin = np.full(size, np.iinfo(np.int64).min, dtype=np.int64)
        self.ptr = 0
        self.count = 0

    @property
    def size(self) -> int:
        return len(self.keys)

    @property
    def full(self) -> bool:
        return self.count == self.size

    def enqueue(self, keys: np.ndarray, origin: int):
        idx = (self.ptr + np.arange(len(keys))) % self.size
        self.keys[idx] = keys
        self.origin[idx] = origin
        self.ptr = int((self.ptr + len(keys)) % self.size)
        self.count = min(self.size, self.count + len(keys))

    def negatives(self) -> np.ndarray:
        return self.keys[: self.count]

    def norm_error(self) -> float:
        if not self.count:
            return 0.0
        return float(np.max(np.abs(np.linalg.norm(self.negatives(), axis=1) - 1.0)))


@dataclass
class ContrastiveState:
    theta_q: EncoderParams
    theta_k: EncoderParams
    queue: KeyQueue
    velocity: EncoderParams
    tau: float
    m: float
    step: int = 0

    @classmethod
    def create(cls, cfg: TrainConfig, channels: int = 3) -> "ContrastiveState":
        params = init_params(
            np.random.default_rng(cfg.seed), channels, cfg.widths, cfg.hidden, cfg.embedding_dim
        )
        return cls(
            theta_q=params,
            theta_k=params.copy(),
            queue=KeyQueue(cfg.queue_size, cfg.embedding_dim),
            velocity=params.zeros_like(),
            tau=cfg.temperature,
            m=cfg.key_momentum,
        )


@dataclass
class SupervisedState:
    params: EncoderParams
    velocity: EncoderParams
    step: int = 0

    @classmethod
    def create(cls, cfg: TrainConfig, n_classes: int, channels: int = 3) -> "SupervisedState":
        rng = np.random.default_rng(cfg.seed)
        params = init_params(rng, channels, cfg.widths, cfg.hidden, cfg.embedding_dim)
        params["cls.w"] = rng.normal(0.0, 0.01, size=(cfg.embedding_dim, n_classes))
        params["cls.b"] = np.zeros(n_classes)
        return cls(params=params, velocity=params.zeros_like())


class StepResult(NamedTuple):
    loss: float
    stats: Dict


@dataclass
class SampleViews:
    q: np.ndarray
    k: np.ndarray
    k_plain: np.ndarray
    extras: List[np.ndarray]
    matched: int = 0


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return derive_rng(seed, epoch, -1, "shuffle").permutation(n)


def batch_rng(seed: int, epoch: int, batch_index: int) -> np.random.Generator:
    # negative ids never collide with sample streams
    return derive_rng(seed, epoch, -(batch_index + 2), "donor")


def iter_batches(n: int, batch_size: int, seed: int, epoch: int):
    """Indices of the full batches of one epoch; the incomplete tail is dropped."""
    order = epoch_order(seed, epoch, n)
    for b in range(n // batch_size):
        yield b, order[b * batch_size : (b + 1) * batch_size]


def _map(pool: Optional[ThreadPoolExecutor], fn, items):
    return list(pool.map(fn, items)) if pool is not None else [fn(item) for item in items]


def _sample_views(
    batch: Sequence[Sample], position: int, plan, epoch: int, cfg: TrainConfig, with_negatives: bool = True
) -> SampleViews:
    aug = cfg.aug
    sample = batch[position]
    streams = SampleStreams(cfg.seed, epoch, sample.id)
    pair = make_view_pair(sample, batch, streams, aug, int(plan.q[position]), int(plan.k[position]))
    views = SampleViews(pair.q_view, pair.k_view, pair.k_plain, [])
    if not with_negatives:
        return views

    if aug.couple_neg_to_key:
        decision_rng = view_rng = streams.fresh("bg_decision_k")
    else:
        decision_rng, view_rng = streams["neg_decision"], streams["neg_view"]
    for j in range(aug.n_matched):
        if aug.mode == "bg_swaps" and decision_rng.random() < aug.p_neg:
            donor = batch[int(plan.negatives[position, j])]
            views.extras.append(make_matched_negative(sample, pair, donor, view_rng, aug))
            views.matched += 1
        else:
            donor = batch[int(plan.random_negatives[position, j])]
            views.extras.append(standard_view(donor, streams["random_negative"], aug).image)
    return views


def _batch_views(batch, epoch, batch_index, cfg, pool, with_negatives=True) -> List[SampleViews]:
    plan = assign_donors(len(batch), batch_rng(cfg.seed, epoch, batch_index), cfg.aug.n_matched)
    return _map(pool, lambda i: _sample_views(batch, i, plan, epoch, cfg, with_negatives), range(len(batch)))


def warm_up_queue(state: ContrastiveState, train_set: SampleSet, cfg: TrainConfig, pool=None):
    """
    Fill the queue with key embeddings of the first queue_size / batch_size batches of
    epoch 0, encoded before any parameter update.
    """
    n_warm = cfg.queue_size // cfg.batch_size
    for batch_index, indices in iter_batches(len(train_set), cfg.batch_size, cfg.seed, 0):
        if batch_index >= n_warm:
            break
        batch = [train_set[int(i)] for i in indices]
        views = _batch_views(batch, 0, batch_index, cfg, pool, with_negatives=False)
        keys = [v.k if cfg.aug.enqueue_augmented_keys else v.k_plain for v in views]
        state.queue.enqueue(forward(state.theta_k, to_nchw(np.stack(keys))).embedding, batch_index - n_warm)
    if not state.queue.full:
        raise ConfigError(
            f"train.queue_size {cfg.queue_size} needs {n_warm} batches, the training set has "
            f"{len(train_set) // cfg.batch_size}"
        )


def contrastive_step(
    state: ContrastiveState,
    batch: Sequence[Sample],
    epoch: int,
    batch_index: int,
    cfg: TrainConfig,
    pool: Optional[ThreadPoolExecutor] = None,
) -> StepResult:
    """
    One momentum-contrast update.

    Every query is contrasted against the whole queue plus exactly ``n_matched``
    extra negatives: background-matched negatives when the ``p_neg`` draw includes
    them, randomly augmented other batch samples otherwise. Extra negatives and keys
    are encoded by the key encoder, which receives no gradient.
    """
    views = _batch_views(batch, epoch, batch_index, cfg, pool)
    q_acts = forward(state.theta_q, to_nchw(np.stack([v.q for v in views])))
    k_emb = forward(state.theta_k, to_nchw(np.stack([v.k for v in views]))).embedding
    n_extra = cfg.aug.n_matched
    extra_images = np.stack([x for v in views for x in v.extras])
    extra = forward(state.theta_k, to_nchw(extra_images)).embedding.reshape(len(batch), n_extra, -1)
    if cfg.aug.enqueue_augmented_keys:
        keys = k_emb
    else:
        keys = forward(state.theta_k, to_nchw(np.stack([v.k_plain for v in views]))).embedding

    result = infonce_loss(q_acts.embedding, k_emb, state.queue.negatives(), state.tau, extra=extra)
    if not np.isfinite(result.loss):
        raise NumericalError(
            f"Non-finite loss at step {state.step} (epoch {epoch}, batch {batch_index})", where=f"step {state.step}"
        )

    grads, _ = backward(state.theta_q, q_acts, d_embedding=result.d_q)
    sgd_update(state.theta_q, grads, state.velocity, cfg)
    state.theta_k = momentum_update(state.theta_k, state.theta_q, state.m)
    state.queue.enqueue(keys, state.step)

    stats = {
        "step": state.step,
        "epoch": epoch,
        "loss": result.loss,
        "q_norm": float(np.mean(np.linalg.norm(q_acts.embedding, axis=1))),
        "queue_norm_err": state.queue.norm_error(),
        "n_negatives": int(result.n_negatives),
        "matched_negatives": int(sum(v.matched for v in views)),
    }
    state.step += 1
    return StepResult(result.loss, stats)


def supervised_loss(
    params: EncoderParams, x: np.ndarray, labels: np.ndarray
) -> Tuple[float, EncoderParams, np.ndarray]:
    """
    Softmax cross-entropy of a linear head on the normalised embedding.
    Returns (mean loss, gradients for every parameter, logits).
    """
    acts = forward(params, x)
    logits = acts.embedding @ params["cls.w"] + params["cls.b"]
    n = len(labels)
    loss = float(np.mean(logsumexp(logits, axis=1) - logits[np.arange(n), labels]))
    d_logits = softmax(logits, axis=1)
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n
    grads, _ = backward(params, acts, d_embedding=d_logits @ params["cls.w"].T)
    grads["cls.w"] = acts.embedding.T @ d_logits
    grads["cls.b"] = d_logits.sum(axis=0)
    return loss, grads, logits


def supervised_step(
    state: SupervisedState,
    batch: Sequence[Sample],
    labels: np.ndarray,
    epoch: int,
    batch_index: int,
    cfg: TrainConfig,
    pool: Optional[ThreadPoolExecutor] = None,
) -> StepResult:
    plan = assign_donors(len(batch), batch_rng(cfg.seed, epoch, batch_index))

    def view(i):
        sample = batch[i]
        return augment_single(sample, batch, SampleStreams(cfg.seed, epoch, sample.id), cfg.aug, int(plan.q[i]))

    x = to_nchw(np.stack(_map(pool, view, range(len(batch)))))
    loss, grads, _ = supervised_loss(state.params, x, np.asarray(labels))
    if not np.isfinite(loss):
        raise NumericalError(
            f"Non-finite loss at step {state.step} (epoch {epoch}, batch {batch_index})", where=f"step {state.step}"
        )
    sgd_update(state.params, grads, state.velocity, cfg)
    stats = {"step": state.step, "epoch": epoch, "loss": loss}
    state.step += 1
    return StepResult(loss, stats)


def predict_supervised(params: EncoderParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        acts = forward(params, to_nchw(images[start : start + batch_size]))
        out.append(np.argmax(acts.embedding @ params["cls.w"] + params["cls.b"], axis=1))
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


@dataclass
class TrainResult:
    state: Union[ContrastiveState, SupervisedState]
    log: pd.DataFrame


def _training_loop(train_set, cfg, step_fn, workers, progress, log_path, warm_up=None):
    records = []
    log_file = open(log_path, "w") if log_path is not None else None
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        if warm_up is not None:
            warm_up(pool)
        n_batches = len(train_set) // cfg.batch_size
        for epoch in range(cfg.epochs):
            batches = iter_batches(len(train_set), cfg.batch_size, cfg.seed, epoch)
            for batch_index, indices in tqdm(
                batches, total=n_batches, desc=f"Epoch {epoch}: ", ncols=80, disable=not progress
            ):
                batch = [train_set[int(i)] for i in indices]
                result = step_fn(batch, epoch, batch_index, pool)
                records.append(result.stats)
                if log_file is not None:
                    log_file.write(json.dumps(result.stats, sort_keys=True) + "\n")
    finally:
        if pool is not None:
            pool.shutdown()
        if log_file is not None:
            log_file.close()
    return pd.DataFrame.from_records(records)


def train_contrastive(
    train_set: SampleSet,
    cfg: TrainConfig,
    workers: int = 1,
    progress: bool = False,
    log_path: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """
    Train query and key encoders with the momentum-contrast objective.

    The result is a pure function of (train_set, cfg): ``workers`` only parallelises
    per-sample augmentation, and batches are reduced in a fixed order.
    """
    cfg.validate()
    state = ContrastiveState.create(cfg, channels=train_set.image_shape[2])

    def step(batch, epoch, batch_index, pool):
        return contrastive_step(state, batch, epoch, batch_index, cfg, pool)

    log = _training_loop(
        train_set, cfg, step, workers, progress, log_path, warm_up=lambda pool: warm_up_queue(state, train_set, cfg, pool)
    )
    return TrainResult(state, log)


def train_supervised(
    train_set: SampleSet,
    cfg: TrainConfig,
    workers: int = 1,
    progress: bool = False,
    log_path: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """Cross-entropy training of the encoder plus a linear head on the foreground labels."""
    cfg.validate()
    state = SupervisedState.create(cfg, train_set.config.n_fg_classes, channels=train_set.image_shape[2])

    def step(batch, epoch, batch_index, pool):
        labels = np.array([s.fg_class for s in batch])
        return supervised_step(state, batch, labels, epoch, batch_index, cfg, pool)

    log = _training_loop(train_set, cfg, step, workers, progress, log_path)
    return TrainResult(state, log)


class GradCheck(NamedTuple):
    max_rel_error: float
    n_checked: int
    worst_index: int


def grad_check(
    params: Union[EncoderParams, np.ndarray],
    loss_fn: Callable,
    eps: float = 1e-5,
    rng: Optional[np.random.Generator] = None,
    fraction: float = 0.01,
) -> GradCheck:
    """
    Compare analytic gradients against central differences.

    ``loss_fn(params)`` must return ``(loss, grads)`` with ``grads`` shaped like
    ``params``. A random ``fraction`` of the entries plus every bias entry is checked;
    the error of one entry is |a - n| / max(|a|, |n|, 1e-5).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ConfigError(f"grad_check eps must be within [1e-6, 1e-3], got {eps}")
    rng = rng if rng is not None else np.random.default_rng(0)

    if isinstance(params, EncoderParams):
        flat = params.flat()
        unflatten = params.from_flat
        biases = params.bias_indices()

        def flatten(grads):
            return grads.flat()

    else:
        flat = np.asarray(params, dtype=np.float64).ravel()
        shape = np.shape(params)

        def unflatten(vector):
            return vector.reshape(shape)

        def flatten(grads):
            return np.asarray(grads, dtype=np.float64).ravel()

        biases = np.empty(0, dtype=np.int64)

    _, grads = loss_fn(unflatten(flat.copy()))
    analytic = flatten(grads)
    n_sample = max(1, int(round(fraction * flat.size)))
    chosen = rng.choice(flat.size, size=min(n_sample, flat.size), replace=False)
    indices = np.unique(np.concatenate([chosen, biases]).astype(np.int64))

    worst, worst_index = 0.0, -1
    for i in indices:
        plus, minus = flat.copy(), flat.copy()
        plus[i] += eps
        minus[i] -= eps
        numeric = (loss_fn(unflatten(plus))[0] - loss_fn(unflatten(minus))[0]) / (2 * eps)
        err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-5)
        if err > worst:
            worst, worst_index = err, int(i)
    return GradCheck(float(worst), len(indices), worst_index)


def contrastive_loss_fn(
    q_images: np.ndarray, k_emb: np.ndarray, negatives: np.ndarray, tau: float, extra: Optional[np.ndarray] = None
) -> Callable:
    """The InfoNCE loss as a function of the query-encoder parameters, for :func:`grad_check`."""
    x = to_nchw(q_images)

    def loss_fn(params):
        acts = forward(params, x)
        result = infonce_loss(acts.embedding, k_emb, negatives, tau, extra)
        grads, _ = backward(params, acts, d_embedding=result.d_q)
        return result.loss, grads

    return loss_fn


def supervised_loss_fn(images: np.ndarray, labels: np.ndarray) -> Callable:
    x = to_nchw(images)
    labels = np.asarray(labels)

    def loss_fn(params):
        loss, grads, _ = supervised_loss(params, x, labels)
        return loss, grads

    return loss_fn


def save_checkpoint(
    directory: Union[str, Path],
    blobs: Dict[str, EncoderParams],
    meta: Dict,
    counters: Optional[Dict[str, np.ndarray]] = None,
) -> Path:
    """
    Write ``checkpoint.json`` plus one flat little-endian float32 file per blob and one
    little-endian int64 file per counter array.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for blob_name, params in blobs.items():
        entries, offset = [], 0
        for name, value in params.items():
            entries.append({"name": name, "shape": list(value.shape), "offset": offset})
            offset += value.size * 4
        flat = params.flat() if len(params) else np.empty(0)
        flat.astype("<f4").tofile(directory / f"{blob_name}.bin")
        index[blob_name] = {"file": f"{blob_name}.bin", "entries": entries, "n_bytes": offset}
    counter_index = {}
    for name, values in (counters or {}).items():
        np.asarray(values, dtype="<i8").tofile(directory / f"{name}.bin")
        counter_index[name] = {"file": f"{name}.bin", "shape": list(np.shape(values))}
    manifest = {"version": CHECKPOINT_VERSION, "blobs": index, "counters": counter_index, **meta}
    with open(directory / "checkpoint.json", "w") as output:
        json.dump(manifest, output, indent=1, sort_keys=True)
    return directory


class Checkpoint(NamedTuple):
    meta: Dict
    blobs: Dict[str, EncoderParams]
    counters: Dict[str, np.ndarray]


def load_checkpoint(directory: Union[str, Path]) -> Checkpoint:
    directory = Path(directory)
    manifest_file = directory / "checkpoint.json"
    if not manifest_file.exists():
        raise IntegrityError(f"No checkpoint.json in {directory}")
    with open(manifest_file) as source:
        manifest = json.load(source)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise IntegrityError(f"Unsupported checkpoint version {manifest.get('version')}")

    blobs = {}
    for blob_name, info in manifest.pop("blobs").items():
        data = np.fromfile(directory / info["file"], dtype="<f4")
        if data.size * 4 != info["n_bytes"]:
            raise IntegrityError(f"{info['file']} holds {data.size * 4} bytes, expected {info['n_bytes']}")
        params = EncoderParams()
        for entry in info["entries"]:
            start = entry["offset"] // 4
            size = int(np.prod(entry["shape"], dtype=np.int64))
            params[entry["name"]] = data[start : start + size].astype(np.float64).reshape(entry["shape"])
        blobs[blob_name] = params

    counters = {}
    for name, info in manifest.pop("counters", {}).items():
        values = np.fromfile(directory / info["file"], dtype="<i8")
        if values.size != int(np.prod(info["shape"], dtype=np.int64)):
            raise IntegrityError(f"{info['file']} holds {values.size} counters, expected shape {info['shape']}")
        counters[name] = values.astype(np.int64).reshape(info["shape"])
    return Checkpoint(manifest, blobs, counters)


def save_training(directory: Union[str, Path], result: TrainResult, cfg: TrainConfig, config_dict: Dict) -> Path:
    """Checkpoint of a finished run; the encoder to evaluate is stored as ``encoder``."""
    state = result.state
    meta = {"objective": cfg.objective, "seed": cfg.seed, "step": state.step, "config": config_dict}
    if isinstance(state, ContrastiveState):
        meta["queue_ptr"] = state.queue.ptr
        blobs = {
            "encoder": state.theta_q,
            "key_encoder": state.theta_k,
            "velocity": state.velocity,
            "queue": EncoderParams(keys=state.queue.keys),
        }
        return save_checkpoint(directory, blobs, meta, {"queue_origin": state.queue.origin})
    return save_checkpoint(directory, {"encoder": state.params, "velocity": state.velocity}, meta)


def load_encoder(directory: Union[str, Path]) -> EncoderParams:
    return load_checkpoint(directory).blobs["encoder"]
