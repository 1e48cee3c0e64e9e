"""
A small normalisation-free convolutional encoder with hand-written backpropagation.

Layout: three 3x3 stride-2 convolutions with tanh, global average pooling (the
"backbone" features), a two-layer projection head and L2 normalisation of the output
embedding. Everything runs in float64 on NCHW arrays.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from typing_extensions import Literal

from .errors import NumericalError, RejectedInputError

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-8

Representation = Literal["backbone", "embedding"]


class EncoderParams(OrderedDict):
    """
    Named parameter arrays in a fixed order, e.g. ``conv1.w`` or ``head2.b``.
    """

    def copy(self) -> "EncoderParams":
        return EncoderParams((name, value.copy()) for name, value in self.items())

    def zeros_like(self) -> "EncoderParams":
        return EncoderParams((name, np.zeros_like(value)) for name, value in self.items())

    def flat(self) -> np.ndarray:
        return np.concatenate([value.ravel() for value in self.values()])

    def from_flat(self, vector: np.ndarray) -> "EncoderParams":
        """Arrays shaped like ``self`` read from a flat vector."""
        out = EncoderParams()
        start = 0
        for name, value in self.items():
            out[name] = np.asarray(vector[start : start + value.size], dtype=np.float64).reshape(value.shape)
            start += value.size
        if start != len(vector):
            raise RejectedInputError(f"Expected {start} parameters, got {len(vector)}")
        return out

    def bias_indices(self) -> np.ndarray:
        indices, start = [], 0
        for name, value in self.items():
            if name.endswith(".b"):
                indices.append(np.arange(start, start + value.size))
            start += value.size
        return np.concatenate(indices) if indices else np.empty(0, dtype=np.int64)

    @property
    def conv_layers(self) -> List[str]:
        return sorted({name.split(".")[0] for name in self if name.startswith("conv")}, key=lambda n: int(n[4:]))

    @property
    def n_values(self) -> int:
        return sum(value.size for value in self.values())


def init_params(
    rng: np.random.Generator,
    channels: int = 3,
    widths: Sequence[int] = (16, 32, 64),
    hidden: int = 64,
    emb_dim: int = 32,
) -> EncoderParams:
    params = EncoderParams()
    c_in = channels
    for i, width in enumerate(widths, start=1):
        params[f"conv{i}.w"] = rng.normal(0.0, 1.0 / np.sqrt(9 * c_in), size=(width, c_in, 3, 3))
        params[f"conv{i}.b"] = np.zeros(width)
        c_in = width
    params["head1.w"] = rng.normal(0.0, 1.0 / np.sqrt(c_in), size=(c_in, hidden))
    params["head1.b"] = np.zeros(hidden)
    params["head2.w"] = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, emb_dim))
    params["head2.b"] = np.zeros(emb_dim)
    return params


def to_nchw(images: np.ndarray) -> np.ndarray:
    """(H, W, C) or (N, H, W, C) images as a float64 (N, C, H, W) batch."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise RejectedInputError(f"Expected (N, H, W, C) images, got shape {x.shape}")
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _out_size(n: int) -> int:
    return (n - 1) // 2 + 1


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 convolution, stride 2, zero padding 1."""
    n, _, h, wd = x.shape
    ho, wo = _out_size(h), _out_size(wd)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.empty((n, w.shape[0], ho, wo))
    out[...] = b[None, :, None, None]
    for a in range(3):
        for c in range(3):
            patch = xp[:, :, a : a + 2 * ho : 2, c : c + 2 * wo : 2]
            out += np.einsum("nchw,fc->nfhw", patch, w[:, :, a, c])
    return out


def conv_backward(
    dout: np.ndarray, x: np.ndarray, w: np.ndarray, need_dx: bool = True
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    _, _, ho, wo = dout.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dxp = np.zeros_like(xp) if need_dx else None
    dw = np.empty_like(w)
    for a in range(3):
        for c in range(3):
            patch = xp[:, :, a : a + 2 * ho : 2, c : c + 2 * wo : 2]
            dw[:, :, a, c] = np.einsum("nfhw,nchw->fc", dout, patch)
            if need_dx:
                dxp[:, :, a : a + 2 * ho : 2, c : c + 2 * wo : 2] += np.einsum("nfhw,fc->nchw", dout, w[:, :, a, c])
    db = dout.sum(axis=(0, 2, 3))
    dx = dxp[:, :, 1:-1, 1:-1] if need_dx else None
    return dw, db, dx


def _check(name: str, value: np.ndarray):
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"Non-finite values in layer {name}", where=name)


def _normalize(z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return z / np.maximum(norms, NORM_FLOOR), norms


def _normalize_backward(d: np.ndarray, y: np.ndarray, norms: np.ndarray) -> np.ndarray:
    floored = np.maximum(norms, NORM_FLOOR)
    grad = d / floored
    # the floored branch is linear, only the true normalisation has the projection term
    projection = y * np.sum(y * d, axis=1, keepdims=True) / floored
    return grad - np.where(norms > NORM_FLOOR, projection, 0.0)


@dataclass
class Activations:
    inputs: List[np.ndarray]
    outputs: List[np.ndarray]
    pooled: np.ndarray
    hidden: np.ndarray
    projection: np.ndarray
    embedding: np.ndarray
    embedding_norm: np.ndarray
    backbone: np.ndarray
    backbone_norm: np.ndarray

    def output(self, representation: Representation = "embedding") -> np.ndarray:
        return self.embedding if representation == "embedding" else self.backbone

    @property
    def guarded(self) -> np.ndarray:
        """Rows whose pre-normalisation norm fell below the floor."""
        return self.embedding_norm[:, 0] <= NORM_FLOOR


def forward(params: EncoderParams, x: np.ndarray) -> Activations:
    """
    Run the encoder on an NCHW batch, keeping what :func:`backward` needs.
    Raises :class:`NumericalError` naming the first layer with non-finite output.
    """
    _check("input", x)
    conv_layers = params.conv_layers
    if x.shape[1] != params[f"{conv_layers[0]}.w"].shape[1]:
        raise RejectedInputError(
            f"Encoder expects {params[f'{conv_layers[0]}.w'].shape[1]} channels, got {x.shape[1]}"
        )
    inputs, outputs = [], []
    h = x
    for layer in conv_layers:
        inputs.append(h)
        h = np.tanh(conv_forward(h, params[f"{layer}.w"], params[f"{layer}.b"]))
        _check(layer, h)
        outputs.append(h)

    pooled = h.mean(axis=(2, 3))
    hidden = np.tanh(pooled @ params["head1.w"] + params["head1.b"])
    _check("head1", hidden)
    projection = hidden @ params["head2.w"] + params["head2.b"]
    _check("head2", projection)

    embedding, embedding_norm = _normalize(projection)
    backbone, backbone_norm = _normalize(pooled)
    return Activations(inputs, outputs, pooled, hidden, projection, embedding, embedding_norm, backbone, backbone_norm)


def backward(
    params: EncoderParams,
    acts: Activations,
    d_embedding: Optional[np.ndarray] = None,
    d_backbone: Optional[np.ndarray] = None,
    input_grad: bool = False,
) -> Tuple[EncoderParams, Optional[np.ndarray]]:
    """
    Gradients of a scalar loss given its gradient w.r.t. the normalised embedding
    and/or the normalised backbone features.

    Returns parameter gradients shaped like ``params`` (entries the encoder does not
    use stay zero) and, with ``input_grad``, the NCHW input gradient.
    """
    grads = params.zeros_like()
    d_pooled = np.zeros_like(acts.pooled)

    if d_embedding is not None:
        d_proj = _normalize_backward(d_embedding, acts.embedding, acts.embedding_norm)
        grads["head2.w"] = acts.hidden.T @ d_proj
        grads["head2.b"] = d_proj.sum(axis=0)
        d_pre = (d_proj @ params["head2.w"].T) * (1.0 - acts.hidden**2)
        grads["head1.w"] = acts.pooled.T @ d_pre
        grads["head1.b"] = d_pre.sum(axis=0)
        d_pooled += d_pre @ params["head1.w"].T
    if d_backbone is not None:
        d_pooled += _normalize_backward(d_backbone, acts.backbone, acts.backbone_norm)

    last = acts.outputs[-1]
    dh = np.broadcast_to(d_pooled[:, :, None, None] / (last.shape[2] * last.shape[3]), last.shape)
    conv_layers = params.conv_layers
    for i in reversed(range(len(conv_layers))):
        layer = conv_layers[i]
        dz = dh * (1.0 - acts.outputs[i] ** 2)
        need_dx = i > 0 or input_grad
        dw, db, dh = conv_backward(dz, acts.inputs[i], params[f"{layer}.w"], need_dx=need_dx)
        grads[f"{layer}.w"] = dw
        grads[f"{layer}.b"] = db
    return grads, (dh if input_grad else None)


def encode(params: EncoderParams, image: np.ndarray, representation: Representation = "embedding") -> np.ndarray:
    """
    Unit-norm embedding of one (H, W, C) image, or of each image in an (N, H, W, C) batch.
    """
    single = np.ndim(image) == 3
    acts = forward(params, to_nchw(image))
    if representation == "embedding" and np.any(acts.guarded):
        logger.warning("Embedding norm fell below %g for %d image(s)", NORM_FLOOR, int(acts.guarded.sum()))
    out = acts.output(representation)
    return out[0] if single else out


def features(
    params: EncoderParams,
    images: np.ndarray,
    representation: Representation = "embedding",
    batch_size: int = 256,
) -> np.ndarray:
    """Encoded features for a stack of images, computed in chunks."""
    chunks = [
        forward(params, to_nchw(images[start : start + batch_size])).output(representation)
        for start in range(0, len(images), batch_size)
    ]
    if not chunks:
        return np.empty((0, 0))
    return np.concatenate(chunks)
