"""
Synthetic shapes-on-textures datasets with a tunable foreground/background correlation,
their backgrounds-challenge evaluation splits and their on-disk layout.
"""
import colorsys
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage
from tqdm import tqdm
from typing_extensions import Literal

from .errors import ConfigError, IntegrityError, RejectedInputError
from .imgcore import bounding_box, composite, tiled_background

logger = logging.getLogger(__name__)

SHAPES = ("disc", "square", "triangle", "cross", "annulus", "bar")
TEXTURES = ("stripes", "checker", "gradient", "noise")

SPLIT_NAMES = (
    "Original",
    "Only-FG",
    "Only-BG-B",
    "Only-BG-T",
    "Mixed-Same",
    "Mixed-Rand",
    "Mixed-Next",
)
NO_FG = "No-FG"

FORMAT_VERSION = 1
_SPLIT_CODES = {"train": 1, "test": 2}
_MIN_FG, _MAX_FG = 0.05, 0.6

DonorKey = Literal["bg_class", "fg_class"]


@dataclass
class SynthConfig:
    n_fg_classes: int = 4
    n_bg_classes: int = 4
    image_size: int = 32
    correlation: float = 0.95
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0

    def validate(self):
        if self.n_fg_classes < 2:
            raise ConfigError("synth.n_fg_classes must be >= 2")
        if self.n_bg_classes < 2:
            raise ConfigError("synth.n_bg_classes must be >= 2")
        if self.image_size < 16:
            raise ConfigError("synth.image_size must be >= 16")
        if not 0.0 <= self.correlation <= 1.0:
            raise ConfigError("synth.correlation must be within [0, 1]")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("synth.n_train and synth.n_test must be >= 1")

    def paired(self, fg_class):
        """The background class that co-occurs with ``fg_class`` under the correlation."""
        return fg_class % self.n_bg_classes

    @property
    def fg_names(self) -> List[str]:
        return _class_names(SHAPES, self.n_fg_classes)

    @property
    def bg_names(self) -> List[str]:
        return _class_names(TEXTURES, self.n_bg_classes)


def _class_names(base, n):
    names = []
    for c in range(n):
        name = base[c % len(base)]
        if c >= len(base):
            name = f"{name}-{c // len(base)}"
        names.append(name)
    return names


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    tiled_bg: np.ndarray
    fg_class: int
    bg_class: int
    id: int = 0


@dataclass
class SampleSet:
    """
    A split of a dataset held as stacked arrays.

    Behaves like a read-only list of :class:`Sample`.
    """

    images: np.ndarray
    masks: np.ndarray
    tiled: np.ndarray
    fg_classes: np.ndarray
    bg_classes: np.ndarray
    config: SynthConfig
    split: str = "train"

    def __len__(self):
        return len(self.fg_classes)

    def __getitem__(self, i) -> Sample:
        return Sample(
            image=self.images[i],
            mask=self.masks[i],
            tiled_bg=self.tiled[i],
            fg_class=int(self.fg_classes[i]),
            bg_class=int(self.bg_classes[i]),
            id=int(i),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @classmethod
    def from_samples(cls, samples: List[Sample], config: SynthConfig, split: str):
        return cls(
            images=np.stack([s.image for s in samples]).astype(np.float32),
            masks=np.stack([s.mask for s in samples]).astype(np.uint8),
            tiled=np.stack([s.tiled_bg for s in samples]).astype(np.float32),
            fg_classes=np.array([s.fg_class for s in samples], dtype=np.int64),
            bg_classes=np.array([s.bg_class for s in samples], dtype=np.int64),
            config=config,
            split=split,
        )


def _palette(c: int, hue_offset: float, saturation: float, value: float) -> np.ndarray:
    # golden-ratio hue spacing keeps neighbouring classes apart
    hue = (hue_offset + c * 0.618033988749895) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, saturation, value))


def _shape_support(kind: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if kind == 0:
        return u**2 + v**2 <= 1.0
    if kind == 1:
        return np.maximum(np.abs(u), np.abs(v)) <= 0.8
    if kind == 2:
        return (v <= 0.8) & (v >= 2.0 * np.abs(u) - 1.0)
    if kind == 3:
        return ((np.abs(u) <= 0.3) & (np.abs(v) <= 1.0)) | (
            (np.abs(v) <= 0.3) & (np.abs(u) <= 1.0)
        )
    if kind == 4:
        r2 = u**2 + v**2
        return (r2 >= 0.5) & (r2 <= 1.0)
    return (np.abs(u) <= 1.0) & (np.abs(v) <= 0.3)


def _render_background(rng, bg_class, size, yy, xx) -> np.ndarray:
    kind = bg_class % len(TEXTURES)
    angle = rng.uniform(0, math.pi)
    proj = xx * math.cos(angle) + yy * math.sin(angle)
    if kind == 0:
        period = size / (3.0 + bg_class % 3)
        t = 0.5 + 0.5 * np.sin(2 * math.pi * proj / period + rng.uniform(0, 2 * math.pi))
    elif kind == 1:
        cell = max(2, size // (4 + bg_class % 3))
        oy, ox = rng.integers(0, cell, size=2)
        t = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
    elif kind == 2:
        t = np.clip(proj / (size * math.sqrt(2)) + 0.5 * rng.uniform(0.5, 1.5), 0, 1)
    else:
        noise = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 12)
        t = (noise - noise.min()) / max(noise.max() - noise.min(), 1e-12)

    light = _palette(bg_class, 0.33, 0.55, 0.85)
    dark = _palette(bg_class, 0.33, 0.55, 0.35)
    return light * (1 - t[..., None]) + dark * t[..., None]


def gen_sample(
    rng: np.random.Generator, fg_class: int, bg_class: int, size: int, sample_id: int = 0
) -> Sample:
    """
    Render one class-specific shape over one class-specific background texture.

    The shape kind cycles with the foreground class, the texture kind with the
    background class; position, scale and orientation are random. Placements whose
    foreground covers less than 5% or more than 60% of the image are redrawn.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    for _ in range(1000):
        cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
        radius = size * rng.uniform(0.15, 0.35)
        theta = rng.uniform(0, 2 * math.pi)
        du, dv = xx - cx, yy - cy
        u = (du * math.cos(theta) + dv * math.sin(theta)) / radius
        v = (-du * math.sin(theta) + dv * math.cos(theta)) / radius
        support = _shape_support(fg_class % len(SHAPES), u, v)
        if _MIN_FG <= support.mean() <= _MAX_FG:
            break
    else:
        raise RejectedInputError(f"Could not place a foreground of class {fg_class} in a {size}px image")

    background = _render_background(rng, bg_class, size, yy, xx)
    frequency = 1.0 + fg_class % 3
    shading = 0.75 + 0.25 * np.sin(2 * math.pi * frequency * u + rng.uniform(0, 2 * math.pi))
    foreground = _palette(fg_class, 0.0, 0.9, 0.95) * shading[..., None]

    mask = support.astype(np.uint8)
    image = composite(foreground, mask, background)
    image = image + rng.normal(scale=0.02, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(
        image=image,
        mask=mask,
        tiled_bg=tiled_background(image, mask),
        fg_class=int(fg_class),
        bg_class=int(bg_class),
        id=int(sample_id),
    )


def sample_labels(
    rng: np.random.Generator, n: int, cfg: SynthConfig, correlation: Optional[float]
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw (fg_class, bg_class) labels. With a correlation ρ the background is the class
    paired with the foreground with probability ρ, otherwise uniform over the other
    background classes. ``correlation=None`` draws backgrounds independently.
    """
    fg = rng.integers(0, cfg.n_fg_classes, size=n)
    if correlation is None:
        return fg, rng.integers(0, cfg.n_bg_classes, size=n)
    paired = cfg.paired(fg)
    keep = rng.random(n) < correlation
    other = rng.integers(0, cfg.n_bg_classes - 1, size=n)
    other = other + (other >= paired)
    return fg, np.where(keep, paired, other)


def _generate_split(cfg: SynthConfig, split: str, n: int, workers: int, progress: bool):
    code = _SPLIT_CODES[split]
    label_rng = np.random.default_rng([cfg.seed, code, 0, 0])
    correlation = cfg.correlation if split == "train" else None
    fg, bg = sample_labels(label_rng, n, cfg, correlation)

    def render(i):
        rng = np.random.default_rng([cfg.seed, code, 1, i])
        return gen_sample(rng, int(fg[i]), int(bg[i]), cfg.image_size, sample_id=i)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        samples = list(
            tqdm(
                pool.map(render, range(n)),
                total=n,
                desc=f"Rendering {split}: ",
                ncols=80,
                disable=not progress,
            )
        )
    return SampleSet.from_samples(samples, cfg, split)


def gen_dataset(
    cfg: SynthConfig, workers: int = 1, progress: bool = False
) -> Tuple[SampleSet, SampleSet]:
    """
    Generate the train and test splits.

    Train labels follow the configured correlation; test backgrounds are drawn
    independently of the foreground. Every sample is rendered from its own seed, so
    the result does not depend on ``workers``.
    """
    cfg.validate()
    train = _generate_split(cfg, "train", cfg.n_train, workers, progress)
    test = _generate_split(cfg, "test", cfg.n_test, workers, progress)
    return train, test


@dataclass
class ChallengeSplit:
    name: str
    images: np.ndarray
    labels: np.ndarray
    donors: Optional[np.ndarray] = None
    flags: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)


def _pick_donor(rng, candidates, own):
    candidates = candidates[candidates != own]
    if candidates.size == 0:
        return None
    return int(candidates[rng.integers(0, candidates.size)])


def gen_challenge_splits(
    test: SampleSet,
    seed: int = 0,
    donor_key: DonorKey = "bg_class",
    include_no_fg: bool = False,
) -> Dict[str, ChallengeSplit]:
    """
    Build the backgrounds-challenge splits from a test set that carries masks and
    tiled backgrounds.

    Background donors for Mixed-Same and Mixed-Next are chosen by ``donor_key``:
    ``"bg_class"`` takes an image whose background class is the one paired with the
    (same or next) foreground class, ``"fg_class"`` an image of that foreground class.
    Mixed-Rand uses any other image. Donor choice is deterministic given ``seed``.

    A sample without a Mixed-Same donor keeps its own tiled background; one without a
    Mixed-Next donor falls back to a random donor. Both cases are flagged.
    """
    if len(test) == 0:
        raise ValueError("The test set is empty")
    cfg = test.config
    n = len(test)
    labels = test.fg_classes.copy()
    indices = np.arange(n)
    keys = test.bg_classes if donor_key == "bg_class" else test.fg_classes

    def group_of(c):
        target = cfg.paired(c) if donor_key == "bg_class" else c
        return indices[keys == target]

    splits = {
        "Original": ChallengeSplit("Original", test.images.copy(), labels.copy()),
        "Only-FG": ChallengeSplit(
            "Only-FG",
            np.stack(
                [composite(s.image, s.mask, np.zeros_like(s.image)) for s in test]
            ),
            labels.copy(),
        ),
        "Only-BG-T": ChallengeSplit("Only-BG-T", test.tiled.copy(), labels.copy()),
    }

    boxed = test.images.copy()
    for i in range(n):
        box = bounding_box(test.masks[i])
        if box is not None:
            top, bottom, left, right = box
            boxed[i, top:bottom, left:right] = 0.0
    splits["Only-BG-B"] = ChallengeSplit("Only-BG-B", boxed, labels.copy())

    rng = np.random.default_rng([seed, 7])
    for name in ("Mixed-Same", "Mixed-Rand", "Mixed-Next"):
        images = np.empty_like(test.images)
        donors = np.full(n, -1, dtype=np.int64)
        flags = []
        for i in range(n):
            fg = int(test.fg_classes[i])
            if name == "Mixed-Same":
                donor = _pick_donor(rng, group_of(fg), i)
            elif name == "Mixed-Next":
                donor = _pick_donor(rng, group_of((fg + 1) % cfg.n_fg_classes), i)
                if donor is None:
                    donor = _pick_donor(rng, indices, i)
                    flags.append(f"{name}: sample {i} has no next-class donor, using a random one")
            else:
                donor = _pick_donor(rng, indices, i)

            if donor is None:
                flags.append(f"{name}: sample {i} has no donor, reusing its own tiled background")
                background = test.tiled[i]
            else:
                donors[i] = donor
                background = test.tiled[donor]
            images[i] = composite(test.images[i], test.masks[i], background)
        for flag in flags:
            logger.warning(flag)
        splits[name] = ChallengeSplit(name, images, labels.copy(), donors, flags)

    if include_no_fg:
        cut = np.stack(
            [composite(np.zeros_like(s.tiled_bg), s.mask, s.tiled_bg) for s in test]
        )
        splits[NO_FG] = ChallengeSplit(NO_FG, cut, labels.copy())

    order = SPLIT_NAMES + ((NO_FG,) if include_no_fg else ())
    return {name: splits[name] for name in order}


def save_dataset(samples: SampleSet, directory: Union[str, Path]) -> Path:
    """
    Write a split as ``manifest.json`` plus flat little-endian ``images.bin``,
    ``masks.bin`` (one byte per pixel) and ``tiled.bin``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h, w, c = samples.image_shape
    image_bytes = h * w * c * 4
    mask_bytes = h * w

    records = [
        {
            "id": i,
            "fg_class": int(samples.fg_classes[i]),
            "bg_class": int(samples.bg_classes[i]),
            "image_offset": i * image_bytes,
            "mask_offset": i * mask_bytes,
            "tiled_offset": i * image_bytes,
        }
        for i in range(len(samples))
    ]
    manifest = {
        "format_version": FORMAT_VERSION,
        "split": samples.split,
        "config": asdict(samples.config),
        "class_names": {"fg": samples.config.fg_names, "bg": samples.config.bg_names},
        "image_shape": [h, w, c],
        "samples": records,
    }
    samples.images.astype("<f4").tofile(directory / "images.bin")
    samples.masks.astype(np.uint8).tofile(directory / "masks.bin")
    samples.tiled.astype("<f4").tofile(directory / "tiled.bin")
    with open(directory / "manifest.json", "w") as output:
        json.dump(manifest, output, indent=1)
    return directory


def _read_block(path: Path, dtype, offsets, count, shape, what):
    data = np.fromfile(path, dtype=dtype)
    needed = (max(offsets) // np.dtype(dtype).itemsize + count) if offsets else 0
    if data.size < needed:
        raise IntegrityError(f"{path} holds {data.size} values, the manifest needs {needed}")
    out = np.empty((len(offsets),) + shape, dtype=dtype)
    for i, offset in enumerate(offsets):
        if offset % np.dtype(dtype).itemsize:
            raise IntegrityError(f"Misaligned {what} offset for record {i}")
        start = offset // np.dtype(dtype).itemsize
        out[i] = data[start : start + count].reshape(shape)
    return out


def load_dataset(directory: Union[str, Path], external: bool = False) -> SampleSet:
    """
    Load a split written by :func:`save_dataset`.

    ``external=True`` accepts user-supplied data in the same layout: the manifest may
    omit ``config`` (class counts are inferred from the labels) and ``tiled.bin`` may be
    missing, in which case tiled backgrounds are computed from the supplied masks.
    """
    directory = Path(directory)
    manifest_file = directory / "manifest.json"
    if not manifest_file.exists():
        raise IntegrityError(f"No manifest.json in {directory}")
    try:
        with open(manifest_file) as source:
            manifest = json.load(source)
    except json.JSONDecodeError as error:
        raise IntegrityError(f"{manifest_file} is not valid JSON: {error}") from error
    if not isinstance(manifest, dict):
        raise IntegrityError(f"{manifest_file} must hold a JSON object")

    try:
        records = manifest["samples"]
        h, w, c = (int(v) for v in manifest["image_shape"])
        fg = np.array([r["fg_class"] for r in records], dtype=np.int64)
        bg = np.array([r["bg_class"] for r in records], dtype=np.int64)
        image_offsets = [r["image_offset"] for r in records]
        mask_offsets = [r["mask_offset"] for r in records]
        tiled_offsets = [r.get("tiled_offset") for r in records]
    except KeyError as error:
        raise IntegrityError(f"{manifest_file} is missing the key {error.args[0]!r}") from error
    except (TypeError, ValueError) as error:
        raise IntegrityError(f"{manifest_file} is malformed: {error}") from error
    if not records:
        raise IntegrityError(f"{manifest_file} lists no samples")

    if "config" in manifest:
        try:
            config = SynthConfig(**manifest["config"])
        except TypeError as error:
            raise IntegrityError(f"{manifest_file} has an invalid config section: {error}") from error
    elif external:
        config = SynthConfig(
            n_fg_classes=max(2, int(fg.max()) + 1),
            n_bg_classes=max(2, int(bg.max()) + 1),
            image_size=h,
            correlation=0.0,
            n_train=len(records),
            n_test=len(records),
        )
    else:
        raise IntegrityError(f"{manifest_file} has no config section")

    images = _read_block(directory / "images.bin", "<f4", image_offsets, h * w * c, (h, w, c), "image")
    masks = _read_block(directory / "masks.bin", np.uint8, mask_offsets, h * w, (h, w), "mask")
    if np.any(masks > 1):
        raise IntegrityError(f"{directory / 'masks.bin'} contains values other than 0/1")

    tiled_file = directory / "tiled.bin"
    if tiled_file.exists():
        if any(offset is None for offset in tiled_offsets):
            raise IntegrityError(f"{manifest_file} is missing the key 'tiled_offset'")
        tiled = _read_block(tiled_file, "<f4", tiled_offsets, h * w * c, (h, w, c), "tiled")
    elif external:
        logger.info("No tiled.bin in %s, computing tiled backgrounds", directory)
        tiled = np.stack([tiled_background(img, m) for img, m in zip(images, masks)])
    else:
        raise IntegrityError(f"Missing {tiled_file}")

    return SampleSet(
        images=images.astype(np.float32),
        masks=masks,
        tiled=tiled.astype(np.float32),
        fg_classes=fg,
        bg_classes=bg,
        config=config,
        split=manifest.get("split", "train"),
    )
