"""
View augmentation: the standard crop/flip/colour suite plus the three background
augmentations (removal, randomisation, swaps with matched negatives).

Background augmentations always run after the standard ones. All randomness comes
from streams derived statelessly from (global seed, epoch, sample id, stream tag), so
augmenting samples in any order or on any number of workers gives the same result.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from typing_extensions import Literal

from .errors import ConfigError, RejectedInputError
from .imgcore import (
    CropParams,
    MaskCorruption,
    adjust_brightness_contrast,
    apply_crop,
    apply_crop_mask,
    bounding_box,
    center_crop_params,
    composite,
    fill_grayscale,
    hflip_image,
    sample_mask_corruption,
    sample_rrc,
    to_grayscale,
    transform_mask,
)
from .synthgen import Sample

logger = logging.getLogger(__name__)

BgMode = Literal["none", "bg_rm", "bg_random", "bg_swaps"]
NegConstruction = Literal["paste_fg_on_query_bg", "literal_formula"]
MatchTarget = Literal["query", "positive"]
CropMode = Literal["rrc", "center"]

_MASK64 = (1 << 64) - 1

STREAM_TAGS = {
    "q_view": 1,
    "k_view": 2,
    "bg_decision_q": 3,
    "bg_decision_k": 4,
    "neg_decision": 5,
    "neg_view": 6,
    "corruption_q": 7,
    "corruption_k": 8,
    "donor": 9,
    "shuffle": 10,
    "random_negative": 11,
    "single_view": 12,
}


@dataclass
class AugConfig:
    mode: BgMode = "none"
    p_pos: float = 0.2
    p_neg: float = 0.2
    p_remove: float = 0.2
    fg_min: float = 0.1
    max_tries: int = 10
    corruption: Optional[MaskCorruption] = None
    aug_in_query: bool = True
    aug_in_key: bool = True
    enqueue_augmented_keys: bool = True
    match_target: MatchTarget = "query"
    couple_neg_to_key: bool = False
    n_matched: int = 1
    neg_construction: NegConstruction = "paste_fg_on_query_bg"
    scale: Tuple[float, float] = (0.2, 1.0)
    ratio: Tuple[float, float] = (3 / 4, 4 / 3)
    hflip_prob: float = 0.5
    jitter_strength: float = 0.4
    grayscale_prob: float = 0.2
    crop_mode: CropMode = "rrc"

    def validate(self):
        choices = {
            "mode": ("none", "bg_rm", "bg_random", "bg_swaps"),
            "match_target": ("query", "positive"),
            "neg_construction": ("paste_fg_on_query_bg", "literal_formula"),
            "crop_mode": ("rrc", "center"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"aug.{key} must be one of {allowed}, got {getattr(self, key)!r}")
        for key in ("p_pos", "p_neg", "p_remove", "hflip_prob", "grayscale_prob", "fg_min"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(f"aug.{key} must be within [0, 1]")
        if self.n_matched < 1:
            raise ConfigError("aug.n_matched must be >= 1")
        if self.max_tries < 1:
            raise ConfigError("aug.max_tries must be >= 1")
        if not 0 < self.scale[0] <= self.scale[1] <= 1:
            raise ConfigError("aug.scale must satisfy 0 < lo <= hi <= 1")
        if self.ratio[0] > self.ratio[1]:
            raise ConfigError("aug.ratio must satisfy lo <= hi")
        if self.jitter_strength < 0:
            raise ConfigError("aug.jitter_strength must be >= 0")
        if self.corruption is not None:
            try:
                self.corruption.validate()
            except RejectedInputError as error:
                raise ConfigError(f"aug.{error}") from error

    @property
    def background_prob(self) -> float:
        return self.p_remove if self.mode == "bg_rm" else self.p_pos


def seed_words(*values: int) -> List[int]:
    """Each value as two 32-bit words (two's complement), so every tuple has one encoding."""
    words = []
    for value in values:
        value = int(value) & _MASK64
        words += [value & 0xFFFFFFFF, value >> 32]
    return words


def derive_rng(global_seed: int, epoch: int, sample_id: int, stream_tag: str) -> np.random.Generator:
    """
    A generator seeded by a :class:`numpy.random.SeedSequence` over the four inputs.
    Streams with different tags never share a seed, and nothing here depends on call order.
    """
    if stream_tag not in STREAM_TAGS:
        raise ValueError(f"Unknown stream tag {stream_tag!r}, choose from {sorted(STREAM_TAGS)}")
    return np.random.default_rng(seed_words(global_seed, epoch, sample_id, STREAM_TAGS[stream_tag]))


class SampleStreams:
    """
    The named random streams of one sample in one epoch, derived lazily.
    """

    def __init__(self, global_seed: int, epoch: int, sample_id: int):
        self.global_seed = global_seed
        self.epoch = epoch
        self.sample_id = sample_id
        self._streams: Dict[str, np.random.Generator] = {}

    def __getitem__(self, tag: str) -> np.random.Generator:
        if tag not in self._streams:
            self._streams[tag] = self.fresh(tag)
        return self._streams[tag]

    def fresh(self, tag: str) -> np.random.Generator:
        """A new generator replaying ``tag`` from its start."""
        return derive_rng(self.global_seed, self.epoch, self.sample_id, tag)


@dataclass
class ViewTransform:
    """
    The sampled parameters of one standard view, replayable on any aligned image.
    """

    crop: CropParams
    hflip: bool = False
    color: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    grayscale: bool = False

    def apply(self, img: np.ndarray) -> np.ndarray:
        out = apply_crop(img, self.crop)
        if self.hflip:
            out = hflip_image(out)
        if self.color:
            out = adjust_brightness_contrast(out, self.brightness, self.contrast)
            if self.grayscale:
                out = to_grayscale(out)
        return out

    def apply_mask(self, mask: np.ndarray) -> np.ndarray:
        out = apply_crop_mask(mask, self.crop)
        if self.hflip:
            out = out[:, ::-1].copy()
        return out


class View(NamedTuple):
    image: np.ndarray
    mask: np.ndarray
    transform: ViewTransform


class BgResult(NamedTuple):
    image: np.ndarray
    applied: bool
    background: Optional[np.ndarray] = None
    fallback: bool = False


@dataclass
class ViewPair:
    q_view: np.ndarray
    k_view: np.ndarray
    q_bg_donor: Optional[int] = None
    k_bg_donor: Optional[int] = None
    q_was_bg_augmented: bool = False
    k_was_bg_augmented: bool = False
    q_mask: Optional[np.ndarray] = None
    k_mask: Optional[np.ndarray] = None
    q_background: Optional[np.ndarray] = None
    k_background: Optional[np.ndarray] = None
    q_transform: Optional[ViewTransform] = None
    k_transform: Optional[ViewTransform] = None
    # the key view before any background augmentation
    k_plain: Optional[np.ndarray] = None
    flags: List[str] = field(default_factory=list)


@dataclass
class DonorPlan:
    """
    Batch positions of the samples each batch member borrows from; -1 means none.
    """

    q: np.ndarray
    k: np.ndarray
    negatives: np.ndarray
    random_negatives: np.ndarray


def assign_donors(batch_size: int, rng: np.random.Generator, n_matched: int = 1) -> DonorPlan:
    """
    Choose background donors and negative sources for a whole batch at once.
    Query and key donors differ whenever the batch has at least three samples.
    """
    q = np.full(batch_size, -1, dtype=np.int64)
    k = np.full(batch_size, -1, dtype=np.int64)
    negatives = np.full((batch_size, n_matched), -1, dtype=np.int64)
    random_negatives = np.full((batch_size, n_matched), -1, dtype=np.int64)
    for i in range(batch_size):
        others = np.array([j for j in range(batch_size) if j != i], dtype=np.int64)
        if others.size == 0:
            continue
        q[i] = rng.choice(others)
        rest = others[others != q[i]]
        k[i] = rng.choice(rest) if rest.size else q[i]
        replace = others.size < n_matched
        negatives[i] = rng.choice(others, size=n_matched, replace=replace)
        random_negatives[i] = rng.choice(others, size=n_matched, replace=replace)
    return DonorPlan(q, k, negatives, random_negatives)


def sample_view_transform(
    rng: np.random.Generator, src_h: int, src_w: int, mask: Optional[np.ndarray], cfg: AugConfig
) -> ViewTransform:
    if cfg.crop_mode == "center":
        crop = center_crop_params(src_h, src_w)
    else:
        crop = sample_rrc(
            rng, src_h, src_w, cfg.scale, cfg.ratio, mask=mask, fg_min=cfg.fg_min, max_tries=cfg.max_tries
        )
    hflip = bool(rng.random() < cfg.hflip_prob)
    if cfg.jitter_strength <= 0:
        return ViewTransform(crop, hflip)
    s = cfg.jitter_strength
    brightness = float(max(0.0, rng.uniform(1 - s, 1 + s)))
    contrast = float(max(0.0, rng.uniform(1 - s, 1 + s)))
    grayscale = bool(rng.random() < cfg.grayscale_prob)
    return ViewTransform(crop, hflip, True, brightness, contrast, grayscale)


def standard_view(
    sample: Sample, rng: np.random.Generator, cfg: AugConfig, mask: Optional[np.ndarray] = None
) -> View:
    """
    fg_min-constrained RRC, horizontal flip, brightness/contrast jitter and random
    grayscale. ``mask`` overrides the sample's own mask (e.g. a corrupted copy); the
    returned mask is the crop- and flip-consistent version of it.
    """
    mask = sample.mask if mask is None else mask
    h, w = sample.image.shape[:2]
    transform = sample_view_transform(rng, h, w, mask, cfg)
    return View(transform.apply(sample.image), transform.apply_mask(mask), transform)


def apply_bg_rm(view: np.ndarray, mask: np.ndarray, rng: np.random.Generator, p_remove: float) -> BgResult:
    """
    With probability ``p_remove`` replace the background by a uniform-random gray level.
    """
    if rng.random() >= p_remove:
        return BgResult(view, False)
    intensity = float(rng.random())
    return BgResult(fill_grayscale(view, mask, intensity), True, np.full_like(view, intensity))


def apply_bg_random(
    view: np.ndarray,
    mask: np.ndarray,
    donor_tiled_bg: Optional[np.ndarray],
    rng: np.random.Generator,
    p: float,
    scale: Sequence[float] = (0.2, 1.0),
) -> BgResult:
    """
    With probability ``p`` replace the background by a random resized crop of a donor's
    tiled background. Without a donor this degrades to background removal.
    """
    if rng.random() >= p:
        return BgResult(view, False)
    if donor_tiled_bg is None:
        logger.warning("No background donor available, falling back to background removal")
        intensity = float(rng.random())
        return BgResult(fill_grayscale(view, mask, intensity), True, np.full_like(view, intensity), True)
    h, w = donor_tiled_bg.shape[:2]
    crop = sample_rrc(rng, h, w, scale, out_size=view.shape[:2])
    background = apply_crop(donor_tiled_bg, crop).astype(view.dtype)
    return BgResult(composite(view, mask, background), True, background)


def corrupt_mask_if_configured(
    mask: np.ndarray,
    fg_bbox: Optional[Tuple[int, int, int, int]],
    rng: np.random.Generator,
    cfg: AugConfig,
) -> np.ndarray:
    """
    Apply a freshly drawn geometric corruption to the mask when ``cfg.corruption`` is
    set. ``fg_bbox`` is (top, bottom, left, right); it is computed when not given.
    """
    if cfg.corruption is None:
        return mask
    box = fg_bbox if fg_bbox is not None else bounding_box(mask)
    fg_h, fg_w = (0, 0) if box is None else (box[1] - box[0], box[3] - box[2])
    params = sample_mask_corruption(rng, cfg.corruption, fg_w, fg_h)
    return transform_mask(mask, *params)


def _background_augment(view: View, donor: Optional[Sample], rng, cfg: AugConfig) -> BgResult:
    if cfg.mode == "bg_rm":
        return apply_bg_rm(view.image, view.mask, rng, cfg.p_remove)
    donor_bg = None if donor is None else donor.tiled_bg
    return apply_bg_random(view.image, view.mask, donor_bg, rng, cfg.p_pos, cfg.scale)


def _donor(batch: Sequence[Sample], position: int) -> Optional[Sample]:
    return None if position is None or position < 0 else batch[position]


def _random_donor_position(batch, sample, rng) -> int:
    others = [j for j, s in enumerate(batch) if s.id != sample.id]
    if not others:
        return -1
    return int(others[rng.integers(0, len(others))])


def make_view_pair(
    sample: Sample,
    batch: Sequence[Sample],
    streams: SampleStreams,
    cfg: AugConfig,
    q_donor: Optional[int] = None,
    k_donor: Optional[int] = None,
) -> ViewPair:
    """
    Build the query and key views of ``sample``.

    Both views get an independent standard view, then the configured background
    augmentation independently per view, gated by ``aug_in_query``/``aug_in_key``.
    ``q_donor``/``k_donor`` are batch positions (see :func:`assign_donors`); when not
    given they are drawn from the sample's ``donor`` stream. In ``bg_swaps`` mode the
    two views never share a donor.
    """
    if q_donor is None or k_donor is None:
        rng = streams["donor"]
        q_donor = _random_donor_position(batch, sample, rng)
        k_donor = _random_donor_position(batch, sample, rng)
        if k_donor == q_donor and len(batch) > 2:
            others = [j for j, s in enumerate(batch) if s.id != sample.id and j != q_donor]
            k_donor = int(others[rng.integers(0, len(others))])

    q_mask = corrupt_mask_if_configured(sample.mask, None, streams["corruption_q"], cfg)
    k_mask = corrupt_mask_if_configured(sample.mask, None, streams["corruption_k"], cfg)
    q = standard_view(sample, streams["q_view"], cfg, mask=q_mask)
    k = standard_view(sample, streams["k_view"], cfg, mask=k_mask)

    pair = ViewPair(
        q_view=q.image,
        k_view=k.image,
        q_mask=q.mask,
        k_mask=k.mask,
        q_transform=q.transform,
        k_transform=k.transform,
        k_plain=k.image,
    )
    if cfg.mode == "none":
        return pair

    if cfg.aug_in_query:
        result = _background_augment(q, _donor(batch, q_donor), streams["bg_decision_q"], cfg)
        pair.q_view, pair.q_was_bg_augmented = result.image, result.applied
        pair.q_background = result.background
        if result.applied and cfg.mode != "bg_rm" and not result.fallback:
            pair.q_bg_donor = batch[q_donor].id

    if cfg.aug_in_key:
        result = _background_augment(k, _donor(batch, k_donor), streams["bg_decision_k"], cfg)
        same_donor = (
            cfg.mode == "bg_swaps"
            and result.applied
            and pair.q_was_bg_augmented
            and k_donor == q_donor
        )
        if same_donor:
            message = f"Sample {sample.id}: query and key would share a donor, key left unaugmented"
            logger.warning(message)
            pair.flags.append(message)
        else:
            pair.k_view, pair.k_was_bg_augmented = result.image, result.applied
            pair.k_background = result.background
            if result.applied and cfg.mode != "bg_rm" and not result.fallback:
                pair.k_bg_donor = batch[k_donor].id
    return pair


def augment_single(
    sample: Sample,
    batch: Sequence[Sample],
    streams: SampleStreams,
    cfg: AugConfig,
    donor: Optional[int] = None,
) -> np.ndarray:
    """
    One augmented view with the query-side background augmentation, used by the
    supervised objective.
    """
    if donor is None:
        donor = _random_donor_position(batch, sample, streams["donor"])
    mask = corrupt_mask_if_configured(sample.mask, None, streams["corruption_q"], cfg)
    view = standard_view(sample, streams["single_view"], cfg, mask=mask)
    if cfg.mode == "none":
        return view.image
    return _background_augment(view, _donor(batch, donor), streams["bg_decision_q"], cfg).image


def paste_negative(donor_view: np.ndarray, donor_mask: np.ndarray, background: np.ndarray) -> np.ndarray:
    """The donor's foreground over the matched background."""
    return composite(donor_view, donor_mask, background)


def literal_negative(q_view: np.ndarray, q_mask: np.ndarray, r_view: np.ndarray) -> np.ndarray:
    """f_q * q + (1 - f_q) * r, pixelwise."""
    return composite(q_view, q_mask, r_view)


def make_matched_negative(
    q_sample: Sample, q_pair: ViewPair, donor_sample: Sample, rng: np.random.Generator, cfg: AugConfig
) -> np.ndarray:
    """
    A negative whose background matches the query (or the positive key when
    ``match_target == "positive"``) but whose foreground comes from ``donor_sample``.

    The matched background is the randomised background the target view received, or
    the target's tiled background replayed through the target view's transform when
    it was not background-augmented. ``literal_formula`` instead keeps the target's
    foreground and takes the background from a standard view of the donor.
    """
    if donor_sample.id == q_sample.id:
        raise RejectedInputError("The matched-negative donor must differ from the query sample")

    positive = cfg.match_target == "positive"
    donor_view = standard_view(donor_sample, rng, cfg)

    if cfg.neg_construction == "literal_formula":
        view = q_pair.k_view if positive else q_pair.q_view
        mask = q_pair.k_mask if positive else q_pair.q_mask
        return literal_negative(view, mask, donor_view.image.astype(view.dtype))

    if positive:
        augmented, background, transform = q_pair.k_was_bg_augmented, q_pair.k_background, q_pair.k_transform
    else:
        augmented, background, transform = q_pair.q_was_bg_augmented, q_pair.q_background, q_pair.q_transform
    if not augmented or background is None:
        background = transform.apply(q_sample.tiled_bg)
    return paste_negative(donor_view.image, donor_view.mask, background.astype(donor_view.image.dtype))
