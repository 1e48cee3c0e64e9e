"""
Pixel- and mask-level primitives shared by the whole package.

Images are ``numpy`` arrays shaped ``(H, W, C)`` with values in [0, 1] and ``C`` in {1, 3}.
Masks are ``(H, W)`` ``uint8`` arrays, 1 marking the foreground.
Every function here is pure: randomness only enters through an explicit
``numpy.random.Generator``.
"""
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import RejectedInputError

logger = logging.getLogger(__name__)

# 8-neighbourhood without the centre pixel
_NEIGHBOURS = np.array([[1, 1, 1], [1, 0, 1], [1, 1, 1]], dtype=np.float64)

# ITU-R 601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class CropParams:
    """
    A crop window in source pixels and the size it is resampled to.

    :param attempts: how many RRC draws were consumed to produce this crop.
    :param fallback: True when the sampler gave up and returned a centre crop.
    """

    top: int
    left: int
    crop_h: int
    crop_w: int
    out_h: int
    out_w: int
    attempts: int = 1
    fallback: bool = False

    def validate(self, src_h: int, src_w: int):
        if self.crop_h < 1 or self.crop_w < 1 or self.out_h < 1 or self.out_w < 1:
            raise RejectedInputError(f"Crop and output sizes must be positive: {self}")
        if (
            self.top < 0
            or self.left < 0
            or self.top + self.crop_h > src_h
            or self.left + self.crop_w > src_w
        ):
            raise RejectedInputError(
                f"Crop window {self} does not fit inside a {src_h}x{src_w} image"
            )

    @property
    def window(self) -> Tuple[slice, slice]:
        return (
            slice(self.top, self.top + self.crop_h),
            slice(self.left, self.left + self.crop_w),
        )


@dataclass(frozen=True)
class MaskCorruption:
    """
    Maximum strengths of the geometric noise applied to foreground masks.

    :param max_rotation: degrees, rotation drawn from U(-max, +max)
    :param max_shear: degrees, drawn independently along x and y
    :param max_translation: fraction of the foreground width/height
    :param hflip_prob: probability of a horizontal flip on each use of the mask
    """

    max_rotation: float = 0.0
    max_shear: float = 0.0
    max_translation: float = 0.0
    hflip_prob: float = 0.0

    def validate(self):
        for name in ("max_rotation", "max_shear", "max_translation", "hflip_prob"):
            if getattr(self, name) < 0:
                raise RejectedInputError(f"corruption.{name} must be >= 0")
        if self.hflip_prob > 1:
            raise RejectedInputError("corruption.hflip_prob must be within [0, 1]")


class MaskTransform(NamedTuple):
    rotation: float = 0.0
    shear_x: float = 0.0
    shear_y: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    hflip: bool = False


def check_image(img: np.ndarray, name: str = "image"):
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise RejectedInputError(
            f"{name} must be shaped (H, W, C) with C in (1, 3), got {img.shape}"
        )


def check_pair(img: np.ndarray, mask: np.ndarray, name: str = "image"):
    check_image(img, name)
    if mask.shape != img.shape[:2]:
        raise RejectedInputError(
            f"Mask shape {mask.shape} does not match {name} shape {img.shape[:2]}"
        )


def composite(fg: np.ndarray, mask: np.ndarray, bg: np.ndarray) -> np.ndarray:
    """
    Take ``fg`` where the mask is set and ``bg`` elsewhere.
    """
    check_pair(fg, mask, "foreground image")
    if bg.shape != fg.shape:
        raise RejectedInputError(
            f"Background shape {bg.shape} does not match foreground shape {fg.shape}"
        )
    return np.where(mask.astype(bool)[..., None], fg, bg)


def fill_grayscale(img: np.ndarray, mask: np.ndarray, intensity: float) -> np.ndarray:
    """
    Replace the background with a constant gray level, the backing primitive of BG_RM.
    """
    if not 0.0 <= intensity <= 1.0:
        raise RejectedInputError(f"Gray intensity {intensity} is outside [0, 1]")
    return composite(img, mask, np.full_like(img, intensity))


def tiled_background(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """
    Remove the foreground by propagating the surrounding background inwards.

    Each pass assigns every still-unfilled foreground pixel that touches valid pixels
    the mean of its valid 8-neighbours, so the region is peeled from its boundary to
    its centre. Background pixels are returned untouched.

    A mask without any background leaves nothing to propagate: the whole image is set
    to 0.5 and a warning is logged.
    """
    check_pair(img, mask)
    unfilled = mask.astype(bool)
    if not unfilled.any():
        return img.copy()
    if unfilled.all():
        logger.warning("Degenerate mask without background pixels, filling with 0.5")
        return np.full_like(img, 0.5)

    out = img.copy()
    background = img[~unfilled]
    lo, hi = background.min(), background.max()
    valid = ~unfilled
    while unfilled.any():
        counts = ndimage.convolve(valid.astype(np.float64), _NEIGHBOURS, mode="constant")
        frontier = unfilled & (counts > 0)
        sums = np.stack(
            [
                ndimage.convolve(
                    np.where(valid, out[..., c], 0.0).astype(np.float64),
                    _NEIGHBOURS,
                    mode="constant",
                )
                for c in range(img.shape[2])
            ],
            axis=-1,
        )
        means = sums[frontier] / counts[frontier][:, None]
        # rounding may overshoot the background range by an ulp
        out[frontier] = np.clip(means, lo, hi)
        valid = valid | frontier
        unfilled = unfilled & ~frontier
    return out


def bounding_box(mask: np.ndarray) -> Optional[Tuple[int, int, int, int]]:
    """
    :return: (top, bottom, left, right) with exclusive bottom/right, or None for an empty mask
    """
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def _shift(dr: float, dc: float) -> np.ndarray:
    return np.array([[1.0, 0.0, dr], [0.0, 1.0, dc], [0.0, 0.0, 1.0]])


def _linear(m: np.ndarray) -> np.ndarray:
    out = np.eye(3)
    out[:2, :2] = m
    return out


def transform_mask(
    mask: np.ndarray,
    rot: float = 0.0,
    shear_x: float = 0.0,
    shear_y: float = 0.0,
    tx: float = 0.0,
    ty: float = 0.0,
    hflip: bool = False,
) -> np.ndarray:
    """
    Apply hflip, rotation about the centre, shear about the centre and translation,
    in that order. Angles are in degrees, translations in pixels (tx along the width).

    The output is produced by inverse mapping with nearest-neighbour sampling;
    pixels whose source falls outside the frame become background.
    """
    h, w = mask.shape
    centre = ((h - 1) / 2.0, (w - 1) / 2.0)
    theta = math.radians(rot)
    cos, sin = math.cos(theta), math.sin(theta)
    a = math.tan(math.radians(shear_x))
    b = math.tan(math.radians(shear_y))

    # each factor below is the inverse of one forward step, in (row, col) coordinates
    inv_translate = _shift(-ty, -tx)
    inv_shear_y = _linear(np.array([[1.0, -b], [0.0, 1.0]]))
    inv_shear_x = _linear(np.array([[1.0, 0.0], [-a, 1.0]]))
    inv_rotate = _linear(np.array([[cos, sin], [-sin, cos]]))
    inverse = (
        _shift(*centre)
        @ inv_rotate
        @ inv_shear_x
        @ inv_shear_y
        @ _shift(-centre[0], -centre[1])
        @ inv_translate
    )
    if hflip:
        flip = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, w - 1.0], [0.0, 0.0, 1.0]])
        inverse = flip @ inverse

    return ndimage.affine_transform(
        mask.astype(np.uint8),
        inverse[:2, :2],
        offset=inverse[:2, 2],
        output_shape=mask.shape,
        order=0,
        mode="constant",
        cval=0,
    )


def sample_mask_corruption(
    rng: np.random.Generator, c: MaskCorruption, fg_w: float, fg_h: float
) -> MaskTransform:
    """
    Draw the parameters for :func:`transform_mask` from the corruption strengths.
    Translations are scaled by the foreground width and height.
    """
    if fg_w < 0 or fg_h < 0:
        raise RejectedInputError("Foreground width and height must be >= 0")
    rotation = rng.uniform(-c.max_rotation, c.max_rotation)
    shear_x = rng.uniform(-c.max_shear, c.max_shear)
    shear_y = rng.uniform(-c.max_shear, c.max_shear)
    tx = rng.uniform(-c.max_translation, c.max_translation) * fg_w
    ty = rng.uniform(-c.max_translation, c.max_translation) * fg_h
    hflip = bool(rng.random() < c.hflip_prob)
    return MaskTransform(
        float(rotation), float(shear_x), float(shear_y), float(tx), float(ty), hflip
    )


def foreground_fraction(mask: np.ndarray, crop: CropParams) -> float:
    """
    Fraction of all foreground pixels that fall inside the crop window.
    An empty mask is vacuously fully covered (1.0).
    """
    total = int(mask.sum())
    if total == 0:
        return 1.0
    return int(mask[crop.window].sum()) / total


def center_crop_params(
    src_h: int, src_w: int, out_size: Optional[Tuple[int, int]] = None, **kwargs
) -> CropParams:
    """
    The largest centred square crop.
    """
    out_h, out_w = out_size or (src_h, src_w)
    side = min(src_h, src_w)
    return CropParams(
        top=(src_h - side) // 2,
        left=(src_w - side) // 2,
        crop_h=side,
        crop_w=side,
        out_h=out_h,
        out_w=out_w,
        **kwargs,
    )


def sample_rrc(
    rng: np.random.Generator,
    src_h: int,
    src_w: int,
    scale: Sequence[float] = (0.2, 1.0),
    ratio: Sequence[float] = (3 / 4, 4 / 3),
    mask: Optional[np.ndarray] = None,
    fg_min: float = 0.0,
    max_tries: int = 10,
    out_size: Optional[Tuple[int, int]] = None,
) -> CropParams:
    """
    Random resized crop parameters, optionally constrained to keep ``fg_min`` of the
    foreground inside the window.

    Each try draws an area fraction from U(scale), a log-aspect from U(log ratio) and a
    uniform placement. A window that cannot fit the image is discarded and counts as a
    try. After ``max_tries`` rejected tries the largest centred square crop is
    returned with ``fallback=True``.

    With no mask or ``fg_min == 0`` the draws are exactly those of the plain sampler.
    """
    if not 0 < scale[0] <= scale[1] <= 1:
        raise RejectedInputError(f"RRC scale must satisfy 0 < lo <= hi <= 1, got {scale}")
    if ratio[0] > ratio[1]:
        raise RejectedInputError(f"RRC ratio must satisfy lo <= hi, got {ratio}")
    if max_tries < 1:
        raise RejectedInputError("max_tries must be >= 1")
    out_h, out_w = out_size or (src_h, src_w)
    constrained = mask is not None and fg_min > 0

    area = src_h * src_w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for attempt in range(1, max_tries + 1):
        target_area = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(log_ratio[0], log_ratio[1]))
        crop_w = int(round(math.sqrt(target_area * aspect)))
        crop_h = int(round(math.sqrt(target_area / aspect)))
        if not (0 < crop_w <= src_w and 0 < crop_h <= src_h):
            continue
        top = int(rng.integers(0, src_h - crop_h + 1))
        left = int(rng.integers(0, src_w - crop_w + 1))
        crop = CropParams(top, left, crop_h, crop_w, out_h, out_w, attempts=attempt)
        if not constrained or foreground_fraction(mask, crop) >= fg_min:
            return crop

    return center_crop_params(
        src_h, src_w, (out_h, out_w), attempts=max_tries, fallback=True
    )


def _grid(start: int, size: int, out: int) -> np.ndarray:
    # corner-aligned: the first and last output samples hit the window edges exactly
    if out == 1:
        return np.array([start + (size - 1) / 2.0])
    return start + np.arange(out) * ((size - 1) / (out - 1))


def apply_crop(img: np.ndarray, crop: CropParams) -> np.ndarray:
    """
    Extract the crop window and resample it bilinearly to the output size.
    """
    check_image(img)
    crop.validate(img.shape[0], img.shape[1])
    if (crop.crop_h, crop.crop_w) == (crop.out_h, crop.out_w):
        return img[crop.window].copy()

    rows = _grid(crop.top, crop.crop_h, crop.out_h)
    cols = _grid(crop.left, crop.crop_w, crop.out_w)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    channels = [
        ndimage.map_coordinates(
            img[..., c].astype(np.float64),
            [rr, cc],
            order=1,
            mode="nearest",
            prefilter=False,
        )
        for c in range(img.shape[2])
    ]
    return np.clip(np.stack(channels, axis=-1), 0.0, 1.0).astype(img.dtype)


def apply_crop_mask(mask: np.ndarray, crop: CropParams) -> np.ndarray:
    """
    The mask counterpart of :func:`apply_crop`, using nearest-neighbour sampling.
    """
    crop.validate(mask.shape[0], mask.shape[1])
    if (crop.crop_h, crop.crop_w) == (crop.out_h, crop.out_w):
        return mask[crop.window].copy()
    rows = np.floor(_grid(crop.top, crop.crop_h, crop.out_h) + 0.5).astype(int)
    cols = np.floor(_grid(crop.left, crop.crop_w, crop.out_w) + 0.5).astype(int)
    rows = np.clip(rows, crop.top, crop.top + crop.crop_h - 1)
    cols = np.clip(cols, crop.left, crop.left + crop.crop_w - 1)
    return mask[np.ix_(rows, cols)].copy()


def hflip_image(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """
    Luma conversion replicated over the original channel count.
    """
    if img.shape[2] == 1:
        return img.copy()
    luma = np.clip(img @ _LUMA.astype(img.dtype), 0.0, 1.0)
    return np.repeat(luma[..., None], img.shape[2], axis=2).astype(img.dtype)


def adjust_brightness_contrast(
    img: np.ndarray, brightness: float, contrast: float
) -> np.ndarray:
    """
    Scale intensities by ``brightness``, then stretch them around their mean gray
    level by ``contrast``; the result is clamped to [0, 1].
    """
    out = img.astype(np.float64) * brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    return np.clip(out, 0.0, 1.0).astype(img.dtype)
