import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bgaug.errors import RejectedInputError
from bgaug.imgcore import (
    CropParams,
    MaskCorruption,
    apply_crop,
    apply_crop_mask,
    composite,
    fill_grayscale,
    foreground_fraction,
    sample_mask_corruption,
    sample_rrc,
    tiled_background,
    transform_mask,
)


def gray(values):
    # a 1xN single-channel image
    return np.array(values, dtype=np.float64).reshape(1, -1, 1)


@st.composite
def image_and_mask(draw, max_side=8):
    h = draw(st.integers(1, max_side))
    w = draw(st.integers(1, max_side))
    c = draw(st.sampled_from([1, 3]))
    unit = st.floats(0.0, 1.0, allow_nan=False, width=32)
    img = draw(arrays(np.float32, (h, w, c), elements=unit))
    other = draw(arrays(np.float32, (h, w, c), elements=unit))
    mask = draw(arrays(np.uint8, (h, w), elements=st.integers(0, 1)))
    return img, other, mask


def test_composite_pixelwise():
    out = composite(gray([0.8, 0.2]), np.array([[1, 0]], dtype=np.uint8), gray([0.1, 0.5]))
    assert out.ravel().tolist() == [0.8, 0.5]


def test_composite_identity_masks():
    rng = np.random.default_rng(0)
    fg, bg = rng.random((4, 5, 3)), rng.random((4, 5, 3))
    assert np.array_equal(composite(fg, np.ones((4, 5), np.uint8), bg), fg)
    assert np.array_equal(composite(fg, np.zeros((4, 5), np.uint8), bg), bg)


def test_composite_dimension_mismatch():
    with pytest.raises(RejectedInputError):
        composite(np.zeros((4, 4, 3)), np.zeros((4, 5), np.uint8), np.zeros((4, 4, 3)))
    with pytest.raises(RejectedInputError):
        composite(np.zeros((4, 4, 3)), np.zeros((4, 4), np.uint8), np.zeros((4, 4, 1)))


@settings(max_examples=50, deadline=None)
@given(image_and_mask())
def test_composite_identities(data):
    img, other, mask = data
    assert np.array_equal(composite(img, mask, img), img)
    once = composite(img, mask, other)
    assert np.array_equal(composite(once, mask, other), once)


@settings(max_examples=50, deadline=None)
@given(image_and_mask(), st.floats(0.0, 1.0))
def test_fill_grayscale_is_constant_composite(data, g):
    img, _, mask = data
    assert np.array_equal(fill_grayscale(img, mask, g), composite(img, mask, np.full_like(img, g)))


def test_fill_grayscale_examples():
    img = gray([0.8, 0.2])
    assert np.allclose(fill_grayscale(img, np.array([[1, 0]], np.uint8), 0.3).ravel(), [0.8, 0.3])
    assert np.array_equal(fill_grayscale(img, np.ones((1, 2), np.uint8), 0.7), img)
    assert np.all(fill_grayscale(img, np.zeros((1, 2), np.uint8), 0.5) == 0.5)
    with pytest.raises(RejectedInputError):
        fill_grayscale(img, np.zeros((1, 2), np.uint8), 1.5)


def test_tiled_background_empty_mask():
    img = np.random.default_rng(1).random((6, 6, 3))
    assert np.array_equal(tiled_background(img, np.zeros((6, 6), np.uint8)), img)


def test_tiled_background_constant_neighbours():
    img = np.full((3, 3, 1), 0.37)
    img[1, 1] = 0.9
    mask = np.zeros((3, 3), np.uint8)
    mask[1, 1] = 1
    assert tiled_background(img, mask)[1, 1, 0] == pytest.approx(0.37, abs=1e-15)


def test_tiled_background_degenerate_mask(caplog):
    img = np.random.default_rng(2).random((4, 4, 3))
    with caplog.at_level(logging.WARNING):
        out = tiled_background(img, np.ones((4, 4), np.uint8))
    assert np.all(out == 0.5)
    assert "Degenerate" in caplog.text


def reference_onion_peel(img, mask):
    # straightforward per-pixel version of the fill rule
    out = img.astype(np.float64).copy()
    unfilled = mask.astype(bool).copy()
    h, w = mask.shape
    while unfilled.any():
        valid = ~unfilled
        updates = {}
        for r in range(h):
            for c in range(w):
                if not unfilled[r, c]:
                    continue
                acc, n = np.zeros(img.shape[2]), 0
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        rr, cc = r + dr, c + dc
                        if (dr or dc) and 0 <= rr < h and 0 <= cc < w and valid[rr, cc]:
                            acc += out[rr, cc]
                            n += 1
                if n:
                    updates[(r, c)] = acc / n
        for (r, c), value in updates.items():
            out[r, c] = value
            unfilled[r, c] = False
    return out


def test_tiled_background_blob():
    rng = np.random.default_rng(3)
    img = rng.random((8, 8, 3))
    mask = np.zeros((8, 8), np.uint8)
    mask[2:5, 3:6] = 1
    out = tiled_background(img, mask)

    off = mask == 0
    assert np.array_equal(out[off], img[off])
    background = img[off]
    assert out[mask == 1].min() >= background.min()
    assert out[mask == 1].max() <= background.max()
    assert np.allclose(out, reference_onion_peel(img, mask), atol=1e-12)


def test_transform_mask_identity_and_shift():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        mask = (rng.random((7, 9)) < 0.4).astype(np.uint8)
        assert np.array_equal(transform_mask(mask), mask)
        assert np.array_equal(transform_mask(transform_mask(mask, hflip=True), hflip=True), mask)

    mask = np.zeros((3, 3), np.uint8)
    mask[1, 0] = 1
    shifted = transform_mask(mask, tx=1)
    assert shifted[1, 1] == 1 and shifted.sum() == 1


def test_transform_mask_integer_translation_matches_roll():
    mask = np.zeros((10, 10), np.uint8)
    mask[3:6, 2:5] = 1
    expected = np.zeros_like(mask)
    expected[5:8, 5:8] = 1
    assert np.array_equal(transform_mask(mask, tx=3, ty=2), expected)


def test_transform_mask_out_of_frame_is_background():
    mask = np.ones((5, 5), np.uint8)
    out = transform_mask(mask, tx=2)
    assert np.all(out[:, :2] == 0)
    assert np.all(out[:, 2:] == 1)


def test_transform_mask_rotation_keeps_centre_blob():
    mask = np.zeros((9, 9), np.uint8)
    mask[3:6, 3:6] = 1
    out = transform_mask(mask, rot=90)
    assert np.array_equal(out, mask)


def test_sample_mask_corruption_identity():
    rng = np.random.default_rng(5)
    params = sample_mask_corruption(rng, MaskCorruption(), 10, 10)
    assert tuple(params) == (0.0, 0.0, 0.0, 0.0, 0.0, False)


def test_sample_mask_corruption_statistics():
    rng = np.random.default_rng(6)
    draws = [sample_mask_corruption(rng, MaskCorruption(max_rotation=25, hflip_prob=0.5), 10, 20) for _ in range(10000)]
    rotations = np.array([d.rotation for d in draws])
    flips = np.array([d.hflip for d in draws])
    assert rotations.min() >= -25 and rotations.max() <= 25
    assert abs(rotations.mean()) < 0.75
    assert abs(flips.mean() - 0.5) < 0.015


def test_sample_mask_corruption_translation_scale():
    rng = np.random.default_rng(7)
    draws = [sample_mask_corruption(rng, MaskCorruption(max_translation=0.25), 8, 4) for _ in range(2000)]
    assert max(abs(d.tx) for d in draws) <= 2.0
    assert max(abs(d.ty) for d in draws) <= 1.0


def test_foreground_fraction():
    mask = np.zeros((4, 4), np.uint8)
    mask[0, 0] = mask[0, 1] = mask[3, 3] = mask[3, 2] = 1
    assert foreground_fraction(mask, CropParams(0, 0, 4, 4, 4, 4)) == 1.0
    assert foreground_fraction(mask, CropParams(0, 0, 2, 2, 2, 2)) == 0.5
    assert foreground_fraction(np.zeros((4, 4), np.uint8), CropParams(0, 0, 1, 1, 1, 1)) == 1.0


def test_foreground_fraction_monotone_in_window():
    rng = np.random.default_rng(8)
    mask = (rng.random((12, 12)) < 0.3).astype(np.uint8)
    previous = 0.0
    for size in range(1, 13):
        fraction = foreground_fraction(mask, CropParams(0, 0, size, size, size, size))
        assert fraction >= previous
        previous = fraction


def reference_rrc(rng, h, w, scale, ratio, max_tries=10):
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for attempt in range(1, max_tries + 1):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw, attempt
    return None


def test_sample_rrc_unconstrained_matches_reference():
    mask = np.zeros((32, 32), np.uint8)
    mask[10:20, 10:20] = 1
    for seed in range(200):
        crop = sample_rrc(np.random.default_rng(seed), 32, 32, (0.2, 1.0), (3 / 4, 4 / 3), mask=mask, fg_min=0.0)
        expected = reference_rrc(np.random.default_rng(seed), 32, 32, (0.2, 1.0), (3 / 4, 4 / 3))
        assert (crop.top, crop.left, crop.crop_h, crop.crop_w, crop.attempts) == expected


def test_sample_rrc_full_mask_first_try():
    mask = np.ones((32, 32), np.uint8)
    rng = np.random.default_rng(9)
    for _ in range(500):
        crop = sample_rrc(rng, 32, 32, (0.2, 1.0), (1.0, 1.0), mask=mask, fg_min=0.05)
        assert crop.attempts == 1 and not crop.fallback


def test_sample_rrc_full_mask_default_ratio():
    # with every pixel foreground, only windows larger than the image are retried
    mask = np.ones((32, 32), np.uint8)
    retried = 0
    for seed in range(500):
        crop = sample_rrc(np.random.default_rng(seed), 32, 32, mask=mask, fg_min=0.05)
        expected = reference_rrc(np.random.default_rng(seed), 32, 32, (0.2, 1.0), (3 / 4, 4 / 3))
        if expected is None:
            assert crop.fallback
            continue
        assert not crop.fallback
        assert (crop.top, crop.left, crop.crop_h, crop.crop_w, crop.attempts) == expected
        retried += crop.attempts > 1
    assert retried > 0


def test_sample_rrc_fallback_after_max_tries():
    mask = np.zeros((32, 32), np.uint8)
    mask[0, 0] = mask[0, -1] = mask[-1, 0] = mask[-1, -1] = 1
    rng = np.random.default_rng(10)
    crop = sample_rrc(rng, 32, 32, (0.2, 0.9), mask=mask, fg_min=1.0, max_tries=10)
    assert crop.fallback and crop.attempts == 10
    assert (crop.top, crop.left, crop.crop_h, crop.crop_w) == (0, 0, 32, 32)


def test_sample_rrc_constraint_holds():
    rng = np.random.default_rng(11)
    mask = np.zeros((32, 32), np.uint8)
    mask[4:12, 20:30] = 1
    for _ in range(10000):
        crop = sample_rrc(rng, 32, 32, mask=mask, fg_min=0.1)
        if crop.fallback:
            assert crop.attempts == 10
        else:
            assert foreground_fraction(mask, crop) >= 0.1


def test_apply_crop_identity_and_constant():
    img = np.random.default_rng(12).random((6, 5, 3))
    assert np.array_equal(apply_crop(img, CropParams(0, 0, 6, 5, 6, 5)), img)
    constant = np.full((10, 10, 3), 0.42)
    out = apply_crop(constant, CropParams(1, 2, 5, 7, 16, 16))
    assert out.shape == (16, 16, 3)
    assert np.allclose(out, 0.42, atol=1e-12)


def test_apply_crop_grid_nodes_exact():
    img = np.array([[0.1, 0.7], [0.4, 0.9]]).reshape(2, 2, 1)
    up = apply_crop(img, CropParams(0, 0, 2, 2, 4, 4))
    back = apply_crop(up, CropParams(0, 0, 4, 4, 2, 2))
    assert np.allclose(back, img, atol=1e-6)


def test_apply_crop_mask_nearest_and_invalid():
    mask = np.zeros((4, 4), np.uint8)
    mask[:2, :2] = 1
    out = apply_crop_mask(mask, CropParams(0, 0, 4, 4, 8, 8))
    assert set(np.unique(out)) <= {0, 1}
    assert out[0, 0] == 1 and out[-1, -1] == 0
    with pytest.raises(RejectedInputError):
        apply_crop(np.zeros((4, 4, 1)), CropParams(2, 2, 4, 4, 4, 4))
