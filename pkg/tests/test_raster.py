from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ossod import raster
from ossod.errors import PpmHeaderError, PpmMaxvalError, PpmTruncatedError, RasterError
from ossod.raster import (
    AugmentationSpec,
    CoordinateMap,
    RasterImage,
    apply_augmentation,
    blend_region,
    sample_augmentation,
)

images = st.tuples(st.integers(1, 12), st.integers(1, 12)).flatmap(
    lambda hw: arrays(np.uint8, (hw[0], hw[1], 3)).map(RasterImage)
)


@given(images)
@settings(max_examples=60)
def test_ppm_round_trip(img):
    assert raster.decode_ppm(raster.encode_ppm(img)) == img


def test_ppm_file_round_trip(tmp_path, rng):
    img = RasterImage(rng.integers(0, 256, (7, 5, 3), dtype=np.uint8))
    raster.save_ppm(img, tmp_path / "a.ppm")
    assert raster.load_ppm(tmp_path / "a.ppm") == img


def test_ppm_header_with_comment_free_whitespace():
    data = b"P6  2\n\t1 255\n" + bytes(range(6))
    img = raster.decode_ppm(data)
    assert (img.width, img.height) == (2, 1)
    assert img.pixels[0, 1].tolist() == [3, 4, 5]


@pytest.mark.parametrize("data, err", [
    (b"P5\n1 1\n255\n\x00", PpmHeaderError),
    (b"P6\n1 x\n255\n\x00\x00\x00", PpmHeaderError),
    (b"P6\n0 1\n255\n", PpmHeaderError),
    (b"P6\n1 1\n65535\n" + bytes(6), PpmMaxvalError),
    (b"P6\n2 2\n255\n" + bytes(11), PpmTruncatedError),
])
def test_ppm_errors_are_distinct(data, err):
    with pytest.raises(err):
        raster.decode_ppm(data)


def test_raster_image_is_immutable_copy():
    arr = np.zeros((2, 2, 3), dtype=np.uint8)
    img = RasterImage(arr)
    arr[0, 0, 0] = 9
    assert img.pixels[0, 0, 0] == 0
    with pytest.raises(ValueError):
        img.pixels[0, 0, 0] = 1


def test_raster_image_rejects_bad_shapes_and_values():
    with pytest.raises(RasterError):
        RasterImage(np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(RasterError):
        RasterImage(np.zeros((0, 2, 3), dtype=np.uint8))
    with pytest.raises(RasterError):
        RasterImage(np.full((1, 1, 3), 256))


def test_blend_uniform_gray_example():
    bg = RasterImage.filled(8, 8, (100, 100, 100))
    fg = RasterImage.filled(3, 2, (200, 200, 200))
    out = blend_region(bg, fg, (4, 5), 0.5)
    assert np.all(out.pixels[5:7, 4:7] == 150)
    mask = np.ones((8, 8), dtype=bool)
    mask[5:7, 4:7] = False
    assert np.all(out.pixels[mask] == 100)


def test_blend_exhaustive_channel_pairs():
    a = np.repeat(np.arange(256, dtype=np.uint8), 256)
    b = np.tile(np.arange(256, dtype=np.uint8), 256)
    fg = RasterImage(np.stack([a, a, a], axis=1).reshape(256, 256, 3))
    bg = RasterImage(np.stack([b, b, b], axis=1).reshape(256, 256, 3))
    mid = blend_region(bg, fg, (0, 0), 0.5).pixels[..., 0].astype(int).ravel()
    s = a.astype(int) + b.astype(int)
    # exact midpoint, halves rounded up (ties away from zero on non-negatives)
    assert np.array_equal(mid, (s + 1) // 2)
    assert np.all(mid >= np.minimum(a, b)) and np.all(mid <= np.maximum(a, b))
    assert blend_region(bg, fg, (0, 0), 1.0) == fg
    assert blend_region(bg, fg, (0, 0), 0.0) == bg


def test_blend_rejects_out_of_bounds_and_bad_beta():
    bg = RasterImage.filled(4, 4)
    fg = RasterImage.filled(2, 2)
    with pytest.raises(RasterError):
        blend_region(bg, fg, (3, 0), 0.5)
    with pytest.raises(RasterError):
        blend_region(bg, fg, (-1, 0), 0.5)
    with pytest.raises(RasterError):
        blend_region(bg, fg, (0, 0), 1.5)


def test_crop_and_bounds():
    img = RasterImage(np.arange(4 * 5 * 3, dtype=np.uint8).reshape(4, 5, 3))
    c = raster.crop(img, (1, 2, 3, 2))
    assert np.array_equal(c.pixels, img.pixels[2:4, 1:4])
    with pytest.raises(RasterError):
        raster.crop(img, (3, 0, 3, 1))


@given(st.integers(1, 40), st.integers(0, 39), st.integers(1, 40), st.booleans())
def test_coordinate_map_round_trip(width, x, w, flip):
    box = (float(x), 3.0, float(w), 4.0)
    cmap = CoordinateMap(width, flip)
    assert cmap.inverse(cmap.forward(box)) == box


def test_flip_moves_pixels_consistently_with_coordinate_map():
    arr = np.zeros((6, 10, 3), dtype=np.uint8)
    arr[1:3, 2:5] = 255
    img = RasterImage(arr)
    out, cmap = apply_augmentation(img, AugmentationSpec("weak", flip=True))
    x, y, w, h = cmap.forward((2, 1, 3, 2))
    assert np.all(out.pixels[int(y):int(y + h), int(x):int(x + w)] == 255)
    assert int(out.pixels.sum()) == int(img.pixels.sum())


def test_weak_spec_allows_flip_only():
    with pytest.raises(RasterError):
        AugmentationSpec("weak", jitter_scale=(1.1, 1.0, 1.0))
    with pytest.raises(RasterError):
        AugmentationSpec("weak", cutout=(0, 0, 1, 1))
    with pytest.raises(RasterError):
        AugmentationSpec("strong", jitter_scale=(2.0, 1.0, 1.0))


def test_strong_augmentation_is_deterministic_and_in_bounds():
    img = RasterImage(np.full((20, 30, 3), 120, dtype=np.uint8))
    for seed in range(50):
        spec = sample_augmentation("strong", seed, 30, 20)
        assert spec == sample_augmentation("strong", seed, 30, 20)
        cx, cy, cw, ch = spec.cutout
        assert 0 <= cx and cx + cw <= 30 and 0 <= cy and cy + ch <= 20
        a, _ = apply_augmentation(img, spec)
        b, _ = apply_augmentation(img, spec)
        assert a == b
        assert np.all(a.pixels[cy:cy + ch, cx:cx + cw] == 0)
