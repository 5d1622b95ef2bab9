"""Scene rendering, speckle statistics, the dataset container, and the two
augmentation views."""

import numpy as np
import pytest

from fsce import rng as rng_streams
from fsce.data import (CLASS_NAMES, CropBlurAugmentConfig, CropBlurView,
                       GeometricAugmentConfig, GeometricView, SceneConfig,
                       apply_speckle, center_crop, gamma_speckle_field,
                       generate_split, make_sample, read_dataset,
                       render_scene, resize_bilinear, to_float, write_dataset)
from fsce.errors import ConfigError, DataError, FormatError, ShapeError

HEADER_10_64_64_4 = bytes.fromhex(
    "53445331" "0a000000" "40000000" "40000000" "04000000")


# ------------------------------------------------------------------ scenes

@pytest.mark.parametrize("cid", range(len(CLASS_NAMES)))
def test_scene_is_binary_and_nonempty(cid):
    img = render_scene(cid, 64, np.random.default_rng(0))
    fg, bg = np.float32(SceneConfig().foreground), np.float32(SceneConfig().background)
    assert img.shape == (64, 64) and img.dtype == np.float32
    assert set(np.unique(img)) == {bg, fg}
    frac = (img == fg).mean()
    assert 0.02 < frac < 0.6


def test_scene_guards():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        render_scene(0, 4, rng)
    with pytest.raises(DataError):
        render_scene(9, 64, rng)
    with pytest.raises(ConfigError):
        render_scene(0, 64, rng, SceneConfig(foreground=0.2, background=0.3))


# ----------------------------------------------------------------- speckle

@pytest.mark.parametrize("looks", [1, 2, 4, 16])
def test_speckle_moments(looks):
    rng = np.random.default_rng(looks)
    field = gamma_speckle_field(rng, 100_000, looks)
    assert 0.99 <= field.mean() <= 1.01
    assert 0.95 / looks <= field.var() <= 1.05 / looks


def test_speckle_rejects_fractional_look_below_one():
    with pytest.raises(ConfigError):
        gamma_speckle_field(np.random.default_rng(0), 10, 0.5)


def test_apply_speckle_clips_to_unit_range():
    rng = np.random.default_rng(1)
    img = np.full((64, 64), 0.75, dtype=np.float32)
    out = apply_speckle(img, rng, 1.0)
    assert out.dtype == np.float32
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert out.max() == 1.0          # single-look speckle saturates somewhere


def test_many_look_sample_approaches_the_clean_scene():
    seed, part, cid, idx = 5, rng_streams.DATA_TRAIN, 2, 0
    sample = make_sample(seed, part, cid, idx, 64, looks=1e6)
    rng = rng_streams.stream(seed, part, cid, idx)
    clean = render_scene(cid, 64, rng)
    assert np.abs(to_float(sample) - clean).max() <= 2.5 / 255.0


def test_sample_content_ignores_draw_order():
    a, la = generate_split(3, "train", per_class=3, size=32)
    b, lb = generate_split(3, "train", per_class=5, size=32)
    for cid in range(4):
        for idx in range(3):
            assert np.array_equal(a[cid * 3 + idx], b[cid * 5 + idx])
            direct = make_sample(3, rng_streams.DATA_TRAIN, cid, idx, 32, 1.0)
            assert np.array_equal(a[cid * 3 + idx], direct)
    assert np.array_equal(la, np.repeat(np.arange(4, dtype=np.uint8), 3))
    assert np.array_equal(lb, np.repeat(np.arange(4, dtype=np.uint8), 5))


def test_train_and_test_parts_differ():
    a, _ = generate_split(3, "train", per_class=2, size=32)
    b, _ = generate_split(3, "test", per_class=2, size=32)
    assert not np.array_equal(a, b)


def test_generate_split_guards():
    with pytest.raises(ConfigError):
        generate_split(0, "validate", per_class=2)
    with pytest.raises(ConfigError):
        generate_split(0, "train", per_class=0)
    with pytest.raises(ConfigError):
        generate_split(0, "train", per_class=2, num_classes=5)


# --------------------------------------------------------------- container

def test_container_header_bytes(tmp_path):
    images = np.zeros((10, 64, 64), dtype=np.uint8)
    labels = np.arange(10, dtype=np.uint8) % 4
    p = tmp_path / "d.sds"
    write_dataset(p, images, labels, 4)
    assert p.read_bytes()[:20] == HEADER_10_64_64_4
    assert p.stat().st_size == 20 + 10 * (1 + 64 * 64)


def test_container_roundtrip(tmp_path):
    images, labels = generate_split(1, "train", per_class=3, size=16)
    p = tmp_path / "d.sds"
    write_dataset(p, images, labels, 4)
    ri, rl, k = read_dataset(p)
    assert np.array_equal(ri, images) and np.array_equal(rl, labels) and k == 4


def test_container_writes_are_deterministic(tmp_path):
    images, labels = generate_split(1, "train", per_class=2, size=16)
    p1, p2 = tmp_path / "a.sds", tmp_path / "b.sds"
    write_dataset(p1, images, labels, 4)
    write_dataset(p2, images, labels, 4)
    assert p1.read_bytes() == p2.read_bytes()


def test_container_write_guards(tmp_path):
    p = tmp_path / "d.sds"
    good = np.zeros((2, 8, 8), dtype=np.uint8)
    with pytest.raises(ShapeError):
        write_dataset(p, good.astype(np.float32), np.zeros(2, np.uint8), 4)
    with pytest.raises(ShapeError):
        write_dataset(p, good, np.zeros(3, np.uint8), 4)
    with pytest.raises(ConfigError):
        write_dataset(p, good, np.zeros(2, np.uint8), 1)
    with pytest.raises(DataError):
        write_dataset(p, good, np.array([0, 7], np.uint8), 4)


def test_container_read_guards(tmp_path):
    p = tmp_path / "d.sds"
    write_dataset(p, np.zeros((2, 8, 8), np.uint8), np.zeros(2, np.uint8), 4)
    blob = bytearray(p.read_bytes())

    bad = tmp_path / "bad.sds"
    bad.write_bytes(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(FormatError):
        read_dataset(bad)

    bad.write_bytes(bytes(blob[:-5]))            # truncated body
    with pytest.raises(FormatError):
        read_dataset(bad)

    bad.write_bytes(bytes(blob) + b"\x00")       # trailing junk
    with pytest.raises(FormatError):
        read_dataset(bad)

    patched = bytearray(blob)
    patched[20] = 9                              # first label out of range
    bad.write_bytes(bytes(patched))
    with pytest.raises(DataError):
        read_dataset(bad)

    header = bytearray(blob)
    header[16:20] = (1).to_bytes(4, "little")    # one class is implausible
    bad.write_bytes(bytes(header))
    with pytest.raises(FormatError):
        read_dataset(bad)


# ----------------------------------------------------------- preprocessing

def test_to_float_endpoints():
    arr = np.array([[0, 255]], dtype=np.uint8)
    out = to_float(arr)
    assert out.dtype == np.float32
    assert out[0, 0] == 0.0 and out[0, 1] == 1.0


def test_resize_identity_and_corners():
    img = np.random.default_rng(0).random((9, 7)).astype(np.float32)
    same = resize_bilinear(img, (9, 7))
    assert np.array_equal(same, img)
    up = resize_bilinear(img, (17, 13))
    assert up.shape == (17, 13)
    assert abs(up[0, 0] - img[0, 0]) < 1e-6
    assert abs(up[-1, -1] - img[-1, -1]) < 1e-6
    assert up.min() >= img.min() - 1e-6 and up.max() <= img.max() + 1e-6
    with pytest.raises(ShapeError):
        resize_bilinear(img, (0, 5))


def test_center_crop():
    img = np.arange(36, dtype=np.float32).reshape(6, 6)
    out = center_crop(img, (2, 2))
    assert np.array_equal(out, img[2:4, 2:4])
    with pytest.raises(ShapeError):
        center_crop(img, (7, 2))


# ------------------------------------------------------------ augmentation

IDENTITY_GEO = GeometricAugmentConfig(hflip=0.0, vflip=0.0, rotate_deg=0.0,
                                      translate_frac=0.0, shear_deg=0.0,
                                      perspective=0.0, erase_p=0.0)
IDENTITY_CROP = CropBlurAugmentConfig(hflip=0.0, crop_min=1.0, crop_max=1.0,
                                      blur_sigma_max=0.0, gray_p=0.0)


def batch(shape=(5, 16, 16), seed=0):
    return np.random.default_rng(seed).random(shape).astype(np.float32)


@pytest.mark.parametrize("view", [GeometricView(IDENTITY_GEO),
                                  CropBlurView(IDENTITY_CROP)])
def test_disabled_view_is_the_identity(view):
    imgs = batch()
    out = view.apply_batch(imgs, np.random.default_rng(1))
    assert np.abs(out - imgs).max() <= 1e-5


@pytest.mark.parametrize("make_view", [GeometricView, CropBlurView])
def test_batch_equals_sequential_application(make_view):
    view = make_view()
    imgs = batch()
    got = view.apply_batch(imgs, np.random.default_rng(7))
    rng = np.random.default_rng(7)          # one carried generator
    seq = np.stack([view.apply(img, rng) for img in imgs])
    assert np.array_equal(got, seq)


@pytest.mark.parametrize("make_view", [GeometricView, CropBlurView])
def test_views_are_seed_deterministic(make_view):
    view = make_view()
    imgs = batch()
    a = view.apply_batch(imgs, np.random.default_rng(3))
    b = view.apply_batch(imgs, np.random.default_rng(3))
    assert np.array_equal(a, b)
    c = view.apply_batch(imgs, np.random.default_rng(4))
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("make_view", [GeometricView, CropBlurView])
def test_views_keep_the_value_range(make_view):
    view = make_view()
    out = view.apply_batch(batch((8, 32, 32)), np.random.default_rng(5))
    assert out.min() >= -1e-6 and out.max() <= 1.0 + 1e-6


def test_erase_covers_the_configured_area():
    cfg = GeometricAugmentConfig(hflip=0.0, vflip=0.0, rotate_deg=0.0,
                                 translate_frac=0.0, shear_deg=0.0,
                                 perspective=0.0, erase_p=1.0, erase_frac=0.10)
    view = GeometricView(cfg)
    ones = np.ones((64, 64), dtype=np.float32)
    for seed in range(8):
        out = view.apply(ones, np.random.default_rng(seed))
        zero_rows = np.nonzero((out == 0).any(axis=1))[0]
        zero_cols = np.nonzero((out == 0).any(axis=0))[0]
        eh, ew = len(zero_rows), len(zero_cols)
        assert eh > 0 and ew > 0
        assert int((out == 0).sum()) == eh * ew      # a solid rectangle
        assert abs(eh * ew - 0.10 * 64 * 64) <= eh + ew + 1
        # aspect stays within the drawn range, with rounding slack
        assert 0.4 <= eh / ew <= 2.6


def test_erase_probability_zero_never_erases():
    cfg = GeometricAugmentConfig(erase_p=0.0)
    view = GeometricView(cfg)
    ones = np.ones((5, 32, 32), dtype=np.float32)
    out = view.apply_batch(ones, np.random.default_rng(0))
    interior = out[:, 8:-8, 8:-8]       # warps may pull in zero padding
    assert (interior == 0).sum() == 0


def test_view_config_guards():
    with pytest.raises(ConfigError):
        GeometricView(GeometricAugmentConfig(hflip=1.5))
    with pytest.raises(ConfigError):
        GeometricView(GeometricAugmentConfig(erase_frac=-0.1))
    with pytest.raises(ConfigError):
        CropBlurView(CropBlurAugmentConfig(crop_min=0.0))
    with pytest.raises(ConfigError):
        CropBlurView(CropBlurAugmentConfig(crop_min=0.9, crop_max=0.8))
    with pytest.raises(ConfigError):
        CropBlurView(CropBlurAugmentConfig(blur_sigma_max=-1.0))


def test_view_shape_guards():
    view = GeometricView()
    with pytest.raises(ShapeError):
        view.apply_batch(np.zeros((16, 16), np.float32), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        view.apply_batch(np.zeros((2, 16, 8), np.float32), np.random.default_rng(0))
