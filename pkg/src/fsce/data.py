"""Synthetic speckled-target data: scenes, noise, container, augmentation.

Scenes are binary reflectivity layouts (four target shapes on a darker
background) rendered at a random pose, then corrupted by multiplicative
speckle: each pixel is scaled by an independent Gamma(L, 1/L) draw, which
has mean 1 and variance 1/L, so L=1 is the harshest single-look case.
Pixels are clipped to [0, 1] and quantized to u8.

Every sample is generated from its own RNG stream keyed by
(seed, part, class, index), so the content of sample k never depends on
how many samples were drawn before it or in which order.

Container format (tag SDS1), little-endian:

    magic  4 bytes b"SDS1"
    count  u32    samples
    h, w   u32    image dims
    k      u32    number of classes
    then per sample: u8 label, h*w u8 pixels, row-major

Augmentation comes in two flavors used by the two network views: the
geometric/erase pipeline (flips, rotation, translation, shear, mild
perspective, random erase) and the crop/blur pipeline (random resized crop,
horizontal flip, gaussian blur, grayscale -- an identity on single-channel
data, kept so the view spec reads like the usual recipe). apply_batch(imgs,
rng) draws parameters per image in index order and equals the sequential
per-image application exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import rng as rng_streams
from .errors import ConfigError, DataError, FormatError, ShapeError

DATASET_MAGIC = b"SDS1"
CLASS_NAMES = ("bar", "ell", "disk", "cross")


# ----------------------------------------------------------------- scenes

def _shape_mask(class_id: int, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Membership of canonical-pose points (a, b) in the class shape."""
    if class_id == 0:    # bar
        return (np.abs(a) <= 0.55) & (np.abs(b) <= 0.16)
    if class_id == 1:    # ell: horizontal arm plus vertical arm
        horiz = (np.abs(a) <= 0.52) & (b >= -0.52) & (b <= -0.24)
        vert = (a >= -0.52) & (a <= -0.24) & (np.abs(b) <= 0.52)
        return horiz | vert
    if class_id == 2:    # disk
        return a * a + b * b <= 0.38 * 0.38
    if class_id == 3:    # cross
        return ((np.abs(a) <= 0.52) & (np.abs(b) <= 0.14)) | \
               ((np.abs(b) <= 0.52) & (np.abs(a) <= 0.14))
    raise DataError(f"class id must be 0..3, got {class_id}")


@dataclass(frozen=True)
class SceneConfig:
    # contrast calibrated so single-look speckle keeps the baseline well
    # below ceiling; see the ablation recipe under benchmarks
    foreground: float = 0.65
    background: float = 0.35
    rotate_deg: float = 45.0
    translate: float = 0.22     # in normalized [-1, 1] units
    scale_jitter: float = 0.15


def render_scene(class_id: int, size: int, rng, scene: SceneConfig = SceneConfig()
                 ) -> np.ndarray:
    """Clean reflectivity image, f32 (size, size), values {background, foreground}."""
    if size < 8:
        raise ConfigError(f"scene size must be >= 8, got {size}")
    if not 0.0 <= scene.background < scene.foreground <= 1.0:
        raise ConfigError("need 0 <= background < foreground <= 1")
    theta = np.deg2rad(rng.uniform(-scene.rotate_deg, scene.rotate_deg))
    tx = rng.uniform(-scene.translate, scene.translate)
    ty = rng.uniform(-scene.translate, scene.translate)
    s = rng.uniform(1.0 - scene.scale_jitter, 1.0 + scene.scale_jitter)
    c = (np.arange(size) + 0.5) * 2.0 / size - 1.0
    xx, yy = np.meshgrid(c, c, indexing="xy")
    u, v = (xx - tx) / s, (yy - ty) / s
    ct, st = np.cos(-theta), np.sin(-theta)
    a, b = ct * u - st * v, st * u + ct * v
    mask = _shape_mask(class_id, a, b)
    img = np.full((size, size), scene.background, dtype=np.float32)
    img[mask] = scene.foreground
    return img


# ---------------------------------------------------------------- speckle

def gamma_speckle_field(rng, shape, looks: float) -> np.ndarray:
    """Unit-mean multiplicative speckle: Gamma(looks, 1/looks), variance 1/looks."""
    if looks < 1:
        raise ConfigError(f"looks must be >= 1, got {looks}")
    return rng.gamma(shape=looks, scale=1.0 / looks, size=shape)


def apply_speckle(img: np.ndarray, rng, looks: float) -> np.ndarray:
    field = gamma_speckle_field(rng, img.shape, looks)
    return np.clip(img * field, 0.0, 1.0).astype(np.float32)


def make_sample(seed: int, part: int, class_id: int, index: int, size: int,
                looks: float, scene: SceneConfig = SceneConfig()) -> np.ndarray:
    """One u8 image, reproducible from its coordinates alone."""
    rng = rng_streams.stream(seed, part, class_id, index)
    img = render_scene(class_id, size, rng, scene)
    img = apply_speckle(img, rng, looks)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def generate_split(seed: int, part: str, per_class: int, num_classes: int = 4,
                   size: int = 64, looks: float = 1.0,
                   scene: SceneConfig = SceneConfig()):
    """Class-major dataset: (images u8 (M, size, size), labels u8 (M,))."""
    parts = {"train": rng_streams.DATA_TRAIN, "test": rng_streams.DATA_TEST}
    if part not in parts:
        raise ConfigError(f"part must be train|test, got {part!r}")
    if not 2 <= num_classes <= len(CLASS_NAMES):
        raise ConfigError(f"num_classes must be 2..{len(CLASS_NAMES)}")
    if per_class < 1:
        raise ConfigError(f"per_class must be >= 1, got {per_class}")
    images = np.empty((num_classes * per_class, size, size), dtype=np.uint8)
    labels = np.empty(num_classes * per_class, dtype=np.uint8)
    pos = 0
    for cid in range(num_classes):
        for idx in range(per_class):
            images[pos] = make_sample(seed, parts[part], cid, idx, size, looks, scene)
            labels[pos] = cid
            pos += 1
    return images, labels


# -------------------------------------------------------------- container

def write_dataset(path, images: np.ndarray, labels: np.ndarray, num_classes: int):
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ShapeError(f"images must be u8 (M, H, W), got {images.dtype} {images.shape}")
    if labels.shape != (images.shape[0],):
        raise ShapeError("labels must be one per image")
    if num_classes < 2 or num_classes > 255:
        raise ConfigError(f"num_classes must be 2..255, got {num_classes}")
    if labels.max(initial=0) >= num_classes:
        raise DataError(f"label {int(labels.max())} out of range for {num_classes} classes")
    m, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIII", m, h, w, num_classes))
        lab = np.asarray(labels, dtype=np.uint8)
        for i in range(m):
            fh.write(lab[i:i + 1].tobytes())
            fh.write(images[i].tobytes(order="C"))


def read_dataset(path):
    """-> (images u8 (M, H, W), labels u8 (M,), num_classes)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:4] != DATASET_MAGIC:
        raise FormatError("not a dataset file (bad magic or truncated header)")
    m, h, w, k = struct.unpack("<IIII", blob[4:20])
    if m < 1 or h < 1 or w < 1 or not 2 <= k <= 255:
        raise FormatError(f"implausible header: count={m} dims={h}x{w} classes={k}")
    rec = 1 + h * w
    if len(blob) != 20 + m * rec:
        raise FormatError(f"file size {len(blob)} does not match header "
                          f"(expected {20 + m * rec})")
    body = np.frombuffer(blob, dtype=np.uint8, offset=20).reshape(m, rec)
    labels = body[:, 0].copy()
    images = body[:, 1:].reshape(m, h, w).copy()
    bad = np.nonzero(labels >= k)[0]
    if bad.size:
        raise DataError(f"sample {int(bad[0])} has label {int(labels[bad[0]])} "
                        f">= {k} classes")
    return images, labels, int(k)


# ----------------------------------------------------------- preprocessing

def to_float(images: np.ndarray) -> np.ndarray:
    """u8 -> f32 in [0, 1]."""
    return images.astype(np.float32) / 255.0


def resize_bilinear(img: np.ndarray, out_hw) -> np.ndarray:
    """Single-channel bilinear resize, corner-aligned."""
    h, w = img.shape
    th, tw = out_hw
    if th < 1 or tw < 1:
        raise ShapeError(f"bad resize target {out_hw}")
    if (th, tw) == (h, w):
        return img.astype(np.float32, copy=True)
    ys = np.linspace(0.0, h - 1.0, th) if th > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, tw) if tw > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 2) if h > 1 else np.zeros(th, int)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 2) if w > 1 else np.zeros(tw, int)
    wy = (ys - y0).reshape(-1, 1) if h > 1 else np.zeros((th, 1))
    wx = (xs - x0).reshape(1, -1) if w > 1 else np.zeros((1, tw))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    im = img.astype(np.float32)
    a = im[np.ix_(y0, x0)]
    bq = im[np.ix_(y0, x1)]
    cq = im[np.ix_(y1, x0)]
    d = im[np.ix_(y1, x1)]
    return ((1 - wy) * (1 - wx) * a + (1 - wy) * wx * bq
            + wy * (1 - wx) * cq + wy * wx * d).astype(np.float32)


def center_crop(img: np.ndarray, out_hw) -> np.ndarray:
    h, w = img.shape
    th, tw = out_hw
    if th > h or tw > w or th < 1 or tw < 1:
        raise ShapeError(f"crop {out_hw} does not fit in {img.shape}")
    y0, x0 = (h - th) // 2, (w - tw) // 2
    return img[y0:y0 + th, x0:x0 + tw].copy()


# ------------------------------------------------------------ augmentation

def _grid(size: int) -> np.ndarray:
    c = (np.arange(size) + 0.5) * 2.0 / size - 1.0
    xx, yy = np.meshgrid(c, c, indexing="xy")
    return np.ascontiguousarray(
        np.stack([xx.ravel(), yy.ravel(), np.ones(size * size)], axis=0))


_GRIDS: dict[int, np.ndarray] = {}


def _warp_batch(imgs: np.ndarray, mats: np.ndarray) -> np.ndarray:
    """Inverse-warp each (H, W) image by its 3x3 sampling matrix; bilinear,
    zero fill outside."""
    b, size, size2 = imgs.shape
    if size != size2:
        raise ShapeError("warping assumes square images")
    grid = _GRIDS.setdefault(size, _grid(size))
    src = mats @ grid
    xs = src[:, 0] / src[:, 2]
    ys = src[:, 1] / src[:, 2]
    px = (xs + 1.0) * size / 2.0 - 0.5
    py = (ys + 1.0) * size / 2.0 - 0.5
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    wx = (px - x0).astype(np.float32)
    wy = (py - y0).astype(np.float32)
    flat = imgs.reshape(b, -1).astype(np.float32)
    out = np.zeros((b, size * size), dtype=np.float32)
    for dy, dx, wgt in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx),
                        (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < size) & (yi >= 0) & (yi < size)
        idx = np.where(ok, yi * size + xi, 0)
        out += np.where(ok, np.take_along_axis(flat, idx, axis=1), 0.0) * wgt
    return out.reshape(b, size, size)


def _homography(corners_to: np.ndarray) -> np.ndarray:
    """3x3 map sending the unit square corners (+-1, +-1) to corners_to (4, 2)."""
    src = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=np.float64)
    a = np.zeros((8, 8))
    rhs = np.zeros(8)
    for i, ((x, y), (xd, yd)) in enumerate(zip(src, corners_to)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -xd * x, -xd * y]
        rhs[2 * i] = xd
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -yd * x, -yd * y]
        rhs[2 * i + 1] = yd
    h = np.linalg.solve(a, rhs)
    return np.array([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])


@dataclass(frozen=True)
class GeometricAugmentConfig:
    hflip: float = 0.5
    vflip: float = 0.5
    rotate_deg: float = 15.0
    translate_frac: float = 0.08
    shear_deg: float = 8.0
    perspective: float = 0.08
    erase_p: float = 0.25
    erase_frac: float = 0.10


@dataclass(frozen=True)
class CropBlurAugmentConfig:
    hflip: float = 0.5
    crop_min: float = 0.7
    crop_max: float = 1.0
    blur_sigma_max: float = 1.1
    gray_p: float = 0.2


class GeometricView:
    """Flip/rotate/translate/shear/perspective warp plus random erasing."""

    def __init__(self, cfg: GeometricAugmentConfig = GeometricAugmentConfig()):
        for p in (cfg.hflip, cfg.vflip, cfg.erase_p):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"probabilities must be in [0, 1], got {p}")
        if cfg.erase_frac < 0 or cfg.perspective < 0:
            raise ConfigError("erase_frac and perspective must be non-negative")
        self.cfg = cfg

    def _draw(self, rng, size):
        c = self.cfg
        sx = -1.0 if rng.uniform() < c.hflip else 1.0
        sy = -1.0 if rng.uniform() < c.vflip else 1.0
        theta = np.deg2rad(rng.uniform(-c.rotate_deg, c.rotate_deg))
        shear = np.tan(np.deg2rad(rng.uniform(-c.shear_deg, c.shear_deg)))
        tx = 2.0 * rng.uniform(-c.translate_frac, c.translate_frac)
        ty = 2.0 * rng.uniform(-c.translate_frac, c.translate_frac)
        jit = rng.uniform(-c.perspective, c.perspective, size=(4, 2))
        ct, st = np.cos(theta), np.sin(theta)
        rot = np.array([[ct, -st, 0], [st, ct, 0], [0, 0, 1.0]])
        sh = np.array([[1.0, shear, 0], [0, 1, 0], [0, 0, 1.0]])
        flip = np.diag([sx, sy, 1.0])
        aff = flip @ rot @ sh
        aff[0, 2], aff[1, 2] = tx, ty
        corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=np.float64)
        content = aff @ _homography(corners + jit)
        mat = np.linalg.inv(content)
        erase = None
        if c.erase_p > 0 and rng.uniform() < c.erase_p:
            # the configured fraction is the area itself, not an upper bound;
            # only the aspect ratio of the rectangle is random
            frac = c.erase_frac
            aspect = rng.uniform(0.5, 2.0)
            eh = max(1, min(size, int(round(size * np.sqrt(frac * aspect)))))
            ew = max(1, min(size, int(round(size * np.sqrt(frac / aspect)))))
            y0 = int(rng.integers(0, size - eh + 1))
            x0 = int(rng.integers(0, size - ew + 1))
            erase = (y0, x0, eh, ew)
        return mat, erase

    def apply_batch(self, imgs: np.ndarray, rng) -> np.ndarray:
        if imgs.ndim != 3:
            raise ShapeError(f"expected (B, H, W), got {imgs.shape}")
        size = imgs.shape[1]
        drawn = [self._draw(rng, size) for _ in range(imgs.shape[0])]
        out = _warp_batch(imgs, np.stack([d[0] for d in drawn]))
        for i, (_, erase) in enumerate(drawn):
            if erase is not None:
                y0, x0, eh, ew = erase
                out[i, y0:y0 + eh, x0:x0 + ew] = 0.0
        return out

    def apply(self, img: np.ndarray, rng) -> np.ndarray:
        return self.apply_batch(img[None], rng)[0]


class CropBlurView:
    """Random resized crop, horizontal flip, gaussian blur, grayscale.
    Grayscale on single-channel input is the identity; the parameter draw
    still happens so batch and sequential application stay aligned."""

    def __init__(self, cfg: CropBlurAugmentConfig = CropBlurAugmentConfig()):
        if not 0.0 < cfg.crop_min <= cfg.crop_max <= 1.0:
            raise ConfigError(f"need 0 < crop_min <= crop_max <= 1, got "
                              f"{cfg.crop_min}/{cfg.crop_max}")
        if cfg.blur_sigma_max < 0:
            raise ConfigError("blur_sigma_max must be non-negative")
        for p in (cfg.hflip, cfg.gray_p):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"probabilities must be in [0, 1], got {p}")
        self.cfg = cfg

    def _draw(self, rng):
        c = self.cfg
        f = rng.uniform(c.crop_min, c.crop_max)
        margin = 1.0 - f
        cx = rng.uniform(-margin, margin)
        cy = rng.uniform(-margin, margin)
        sx = -1.0 if rng.uniform() < c.hflip else 1.0
        sigma = rng.uniform(0.0, c.blur_sigma_max)
        rng.uniform()  # grayscale coin; identity on single-channel data
        mat = np.array([[f * sx, 0, cx], [0, f, cy], [0, 0, 1.0]])
        return mat, sigma

    def apply_batch(self, imgs: np.ndarray, rng) -> np.ndarray:
        if imgs.ndim != 3:
            raise ShapeError(f"expected (B, H, W), got {imgs.shape}")
        drawn = [self._draw(rng) for _ in range(imgs.shape[0])]
        out = _warp_batch(imgs, np.stack([d[0] for d in drawn]))
        for i, (_, sigma) in enumerate(drawn):
            if sigma > 1e-3:
                out[i] = gaussian_filter(out[i], sigma, mode="reflect")
        return out

    def apply(self, img: np.ndarray, rng) -> np.ndarray:
        return self.apply_batch(img[None], rng)[0]
