"""Training-time augmentations and 224x224 input standardization.

Seven augmentations are available: resized crop, rotation, perspective,
Gaussian blur, solarize, posterize, and histogram equalization. Geometric
ops transform image and mask identically (bilinear for images, nearest for
masks, fill value 0 / class 0); photometric ops never touch the mask.
The pipeline applies each op independently with probability ``apply_prob``
in a uniformly random order, then rescales the sample to 224x224.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from tipseg.errors import ConfigurationError
from tipseg.imgdata import GrayImage, LabelMask, Sample

TARGET_SIZE = 224

# Draw ranges for strengths the augmentations need but the config leaves
# unset. "minimal" halves the distance to each op's identity point.
_SOLARIZE_DRAW = (64, 192)
_POSTERIZE_DRAW = (3, 7)
_SOLARIZE_DRAW_MIN = (160, 224)
_POSTERIZE_DRAW_MIN = (6, 7)

OP_NAMES = ("resized_crop", "rotation", "perspective", "blur",
            "solarize", "posterize", "equalize")


@dataclass(frozen=True)
class RngStream:
    """Named deterministic random stream: (seed, stream) fixes all draws."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, self.stream]))


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass
class AugmentConfig:
    apply_prob: float = 0.5
    crop_scale: tuple[float, float] = (0.75, 1.0)
    crop_aspect: tuple[float, float] = (0.9, 1.1)
    rotation: tuple[float, float] = (-60.0, 60.0)
    perspective_distortion: float = 0.3
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    solarize_threshold: int | None = None   # None: drawn per application
    posterize_bits: int | None = None       # None: drawn per application
    preset: str = "full"                    # none | minimal | full

    def validate(self):
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ConfigurationError("apply_prob must lie in [0, 1]")
        for name in ("crop_scale", "crop_aspect", "rotation", "blur_sigma"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigurationError(f"{name} must satisfy min <= max, got ({lo}, {hi})")
        if self.blur_sigma[0] < 0:
            raise ConfigurationError("blur_sigma must be non-negative")
        if not 0.0 <= self.perspective_distortion <= 1.0:
            raise ConfigurationError("perspective_distortion must lie in [0, 1]")
        if self.solarize_threshold is not None and not 0 <= self.solarize_threshold <= 256:
            raise ConfigurationError("solarize_threshold must lie in [0, 256]")
        if self.posterize_bits is not None and not 1 <= self.posterize_bits <= 8:
            raise ConfigurationError("posterize_bits must lie in [1, 8]")
        if self.preset not in ("none", "minimal", "full"):
            raise ConfigurationError(f"unknown preset {self.preset!r}")

    def effective(self) -> "AugmentConfig":
        """Resolve the preset into concrete ranges.

        "minimal" halves every range/strength toward its identity point:
        no crop shrink past 0.875, rotations to +-30 degrees, distortion
        0.15, blur sigma capped at half, solarize thresholds nearer 256 and
        posterize keeping more bits.
        """
        self.validate()
        if self.preset != "minimal":
            return replace(self)

        def halve_to(value, identity):
            return identity - (identity - value) / 2.0

        sol = self.solarize_threshold
        bits = self.posterize_bits
        return replace(
            self,
            crop_scale=(halve_to(self.crop_scale[0], 1.0), halve_to(self.crop_scale[1], 1.0)),
            crop_aspect=(halve_to(self.crop_aspect[0], 1.0), halve_to(self.crop_aspect[1], 1.0)),
            rotation=(self.rotation[0] / 2.0, self.rotation[1] / 2.0),
            perspective_distortion=self.perspective_distortion / 2.0,
            blur_sigma=(self.blur_sigma[0] / 2.0, self.blur_sigma[1] / 2.0),
            solarize_threshold=None if sol is None else round(halve_to(sol, 256)),
            posterize_bits=None if bits is None else 8 - (8 - bits) // 2,
        )


# ---------------------------------------------------------------------------
# resampling primitives


def _resize(arr: np.ndarray, width: int, height: int, nearest: bool) -> np.ndarray:
    if arr.shape == (height, width):
        return arr.copy()
    im = Image.fromarray(arr, mode="L")
    method = Image.NEAREST if nearest else Image.BILINEAR
    return np.asarray(im.resize((width, height), method))


def _warp(arr: np.ndarray, inv: np.ndarray, nearest: bool, fill: int) -> np.ndarray:
    """Resample through an inverse projective map (output coords -> source)."""
    h, w = arr.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    denom = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / denom
    sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / denom
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    if nearest:
        ix = np.clip(np.rint(sx).astype(np.int64), 0, w - 1)
        iy = np.clip(np.rint(sy).astype(np.int64), 0, h - 1)
        out = arr[iy, ix]
    else:
        x0 = np.clip(np.floor(sx).astype(np.int64), 0, w - 1)
        y0 = np.clip(np.floor(sy).astype(np.int64), 0, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        fx = np.clip(sx - x0, 0.0, 1.0)
        fy = np.clip(sy - y0, 0.0, 1.0)
        a = arr.astype(np.float64)
        val = (a[y0, x0] * (1 - fx) * (1 - fy) + a[y0, x1] * fx * (1 - fy)
               + a[y1, x0] * (1 - fx) * fy + a[y1, x1] * fx * fy)
        out = np.clip(np.rint(val), 0, 255).astype(np.uint8)
    return np.where(inside, out, np.uint8(fill))


def _warp_sample(sample: Sample, forward: np.ndarray) -> Sample:
    inv = np.linalg.inv(forward)
    img = _warp(sample.image.values, inv, nearest=False, fill=0)
    mask = _warp(sample.mask.labels, inv, nearest=True, fill=0)
    return Sample(id=sample.id, image=GrayImage(img), mask=LabelMask(mask))


def _copy_sample(sample: Sample) -> Sample:
    return Sample(id=sample.id, image=GrayImage(sample.image.values.copy()),
                  mask=LabelMask(sample.mask.labels.copy()))


# ---------------------------------------------------------------------------
# geometric augmentations


def random_resized_crop(sample: Sample, cfg: AugmentConfig, rng) -> Sample:
    """Crop a random sub-region, rescale its longer side to 224, pad to 224x224."""
    rng = _as_generator(rng)
    img, mask = sample.image.values, sample.mask.labels
    h, w = img.shape
    if h < 2 or w < 2:
        cw, ch, x0, y0 = w, h, 0, 0
    else:
        s = rng.uniform(*cfg.crop_scale)
        a = rng.uniform(*cfg.crop_aspect)
        cw = int(np.clip(round(w * math.sqrt(s * a)), 1, w))
        ch = int(np.clip(round(h * math.sqrt(s / a)), 1, h))
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
    img_c = img[y0:y0 + ch, x0:x0 + cw]
    mask_c = mask[y0:y0 + ch, x0:x0 + cw]

    f = TARGET_SIZE / max(cw, ch)
    if cw >= ch:
        nw, nh = TARGET_SIZE, max(1, round(ch * f))
    else:
        nw, nh = max(1, round(cw * f)), TARGET_SIZE
    img_r = _resize(img_c, nw, nh, nearest=False)
    mask_r = _resize(mask_c, nw, nh, nearest=True)

    out_img = np.zeros((TARGET_SIZE, TARGET_SIZE), dtype=np.uint8)
    out_mask = np.zeros((TARGET_SIZE, TARGET_SIZE), dtype=np.uint8)
    py, px = (TARGET_SIZE - nh) // 2, (TARGET_SIZE - nw) // 2
    out_img[py:py + nh, px:px + nw] = img_r
    out_mask[py:py + nh, px:px + nw] = mask_r
    return Sample(id=sample.id, image=GrayImage(out_img), mask=LabelMask(out_mask))


def rotate_sample(sample: Sample, angle_deg: float) -> Sample:
    """Rotate image and mask about the center; exposed corners become 0/class 0."""
    if angle_deg == 0.0:
        return _copy_sample(sample)
    h, w = sample.image.values.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    a = math.radians(angle_deg)
    cos_a, sin_a = math.cos(a), math.sin(a)
    forward = np.array([
        [cos_a, -sin_a, cx - cos_a * cx + sin_a * cy],
        [sin_a, cos_a, cy - sin_a * cx - cos_a * cy],
        [0.0, 0.0, 1.0],
    ])
    return _warp_sample(sample, forward)


def random_rotation(sample: Sample, cfg: AugmentConfig, rng) -> Sample:
    rng = _as_generator(rng)
    angle = float(rng.uniform(*cfg.rotation))
    return rotate_sample(sample, angle)


def perspective_from_corners(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Homography mapping the four src corners onto dst (direct linear solve)."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rhs.append(u)
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.append(v)
    p = np.linalg.solve(np.asarray(rows, dtype=np.float64), np.asarray(rhs, dtype=np.float64))
    return np.array([[p[0], p[1], p[2]], [p[3], p[4], p[5]], [p[6], p[7], 1.0]])


def apply_projective(sample: Sample, forward: np.ndarray) -> Sample:
    return _warp_sample(sample, forward)


def random_perspective(sample: Sample, cfg: AugmentConfig, rng) -> Sample:
    """Displace the four corners by at most distortion * side / 2 and warp."""
    rng = _as_generator(rng)
    d = cfg.perspective_distortion
    if d == 0.0:
        return _copy_sample(sample)
    h, w = sample.image.values.shape
    src = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    max_dx, max_dy = d * (w - 1) / 2.0, d * (h - 1) / 2.0
    for _ in range(10):
        offsets = rng.uniform(-1.0, 1.0, size=(4, 2)) * (max_dx, max_dy)
        dst = src + offsets
        try:
            forward = perspective_from_corners(src, dst)
            np.linalg.inv(forward)
        except np.linalg.LinAlgError:
            continue  # degenerate corner draw, resample
        return _warp_sample(sample, forward)
    return _copy_sample(sample)


# ---------------------------------------------------------------------------
# photometric augmentations (mask untouched)


def blur_with_sigma(image: GrayImage, sigma: float) -> GrayImage:
    """Separable Gaussian blur, kernel radius ceil(3*sigma), edge replication."""
    radius = math.ceil(3.0 * sigma)
    if sigma <= 0 or radius < 1:
        return GrayImage(image.values.copy())
    i = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(i**2) / (2.0 * sigma**2))
    kernel /= kernel.sum()

    def conv_axis(a, axis):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        ap = np.pad(a, pad, mode="edge")
        out = np.zeros_like(a)
        for k, kv in enumerate(kernel):
            sl = [slice(None), slice(None)]
            sl[axis] = slice(k, k + a.shape[axis])
            out += kv * ap[tuple(sl)]
        return out

    a = image.values.astype(np.float64)
    a = conv_axis(conv_axis(a, 0), 1)
    return GrayImage(np.clip(np.rint(a), 0, 255).astype(np.uint8))


def gaussian_blur(image: GrayImage, cfg: AugmentConfig, rng) -> GrayImage:
    rng = _as_generator(rng)
    sigma = float(rng.uniform(*cfg.blur_sigma))
    return blur_with_sigma(image, sigma)


def solarize(image: GrayImage, threshold: int) -> GrayImage:
    """Invert every value >= threshold; threshold 256 is the identity."""
    if not 0 <= threshold <= 256:
        raise ConfigurationError("solarize threshold must lie in [0, 256]")
    arr = image.values
    return GrayImage(np.where(arr >= threshold, 255 - arr, arr).astype(np.uint8))


def posterize(image: GrayImage, bits: int) -> GrayImage:
    """Keep the top `bits` bits of every value; bits 8 is the identity."""
    if not 1 <= bits <= 8:
        raise ConfigurationError("posterize bits must lie in [1, 8]")
    keep = np.uint8(0xFF & ~((1 << (8 - bits)) - 1))
    return GrayImage(image.values & keep)


def equalize(image: GrayImage) -> GrayImage:
    """Histogram equalization through the cumulative distribution."""
    arr = image.values
    hist = np.bincount(arr.ravel(), minlength=256)
    nonzero = np.flatnonzero(hist)
    if len(nonzero) <= 1:
        return GrayImage(arr.copy())
    cdf = np.cumsum(hist)
    cdf_min = cdf[nonzero[0]]
    total = cdf[-1]
    lut = np.rint((cdf - cdf_min) * 255.0 / (total - cdf_min))
    lut = np.clip(lut, 0, 255).astype(np.uint8)
    return GrayImage(lut[arr])


# ---------------------------------------------------------------------------
# pipeline


def standardize(sample: Sample, size: int = TARGET_SIZE) -> Sample:
    """Resize-only preprocessing used for validation and test data."""
    img = _resize(sample.image.values, size, size, nearest=False)
    mask = _resize(sample.mask.labels, size, size, nearest=True)
    return Sample(id=sample.id, image=GrayImage(img), mask=LabelMask(mask))


def _draw_solarize_threshold(cfg: AugmentConfig, rng) -> int:
    if cfg.solarize_threshold is not None:
        return cfg.solarize_threshold
    lo, hi = _SOLARIZE_DRAW_MIN if cfg.preset == "minimal" else _SOLARIZE_DRAW
    return int(rng.integers(lo, hi + 1))


def _draw_posterize_bits(cfg: AugmentConfig, rng) -> int:
    if cfg.posterize_bits is not None:
        return cfg.posterize_bits
    lo, hi = _POSTERIZE_DRAW_MIN if cfg.preset == "minimal" else _POSTERIZE_DRAW
    return int(rng.integers(lo, hi + 1))


def pipeline(sample: Sample, cfg: AugmentConfig, rng, return_trace: bool = False):
    """Apply the augmentation pipeline and standardize to 224x224.

    Each op fires independently with probability ``apply_prob`` and the ops
    run in a uniformly random order. Preset "none" skips augmentation
    entirely; "minimal" applies the halved config from ``effective()``.
    """
    rng = _as_generator(rng)
    cfg.validate()
    applied: list[str] = []

    if cfg.preset != "none":
        eff = cfg.effective()
        eff.preset = cfg.preset  # keep draw-range selection aligned with the preset
        order = rng.permutation(len(OP_NAMES))
        coins = rng.random(len(OP_NAMES)) < eff.apply_prob
        for op_idx in order:
            if not coins[op_idx]:
                continue
            name = OP_NAMES[op_idx]
            if name == "resized_crop":
                sample = random_resized_crop(sample, eff, rng)
            elif name == "rotation":
                sample = random_rotation(sample, eff, rng)
            elif name == "perspective":
                sample = random_perspective(sample, eff, rng)
            elif name == "blur":
                sample = Sample(sample.id, gaussian_blur(sample.image, eff, rng),
                                LabelMask(sample.mask.labels.copy()))
            elif name == "solarize":
                t = _draw_solarize_threshold(eff, rng)
                sample = Sample(sample.id, solarize(sample.image, t),
                                LabelMask(sample.mask.labels.copy()))
            elif name == "posterize":
                b = _draw_posterize_bits(eff, rng)
                sample = Sample(sample.id, posterize(sample.image, b),
                                LabelMask(sample.mask.labels.copy()))
            elif name == "equalize":
                sample = Sample(sample.id, equalize(sample.image),
                                LabelMask(sample.mask.labels.copy()))
            applied.append(name)

    out = standardize(sample)
    if return_trace:
        return out, applied
    return out
