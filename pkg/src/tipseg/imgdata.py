"""Image/mask data model, synthetic hand generator, and dataset file I/O.

Samples pair an 8-bit grayscale image with an integer label mask. Class 0 is
background; classes 1-4 are the left-hand fingertips (index through little)
and 5-8 the right-hand ones. The synthetic generator renders four finger
capsules per hand over a textured background and labels the distal portion
of each capsule as the fingertip region.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from tipseg.errors import ConfigurationError, DataValidationError, MissingInputError

NUM_CLASSES = 9
LEFT_CLASSES = (1, 2, 3, 4)
RIGHT_CLASSES = (5, 6, 7, 8)

# Relative finger lengths at positions left-to-right. Mirrored for the right
# hand, which makes hand side recoverable from the image alone.
_LENGTH_PROFILE = (0.95, 1.0, 0.92, 0.78)


@dataclass
class GrayImage:
    """Single-channel 8-bit image, row-major (H, W) uint8 array."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.size == 0:
            raise DataValidationError("image must be a non-empty 2-D array")
        if self.values.dtype != np.uint8:
            if self.values.min() < 0 or self.values.max() > 255:
                raise DataValidationError("image values must lie in [0, 255]")
            self.values = self.values.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class LabelMask:
    """Per-pixel class indices in {0..8}, row-major (H, W) uint8 array."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2 or self.labels.size == 0:
            raise DataValidationError("mask must be a non-empty 2-D array")
        if self.labels.dtype != np.uint8:
            self.labels = self.labels.astype(np.uint8, casting="unsafe")
        if int(self.labels.max()) >= NUM_CLASSES:
            raise DataValidationError(
                f"mask contains label {int(self.labels.max())}, valid range is 0..{NUM_CLASSES - 1}"
            )

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass
class Sample:
    """An image and its ground-truth mask; dimensions must agree."""

    id: str
    image: GrayImage
    mask: LabelMask

    def __post_init__(self):
        if self.image.values.shape != self.mask.labels.shape:
            raise DataValidationError(
                f"image shape {self.image.values.shape} != mask shape {self.mask.labels.shape}"
            )


@dataclass
class SplitSet:
    """Dataset partition into train/val/test id lists (pairwise disjoint)."""

    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for part in (self.train, self.val, self.test):
            for sid in part:
                if sid in seen:
                    raise DataValidationError(f"sample id {sid!r} appears in more than one split")
                seen.add(sid)

    def all_ids(self) -> list[str]:
        return list(self.train) + list(self.val) + list(self.test)

    def part(self, name: str) -> list[str]:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise ConfigurationError(f"unknown split {name!r}") from None


@dataclass
class SynthConfig:
    """Parameters of the synthetic hand generator.

    All pixel quantities refer to the configured canvas; geometry is scaled
    down automatically when a drawn hand would not fit.
    """

    image_width: int = 224
    image_height: int = 224
    hand_side_prob: float = 0.5          # probability of a right hand
    finger_length_range: tuple[float, float] = (50.0, 80.0)
    finger_width_range: tuple[float, float] = (13.0, 20.0)
    fingertip_fraction: float = 0.55     # fraction of finger length labeled as tip
    global_rotation_range: tuple[float, float] = (-25.0, 25.0)
    background_kind: str = "speckle"     # flat | gradient | speckle
    illumination_range: tuple[float, float] = (-25.0, 25.0)
    seed: int = 0

    def validate(self):
        if self.image_width < 8 or self.image_height < 8:
            raise ConfigurationError("canvas must be at least 8x8 pixels")
        if not 0.0 <= self.hand_side_prob <= 1.0:
            raise ConfigurationError("hand_side_prob must lie in [0, 1]")
        for name in ("finger_length_range", "finger_width_range",
                     "global_rotation_range", "illumination_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigurationError(f"{name} must satisfy min <= max, got ({lo}, {hi})")
        if self.finger_length_range[0] <= 0 or self.finger_width_range[0] <= 0:
            raise ConfigurationError("finger length/width ranges must be positive")
        if not 0.0 < self.fingertip_fraction < 1.0:
            raise ConfigurationError("fingertip_fraction must lie strictly in (0, 1)")
        if self.background_kind not in ("flat", "gradient", "speckle"):
            raise ConfigurationError(f"unknown background_kind {self.background_kind!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be a non-negative 64-bit integer")

    @classmethod
    def high_contrast(cls, **overrides) -> "SynthConfig":
        """Easy Otsu-friendly setup: flat dark background, bright near-full tips."""
        base = dict(
            background_kind="flat",
            illumination_range=(0.0, 0.0),
            fingertip_fraction=0.95,
            finger_width_range=(15.0, 22.0),
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class _Finger:
    base: np.ndarray      # (x, y) in pixel coordinates
    tip: np.ndarray
    radius: float
    label: int


def _rotate(points: np.ndarray, degrees: float) -> np.ndarray:
    a = math.radians(degrees)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return points @ rot.T


def _segment_distance(p0, p1, q0, q1) -> float:
    """Minimum distance between two 2-D segments."""
    def point_seg(p, a, b):
        ab = b - a
        denom = float(ab @ ab)
        t = 0.0 if denom == 0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
        return float(np.linalg.norm(p - (a + t * ab)))

    if _segments_intersect(p0, p1, q0, q1):
        return 0.0
    return min(point_seg(p0, q0, q1), point_seg(p1, q0, q1),
               point_seg(q0, p0, p1), point_seg(q1, p0, p1))


def _segments_intersect(p0, p1, q0, q1) -> bool:
    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    d1, d2 = cross(q0, q1, p0), cross(q0, q1, p1)
    d3, d4 = cross(p0, p1, q0), cross(p0, p1, q1)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def _hand_geometry(cfg: SynthConfig, rng: np.random.Generator) -> tuple[list[_Finger], bool]:
    """Draw finger capsules for one hand; returns (fingers, is_right)."""
    is_right = bool(rng.random() < cfg.hand_side_prob)
    theta = float(rng.uniform(*cfg.global_rotation_range))
    profile = _LENGTH_PROFILE[::-1] if is_right else _LENGTH_PROFILE
    classes = [8 - j for j in range(4)] if is_right else [1 + j for j in range(4)]

    base_len = rng.uniform(*cfg.finger_length_range, size=4)
    lengths = base_len * np.asarray(profile)
    radii = rng.uniform(*cfg.finger_width_range, size=4) / 2.0
    base_y = rng.uniform(-3.0, 3.0, size=4)

    # Base x positions spaced so adjacent capsules cannot touch; a diverging
    # fan plus bounded jitter keeps them apart along their whole length.
    gaps = [radii[j] + radii[j + 1] + 4.0 for j in range(3)]
    xs = np.concatenate([[0.0], np.cumsum(gaps)])
    xs -= xs.mean()

    for attempt in range(8):
        jitter_scale = 1.5 / (attempt + 1.0) if attempt < 7 else 0.0
        jitter = rng.uniform(-jitter_scale, jitter_scale, size=4)
        angles = np.array([(j - 1.5) * 7.0 for j in range(4)]) + jitter
        cand = []
        for j in range(4):
            a = math.radians(angles[j])
            direction = np.array([math.sin(a), -math.cos(a)])
            base = np.array([xs[j], base_y[j]])
            cand.append((base, base + lengths[j] * direction, radii[j]))
        ok = all(
            _segment_distance(cand[i][0], cand[i][1], cand[k][0], cand[k][1])
            >= cand[i][2] + cand[k][2] + 2.0
            for i in range(4) for k in range(i + 1, 4)
        )
        if ok:
            break
    fingers = cand

    # Global rotation about the geometry centroid, then place on canvas.
    pts = np.array([p for base, tip, _ in fingers for p in (base, tip)])
    centroid = pts.mean(axis=0)
    w, h = cfg.image_width, cfg.image_height
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    center = center + rng.uniform(-4.0, 4.0, size=2)

    rotated = []
    for base, tip, r in fingers:
        b = _rotate((base - centroid)[None, :], theta)[0]
        t = _rotate((tip - centroid)[None, :], theta)[0]
        rotated.append((b, t, r))

    # Shrink uniformly if the hand would leave the canvas.
    margin = 3.0
    extent = max(float(np.linalg.norm(p)) + r for b, t, r in rotated for p in (b, t))
    limit = min(center[0], center[1], w - 1 - center[0], h - 1 - center[1]) - margin
    scale = min(1.0, limit / extent) if extent > 0 else 1.0

    out = []
    for j, (b, t, r) in enumerate(rotated):
        out.append(_Finger(
            base=center + b * scale,
            tip=center + t * scale,
            radius=max(1.6, r * scale),
            label=classes[j],
        ))
    return out, is_right


def _capsule_field(finger: _Finger, xs, ys, start_frac: float = 0.0) -> np.ndarray:
    """Boolean raster of points within radius of the [start_frac..1] sub-segment."""
    a = finger.base + start_frac * (finger.tip - finger.base)
    b = finger.tip
    ab = b - a
    denom = float(ab @ ab)
    px = xs - a[0]
    py = ys - a[1]
    if denom == 0:
        d2 = px**2 + py**2
    else:
        t = np.clip((px * ab[0] + py * ab[1]) / denom, 0.0, 1.0)
        d2 = (px - t * ab[0]) ** 2 + (py - t * ab[1]) ** 2
    return d2 <= finger.radius**2


def _render_background(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.image_height, cfg.image_width
    if cfg.background_kind == "flat":
        return np.full((h, w), rng.uniform(38.0, 80.0))
    if cfg.background_kind == "gradient":
        b0, b1 = rng.uniform(30.0, 90.0, size=2)
        psi = rng.uniform(0.0, 2 * math.pi)
        ys, xs = np.mgrid[0:h, 0:w]
        proj = xs * math.cos(psi) + ys * math.sin(psi)
        lo, hi = proj.min(), proj.max()
        t = (proj - lo) / max(hi - lo, 1.0)
        return b0 + (b1 - b0) * t
    # speckle
    base = rng.uniform(40.0, 75.0)
    return base + rng.normal(0.0, 12.0, size=(h, w))


def synth_sample(cfg: SynthConfig, index: int) -> Sample:
    """Generate one sample, a pure function of (cfg.seed, index)."""
    cfg.validate()
    if index < 0:
        raise ConfigurationError("sample index must be non-negative")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, int(index)]))

    fingers, _ = _hand_geometry(cfg, rng)
    h, w = cfg.image_height, cfg.image_width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    img = _render_background(cfg, rng)
    mask = np.zeros((h, w), dtype=np.uint8)

    hand_base = rng.uniform(150.0, 215.0)
    for finger in fingers:
        body = _capsule_field(finger, xs, ys)
        shade = rng.uniform(-12.0, 12.0)
        axial = rng.uniform(-10.0, 10.0)
        ab = finger.tip - finger.base
        denom = max(float(ab @ ab), 1.0)
        t = ((xs - finger.base[0]) * ab[0] + (ys - finger.base[1]) * ab[1]) / denom
        img = np.where(body, hand_base + shade + axial * np.clip(t, 0.0, 1.0), img)
        tip = _capsule_field(finger, xs, ys, start_frac=1.0 - cfg.fingertip_fraction)
        mask[tip] = finger.label

    img = img + rng.uniform(*cfg.illumination_range)
    img = img + rng.normal(0.0, 3.0, size=(h, w))
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    return Sample(id=f"synth_{index:06d}", image=GrayImage(img), mask=LabelMask(mask))


def synth_dataset(cfg: SynthConfig, n_train: int, n_val: int, n_test: int,
                  out_dir: str | Path) -> SplitSet:
    """Generate and write a split dataset plus its manifest."""
    cfg.validate()
    if min(n_train, n_val, n_test) < 0:
        raise ConfigurationError("split sizes must be non-negative")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    split = SplitSet()
    idx = 0
    for name, count, ids in (("train", n_train, split.train),
                             ("val", n_val, split.val),
                             ("test", n_test, split.test)):
        for _ in range(count):
            sample = synth_sample(cfg, idx)
            sample = replace(sample, id=f"{name}_{idx:05d}")
            save_sample(sample, out)
            ids.append(sample.id)
            idx += 1
    save_split(split, out)
    return split


def save_split(split: SplitSet, dir: str | Path):
    lines = [f"{name},{sid}\n"
             for name, ids in (("train", split.train), ("val", split.val), ("test", split.test))
             for sid in ids]
    (Path(dir) / "splits.txt").write_text("".join(lines))


def load_split(dir: str | Path) -> SplitSet:
    path = Path(dir) / "splits.txt"
    if not path.exists():
        raise MissingInputError(f"no split manifest at {path}")
    split = SplitSet()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            name, sid = line.split(",", 1)
        except ValueError:
            raise DataValidationError(f"{path}:{lineno}: malformed manifest line {line!r}") from None
        split.part(name).append(sid)
    return SplitSet(split.train, split.val, split.test)  # re-check disjointness


def save_sample(sample: Sample, dir: str | Path):
    """Write `<id>.img.png` and `<id>.mask.png` (lossless 8-bit rasters)."""
    d = Path(dir)
    Image.fromarray(sample.image.values, mode="L").save(d / f"{sample.id}.img.png")
    Image.fromarray(sample.mask.labels, mode="L").save(d / f"{sample.id}.mask.png")


def load_sample(dir: str | Path, id: str) -> Sample:
    d = Path(dir)
    img_path = d / f"{id}.img.png"
    mask_path = d / f"{id}.mask.png"
    for p in (img_path, mask_path):
        if not p.exists():
            raise MissingInputError(f"missing sample file {p}")
    img = np.asarray(Image.open(img_path).convert("L"))
    mask = np.asarray(Image.open(mask_path).convert("L"))
    if img.shape != mask.shape:
        raise DataValidationError(
            f"sample {id!r}: image shape {img.shape} != mask shape {mask.shape}")
    return Sample(id=id, image=GrayImage(img), mask=LabelMask(mask))


def load_samples(dir: str | Path, ids) -> list[Sample]:
    return [load_sample(dir, sid) for sid in ids]


def class_histogram(mask: LabelMask) -> np.ndarray:
    """Pixel counts per class, length 9; sums to width*height."""
    return np.bincount(mask.labels.ravel(), minlength=NUM_CLASSES).astype(np.int64)
