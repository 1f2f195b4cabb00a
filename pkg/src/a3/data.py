"""Synthetic domain-shift data: oriented-stroke glyph classes, a
parameterized target-domain corruption, deterministic two-view
augmentations for the swap objective, and bundle file handling.

Glyphs are soft-painted line strokes so that 90-degree rotations are both
lossless and visually meaningful, which the rotation pretext task needs.
The target domain applies translate, intensity scale, gamma contrast, and
additive noise to independently jittered draws of the same class
templates.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import MAGIC_DATASET, check_magic, read_tensor_map, write_tensor_map
from .errors import ConfigError, ContractError, FormatError


@dataclass
class ShiftSpec:
    """Target-domain corruption parameters."""

    intensity_scale: float = 0.7
    noise_sigma: float = 0.15
    translation_px: int = 2
    contrast_gamma: float = 1.5

    def __post_init__(self) -> None:
        for name in ("intensity_scale", "noise_sigma", "contrast_gamma"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"shift field {name} must be finite")
        if self.intensity_scale < 0 or self.noise_sigma < 0:
            raise ConfigError("intensity_scale and noise_sigma must be >= 0")
        if self.contrast_gamma <= 0:
            raise ConfigError(
                f"contrast_gamma must be positive, got {self.contrast_gamma}")


@dataclass
class DomainSpec:
    """Dataset geometry, shift parameters, and the generation seed."""

    n_classes: int = 10
    samples_per_class: int = 100
    image_side: int = 16
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image_side < 8:
            raise ConfigError(
                f"image_side must be >= 8, got {self.image_side}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.samples_per_class < 1:
            raise ConfigError(
                f"samples_per_class must be >= 1, got {self.samples_per_class}")


@dataclass
class DatasetBundle:
    """Labeled source set, unlabeled target pool, held-out target labels.

    target_y_eval exists solely for the evaluator; training code paths
    accept only target_x.
    """

    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    target_y_eval: np.ndarray
    spec: DomainSpec | None = None


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _draw_template(side: int, rng: np.random.Generator) -> np.ndarray:
    """Soft-painted glyph of 2 or 3 oriented strokes, peak intensity 1."""
    img = np.zeros((side, side))
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    for _ in range(2 + int(rng.integers(0, 2))):
        cx, cy = rng.uniform(side * 0.25, side * 0.75, size=2)
        theta = rng.uniform(0.0, np.pi)
        length = side * rng.uniform(0.4, 0.65)
        for t in np.linspace(-0.5, 0.5, 3 * side):
            px = cx + t * length * np.cos(theta)
            py = cy + t * length * np.sin(theta)
            img += np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2 * 0.55 ** 2))
    return img / img.max()


def _jitter(template: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-sample variation: one-pixel roll, amplitude wobble, light noise."""
    img = np.roll(template, (int(rng.integers(-1, 2)), int(rng.integers(-1, 2))),
                  axis=(0, 1))
    img = img * rng.uniform(0.9, 1.1)
    img = img + rng.normal(0.0, 0.05, img.shape)
    return np.clip(img, 0.0, 1.0)


def apply_shift(img: np.ndarray, shift: ShiftSpec,
                rng: np.random.Generator) -> np.ndarray:
    """Target-domain corruption of one [0,1] image grid."""
    out = np.roll(img, (shift.translation_px, shift.translation_px), axis=(0, 1))
    out = np.clip(out * shift.intensity_scale, 0.0, 1.0) ** shift.contrast_gamma
    out = out + rng.normal(0.0, shift.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


def generate_domain_pair(spec: DomainSpec) -> DatasetBundle:
    """Deterministic source/target draw of the same glyph classes."""
    side = spec.image_side
    root = np.random.SeedSequence(spec.seed)
    ss_templates, ss_source, ss_target = root.spawn(3)
    templates = [_draw_template(side, np.random.default_rng(child))
                 for child in ss_templates.spawn(spec.n_classes)]

    n = spec.n_classes * spec.samples_per_class
    y = np.repeat(np.arange(spec.n_classes, dtype=np.int64),
                  spec.samples_per_class)
    rng_src = np.random.default_rng(ss_source)
    rng_tgt = np.random.default_rng(ss_target)
    source_x = np.empty((n, side * side))
    target_x = np.empty((n, side * side))
    for i, c in enumerate(y):
        source_x[i] = _jitter(templates[c], rng_src).reshape(-1)
        target_x[i] = apply_shift(_jitter(templates[c], rng_tgt), spec.shift,
                                  rng_tgt).reshape(-1)
    return DatasetBundle(source_x=source_x, source_y=y.copy(),
                         target_x=target_x, target_y_eval=y.copy(), spec=spec)


# ---------------------------------------------------------------------------
# Two-view augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    """Which augmentations the view pipeline applies."""

    crop: bool = True
    crop_min_frac: float = 0.7
    flip: bool = True
    noise_sigma: float = 0.05
    intensity: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.crop_min_frac <= 1.0:
            raise ConfigError(
                f"crop_min_frac must lie in (0, 1], got {self.crop_min_frac}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


DISABLED_AUGMENT = AugmentConfig(crop=False, flip=False, noise_sigma=0.0,
                                 intensity=False)


def _crop_resize(grid: np.ndarray, frac: float, ox: float, oy: float) -> np.ndarray:
    """Bilinear resample of a centered-at-offset crop back to full side."""
    side = grid.shape[0]
    span = frac * (side - 1)
    x0 = ox * ((side - 1) - span)
    y0 = oy * ((side - 1) - span)
    cols = x0 + np.linspace(0.0, span, side)
    rows = y0 + np.linspace(0.0, span, side)
    ci = np.clip(np.floor(cols).astype(np.int64), 0, side - 2)
    ri = np.clip(np.floor(rows).astype(np.int64), 0, side - 2)
    wc = cols - ci
    wr = rows - ri
    top = (grid[np.ix_(ri, ci)] * (1 - wc) + grid[np.ix_(ri, ci + 1)] * wc)
    bot = (grid[np.ix_(ri + 1, ci)] * (1 - wc) + grid[np.ix_(ri + 1, ci + 1)] * wc)
    return top * (1 - wr[:, None]) + bot * wr[:, None]


def _augment_one_view(x: np.ndarray, rng: np.random.Generator,
                      cfg: AugmentConfig) -> np.ndarray:
    side = math.isqrt(x.shape[1])
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        grid = x[i].reshape(side, side)
        if cfg.crop:
            frac = rng.uniform(cfg.crop_min_frac, 1.0)
            ox, oy = rng.uniform(0.0, 1.0, size=2)
            grid = _crop_resize(grid, frac, ox, oy)
        if cfg.flip and rng.random() < 0.5:
            grid = grid[:, ::-1]
        if cfg.intensity:
            grid = grid * rng.uniform(0.8, 1.2)
        if cfg.noise_sigma > 0.0:
            grid = grid + rng.normal(0.0, cfg.noise_sigma, grid.shape)
        if cfg.crop or cfg.flip or cfg.intensity or cfg.noise_sigma > 0.0:
            grid = np.clip(grid, 0.0, 1.0)
        out[i] = grid.reshape(-1)
    return out


def augment_two_views(x: np.ndarray, seed: int,
                      cfg: AugmentConfig | None = None):
    """Two independently augmented views of a flattened square batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or math.isqrt(x.shape[1]) ** 2 != x.shape[1]:
        raise ContractError(
            f"augment_two_views expects flattened square images, got {x.shape}")
    cfg = AugmentConfig() if cfg is None else cfg
    ss_a, ss_b = np.random.SeedSequence(seed).spawn(2)
    view_a = _augment_one_view(x, np.random.default_rng(ss_a), cfg)
    view_b = _augment_one_view(x, np.random.default_rng(ss_b), cfg)
    return view_a, view_b


# ---------------------------------------------------------------------------
# Bundle files
# ---------------------------------------------------------------------------

def save_bundle(path: str | Path, bundle: DatasetBundle) -> None:
    arrays = {
        "source_x": bundle.source_x,
        "source_y": bundle.source_y.astype(np.float64),
        "target_x": bundle.target_x,
        "target_y_eval": bundle.target_y_eval.astype(np.float64),
    }
    spec_json = "" if bundle.spec is None else json.dumps(
        dataclasses.asdict(bundle.spec), sort_keys=True)
    payload = spec_json.encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC_DATASET)
        write_tensor_map(f, arrays)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)


def load_bundle(path: str | Path) -> DatasetBundle:
    with open(path, "rb") as f:
        check_magic(f, MAGIC_DATASET)
        arrays = read_tensor_map(f)
        raw_len = f.read(8)
        if len(raw_len) != 8:
            raise FormatError(
                f"truncated bundle sidecar length at byte offset "
                f"{f.tell() - len(raw_len)}")
        (n,) = struct.unpack("<Q", raw_len)
        payload = f.read(n)
        if len(payload) != n:
            raise FormatError(
                f"truncated bundle sidecar at byte offset {f.tell() - len(payload)}")
    for key in ("source_x", "source_y", "target_x", "target_y_eval"):
        if key not in arrays:
            raise FormatError(f"bundle is missing tensor {key!r}")
    spec = None
    if payload:
        fields = json.loads(payload.decode("utf-8"))
        fields["shift"] = ShiftSpec(**fields["shift"])
        spec = DomainSpec(**fields)
    return DatasetBundle(
        source_x=arrays["source_x"],
        source_y=arrays["source_y"].astype(np.int64),
        target_x=arrays["target_x"],
        target_y_eval=arrays["target_y_eval"].astype(np.int64),
        spec=spec,
    )
