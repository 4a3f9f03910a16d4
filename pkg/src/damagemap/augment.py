"""Seeded geometric + photometric augmentation of pre/post/label patch triples.

Parameter drawing is split from application so every draw can be inspected
(``draw_geometric`` / ``draw_photometric``) and replayed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import cv2
import numpy as np

from .geodata import UNLABELED
from .sampling import PatchSample

FLIP_MODES = ("horizontal", "vertical", "both")
BLOCK1 = ("rgb_shift", "grayscale", "sepia")
BLOCK2 = ("brightness_contrast", "gamma")
BLOCK3 = ("blur", "downscale", "grid_distortion")

SEPIA = np.array([
    [0.393, 0.769, 0.189],
    [0.349, 0.686, 0.168],
    [0.272, 0.534, 0.131],
], dtype=np.float32)


@dataclass(frozen=True)
class AugmentationConfig:
    flip_prob: float = 0.5
    affine_prob: float = 0.5
    shift_range: tuple[float, float] = (-0.0625, 0.0625)
    scale_range: tuple[float, float] = (0.9, 1.1)
    rotate_range: tuple[float, float] = (-45.0, 45.0)
    block_prob: float = 0.5
    rgb_shift_range: tuple[float, float] = (-20.0, 20.0)
    brightness_range: tuple[float, float] = (-0.2, 0.2)
    contrast_range: tuple[float, float] = (-0.2, 0.2)
    gamma_range: tuple[float, float] = (80.0, 120.0)  # percent of a unit exponent
    blur_limit: tuple[int, int] = (3, 7)
    downscale_factor: float = 0.25
    grid_distort_range: tuple[float, float] = (-0.3, 0.3)
    grid_steps: int = 5
    independent_photometric: bool = True

    def __post_init__(self):
        for name in ("flip_prob", "affine_prob", "block_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} not a probability")
        lo, hi = self.blur_limit
        if lo < 1 or lo % 2 == 0 or hi % 2 == 0 or hi < lo:
            raise ValueError(f"blur_limit {self.blur_limit} must be odd bounds lo <= hi")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(flip_prob=0.0, affine_prob=0.0, block_prob=0.0)


@dataclass(frozen=True)
class AffineParams:
    shift_x: float  # fraction of patch width
    shift_y: float
    scale: float
    angle: float  # degrees, counter-clockwise


@dataclass(frozen=True)
class GeometricParams:
    flip: Optional[str] = None
    affine: Optional[AffineParams] = None


@dataclass(frozen=True)
class PhotometricParams:
    """One optional (op name, op args) per block; None means the block did not fire."""

    block1: Optional[tuple[str, tuple]] = None
    block2: Optional[tuple[str, tuple]] = None
    block3: Optional[tuple[str, tuple]] = None

    @property
    def blocks(self):
        return (self.block1, self.block2, self.block3)


def _uniform(rng: np.random.Generator, bounds) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def draw_geometric(cfg: AugmentationConfig, rng: np.random.Generator) -> GeometricParams:
    flip = None
    if rng.random() < cfg.flip_prob:
        flip = FLIP_MODES[int(rng.integers(len(FLIP_MODES)))]
    affine = None
    if rng.random() < cfg.affine_prob:
        affine = AffineParams(
            shift_x=_uniform(rng, cfg.shift_range),
            shift_y=_uniform(rng, cfg.shift_range),
            scale=_uniform(rng, cfg.scale_range),
            angle=_uniform(rng, cfg.rotate_range),
        )
    return GeometricParams(flip, affine)


def draw_photometric(cfg: AugmentationConfig, rng: np.random.Generator) -> PhotometricParams:
    blocks = []
    for ops in (BLOCK1, BLOCK2, BLOCK3):
        if rng.random() >= cfg.block_prob:
            blocks.append(None)
            continue
        op = ops[int(rng.integers(len(ops)))]
        blocks.append((op, _draw_op_args(op, cfg, rng)))
    return PhotometricParams(*blocks)


def _draw_op_args(op: str, cfg: AugmentationConfig, rng: np.random.Generator) -> tuple:
    if op == "rgb_shift":
        return tuple(_uniform(rng, cfg.rgb_shift_range) for _ in range(3))
    if op in ("grayscale", "sepia"):
        return ()
    if op == "brightness_contrast":
        return (_uniform(rng, cfg.brightness_range), _uniform(rng, cfg.contrast_range))
    if op == "gamma":
        return (_uniform(rng, cfg.gamma_range),)
    if op == "blur":
        lo, hi = cfg.blur_limit
        return (int(rng.choice(np.arange(lo, hi + 1, 2))),)
    if op == "downscale":
        return (cfg.downscale_factor,)
    if op == "grid_distortion":
        n = cfg.grid_steps
        xs = rng.uniform(*cfg.grid_distort_range, size=n + 1)
        ys = rng.uniform(*cfg.grid_distort_range, size=n + 1)
        return (tuple(xs.tolist()), tuple(ys.tolist()))
    raise ValueError(f"unknown photometric op {op!r}")


# --------------------------------------------------------------------------- geometric


def _flip(a: np.ndarray, mode: str) -> np.ndarray:
    if mode == "horizontal":
        return a[:, ::-1]
    if mode == "vertical":
        return a[::-1]
    return a[::-1, ::-1]


def affine_matrix(p: AffineParams, width: int, height: int) -> np.ndarray:
    centre = ((width - 1) / 2.0, (height - 1) / 2.0)
    m = cv2.getRotationMatrix2D(centre, p.angle, p.scale)
    m[0, 2] += p.shift_x * width
    m[1, 2] += p.shift_y * height
    return m


def warp(a: np.ndarray, m: np.ndarray, *, nearest: bool, fill) -> np.ndarray:
    h, w = a.shape[:2]
    return cv2.warpAffine(
        np.ascontiguousarray(a), m, (w, h),
        flags=cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT, borderValue=fill,
    )


def geometric_transform(sample: PatchSample, params: GeometricParams) -> PatchSample:
    """Apply one shared spatial transform to pre, post and labels."""
    pre, post, lab = sample.pre, sample.post, sample.labels
    if params.flip is not None:
        pre, post, lab = (_flip(a, params.flip) for a in (pre, post, lab))
    if params.affine is not None:
        h, w = lab.shape
        m = affine_matrix(params.affine, w, h)
        pre = warp(pre, m, nearest=False, fill=(0, 0, 0))
        post = warp(post, m, nearest=False, fill=(0, 0, 0))
        lab = warp(lab, m, nearest=True, fill=UNLABELED)
    return PatchSample(
        np.ascontiguousarray(pre), np.ascontiguousarray(post), np.ascontiguousarray(lab),
        sample.origin, sample.fold,
    )


def apply_geometric(sample: PatchSample, cfg: AugmentationConfig, rng: np.random.Generator) -> PatchSample:
    return geometric_transform(sample, draw_geometric(cfg, rng))


# --------------------------------------------------------------------------- photometric


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _grid_maps(width: int, height: int, xs, ys) -> tuple[np.ndarray, np.ndarray]:
    def axis(size, steps):
        n = len(steps) - 1
        knots = np.linspace(0, size - 1, n + 1)
        widths = np.diff(knots) * (1.0 + np.asarray(steps[:-1]))
        moved = np.concatenate([[0.0], np.cumsum(widths)])
        moved *= (size - 1) / moved[-1]
        return np.interp(np.arange(size), knots, moved).astype(np.float32)

    fx, fy = axis(width, xs), axis(height, ys)
    return np.broadcast_to(fx[None, :], (height, width)).copy(), np.broadcast_to(fy[:, None], (height, width)).copy()


def photometric_op(img: np.ndarray, op: str, args: tuple) -> np.ndarray:
    if op == "rgb_shift":
        return _to_u8(img.astype(np.float32) + np.asarray(args, dtype=np.float32))
    if op == "grayscale":
        g = cv2.cvtColor(np.ascontiguousarray(img), cv2.COLOR_RGB2GRAY)
        return np.repeat(g[..., None], 3, axis=2)
    if op == "sepia":
        return _to_u8(img.astype(np.float32) @ SEPIA.T)
    if op == "brightness_contrast":
        brightness, contrast = args
        return _to_u8(img.astype(np.float32) * (1.0 + contrast) + brightness * 255.0)
    if op == "gamma":
        (gamma,) = args
        if gamma == 100.0:
            return img.copy()
        return _to_u8(255.0 * (img.astype(np.float32) / 255.0) ** (gamma / 100.0))
    if op == "blur":
        (k,) = args
        return cv2.blur(np.ascontiguousarray(img), (k, k))
    if op == "downscale":
        (factor,) = args
        h, w = img.shape[:2]
        small = cv2.resize(img, (max(1, round(w * factor)), max(1, round(h * factor))), interpolation=cv2.INTER_AREA)
        return cv2.resize(small, (w, h), interpolation=cv2.INTER_LINEAR)
    if op == "grid_distortion":
        xs, ys = args
        h, w = img.shape[:2]
        mx, my = _grid_maps(w, h, xs, ys)
        return cv2.remap(np.ascontiguousarray(img), mx, my, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)
    raise ValueError(f"unknown photometric op {op!r}")


def photometric_transform(img: np.ndarray, params: PhotometricParams) -> np.ndarray:
    out = img
    for block in params.blocks:
        if block is not None:
            out = photometric_op(out, *block)
    return out if out is not img else img.copy()


def apply_photometric(img: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    return photometric_transform(img, draw_photometric(cfg, rng))


# --------------------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class AugmentationDraw:
    geometric: GeometricParams = field(default_factory=GeometricParams)
    pre: PhotometricParams = field(default_factory=PhotometricParams)
    post: PhotometricParams = field(default_factory=PhotometricParams)


def draw_sample(cfg: AugmentationConfig, rng: np.random.Generator) -> AugmentationDraw:
    geo = draw_geometric(cfg, rng)
    pre = draw_photometric(cfg, rng)
    post = draw_photometric(cfg, rng) if cfg.independent_photometric else pre
    return AugmentationDraw(geo, pre, post)


def transform_sample(sample: PatchSample, draw: AugmentationDraw) -> PatchSample:
    out = geometric_transform(sample, draw.geometric)
    out.pre = photometric_transform(out.pre, draw.pre)
    out.post = photometric_transform(out.post, draw.post)
    return out


def augment_sample(sample: PatchSample, cfg: AugmentationConfig, rng: np.random.Generator) -> PatchSample:
    """Shared geometric transform, then photometric blocks drawn per image."""
    return transform_sample(sample, draw_sample(cfg, rng))


def sample_rng(base_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(int(base_seed) ^ int(index))
