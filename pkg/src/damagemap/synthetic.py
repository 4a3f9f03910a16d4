"""Synthetic pre/post scenes with painted buildings and known damage.

Buildings are axis-aligned rectangles on a textured background. The post
image alters each damaged roof according to its class (see generate_scene).
Point annotations sit at barycentres, so the regular label-transfer path
reproduces the construction labels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import yaml
from affine import Affine
from shapely.geometry import box

from .geodata import (
    UNLABELED,
    BuildingFootprint,
    DamageLabel,
    DamagePoint,
    GeoRaster,
    LabeledFootprintSet,
    PointSource,
    write_footprints,
    write_raster,
)

CRS = "EPSG:32637"
PIXEL_M = 0.5

ROOF_COLOURS = np.array([
    [178, 74, 60], [150, 150, 155], [120, 95, 80], [200, 190, 175], [90, 100, 120],
], dtype=np.float32)


@dataclass
class SyntheticScene:
    pre: GeoRaster
    post: GeoRaster
    footprints: list[BuildingFootprint]
    points: list[DamagePoint]
    truth: dict[int, int]  # footprint id -> label (UNLABELED if no point was emitted)
    pixel_boxes: dict[int, tuple[int, int, int, int]]  # id -> (x0, y0, x1, y1)


def _texture(rng, h, w, scale, amp):
    small = rng.normal(0, 1, (max(2, h // scale), max(2, w // scale))).astype(np.float32)
    return cv2.resize(small, (w, h), interpolation=cv2.INTER_CUBIC) * amp


def _background(rng, size):
    base = np.array([96, 110, 84], dtype=np.float32)
    img = np.empty((size, size, 3), dtype=np.float32)
    low = _texture(rng, size, size, 64, 18)
    for c in range(3):
        img[..., c] = base[c] + low + _texture(rng, size, size, 4, 6) + rng.normal(0, 4, (size, size))
    # a few roads
    for _ in range(size // 256):
        if rng.random() < 0.5:
            y = int(rng.integers(0, size - 12))
            img[y:y + 12] = img[y:y + 12] * 0.3 + 120
        else:
            x = int(rng.integers(0, size - 12))
            img[:, x:x + 12] = img[:, x:x + 12] * 0.3 + 120
    return img


def _place_boxes(rng, size, n_target, min_side, max_side, gap):
    occupied = np.zeros((size, size), dtype=bool)
    boxes = []
    attempts = 0
    while len(boxes) < n_target and attempts < n_target * 30:
        attempts += 1
        w = int(rng.integers(min_side, max_side + 1))
        h = int(rng.integers(min_side, max_side + 1))
        x0 = int(rng.integers(gap, size - w - gap))
        y0 = int(rng.integers(gap, size - h - gap))
        if occupied[y0 - gap:y0 + h + gap, x0 - gap:x0 + w + gap].any():
            continue
        occupied[y0:y0 + h, x0:x0 + w] = True
        boxes.append((x0, y0, x0 + w, y0 + h))
    return boxes


def _rubble(rng, h, w, dark=False):
    grey = 105 + rng.normal(0, 38, (h, w)).astype(np.float32)
    grey += _texture(rng, h, w, 3, 20)
    img = np.stack([grey + 12, grey + 4, grey - 6], axis=-1)
    if dark:
        img = img * 0.45 + rng.normal(0, 6, (h, w, 1))
    return img


def generate_scene(
    size: int = 2048,
    seed: int = 0,
    n_buildings: int | None = None,
    class_probs=(0.4, 0.25, 0.15, 0.2),
    unlabeled_fraction: float = 0.1,
    min_side: int = 20,
    max_side: int = 56,
    origin=(500_000.0, 5_220_000.0),
) -> SyntheticScene:
    """Moderate roofs are tinted and holed, severe ones mostly rubble, destroyed ones dark rubble."""
    rng = np.random.default_rng(seed)
    n_buildings = n_buildings or int(size * size / 4200)
    pre = _background(rng, size)
    post = pre * 0.95 + 6 + rng.normal(0, 3, pre.shape)  # acquisition difference
    transform = Affine(PIXEL_M, 0.0, origin[0], 0.0, -PIXEL_M, origin[1])

    boxes = _place_boxes(rng, size, n_buildings, min_side, max_side, gap=6)
    footprints, points, truth, pix = [], [], {}, {}
    for fid, (x0, y0, x1, y1) in enumerate(boxes):
        h, w = y1 - y0, x1 - x0
        roof = ROOF_COLOURS[int(rng.integers(len(ROOF_COLOURS)))] + rng.normal(0, 10, 3)
        tex = _texture(rng, h, w, 6, 8)[..., None] + rng.normal(0, 3, (h, w, 1))
        roof_img = roof[None, None, :] + tex
        # ridge line
        if w >= h:
            roof_img[h // 2 - 1:h // 2 + 1] *= 0.8
        else:
            roof_img[:, w // 2 - 1:w // 2 + 1] *= 0.8
        pre[y0:y1, x0:x1] = roof_img
        # cast shadow
        pre[y1:min(size, y1 + 4), x0 + 3:x1 + 3] *= 0.6

        label = int(rng.choice(4, p=class_probs))
        if label == DamageLabel.NO_DAMAGE:
            dmg = roof_img
        elif label == DamageLabel.MODERATE:
            dmg = roof_img * np.array([0.75, 0.9, 1.25]) + 15
            for _ in range(int(rng.integers(2, 5))):
                r = int(rng.integers(2, max(3, min(h, w) // 5)))
                cx, cy = int(rng.integers(r, w - r)), int(rng.integers(r, h - r))
                cv2.circle(dmg, (cx, cy), r, (25.0, 25.0, 25.0), -1)
        elif label == DamageLabel.SEVERE:
            dmg = _rubble(rng, h, w)
            keep = rng.random((max(2, h // 8), max(2, w // 8))) < 0.3
            keep = cv2.resize(keep.astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST).astype(bool)
            dmg[keep] = roof_img[keep] * 0.7
        else:
            dmg = _rubble(rng, h, w, dark=True)
        post[y0:y1, x0:x1] = dmg * 0.95 + 6
        if label <= DamageLabel.MODERATE:
            # collapsed buildings cast no shadow
            post[y1:min(size, y1 + 4), x0 + 3:x1 + 3] *= 0.6

        wx0, wy0 = transform @ (x0, y0)
        wx1, wy1 = transform @ (x1, y1)
        fp = BuildingFootprint(fid, box(wx0, wy1, wx1, wy0))
        footprints.append(fp)
        pix[fid] = (x0, y0, x1, y1)
        if rng.random() < unlabeled_fraction:
            truth[fid] = UNLABELED
            continue
        truth[fid] = label
        bx, by = fp.barycentre
        source = PointSource.EXTERNAL if rng.random() < 0.4 else PointSource.EXPERT
        points.append(DamagePoint(bx, by, DamageLabel(label), source))
        if label > 0 and rng.random() < 0.3:
            # a second, milder observation of the same building
            points.append(DamagePoint(bx + 1.0, by - 1.0, DamageLabel(int(rng.integers(0, label))), source))

    to_u8 = lambda a: np.clip(np.rint(a), 0, 255).astype(np.uint8)
    return SyntheticScene(
        pre=GeoRaster(to_u8(pre), transform, CRS),
        post=GeoRaster(to_u8(post), transform, CRS),
        footprints=footprints,
        points=points,
        truth=truth,
        pixel_boxes=pix,
    )


def truth_mask(scene: SyntheticScene) -> np.ndarray:
    """Label mask painted directly from construction boxes (independent of rasterization)."""
    mask = np.full((scene.pre.height, scene.pre.width), UNLABELED, dtype=np.uint8)
    for fid, (x0, y0, x1, y1) in scene.pixel_boxes.items():
        if scene.truth[fid] != UNLABELED:
            mask[y0:y1, x0:x1] = scene.truth[fid]
    return mask


def write_project(scene: SyntheticScene, root, *, patch_size: int = 256, stride: int = 256,
                  model: dict | None = None, training: dict | None = None) -> Path:
    """Write rasters, footprints, points and a project config; returns the config path."""
    root = Path(root)
    data = root / "data"
    data.mkdir(parents=True, exist_ok=True)
    write_raster(data / "pre.tif", scene.pre)
    write_raster(data / "post.tif", scene.post)
    write_footprints(data / "footprints.geojson", LabeledFootprintSet([(fp, UNLABELED) for fp in scene.footprints], CRS))
    with (data / "points.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "label", "source"])
        for p in scene.points:
            w.writerow([repr(p.x), repr(p.y), int(p.label), p.source.value])
    doc = {
        "paths": {"pre": "data/pre.tif", "post": "data/post.tif", "footprints": "data/footprints.geojson",
                  "points": "data/points.csv", "output": "out"},
        "tiling": {"patch_size": patch_size, "stride": stride},
        "model": model or {"encoder": "resnet", "stage_channels": [8, 16, 16, 32, 32]},
        "training": training or {"epochs": 30, "batch_size": 8, "learning_rate": 2e-3},
        "scheme": "three",
    }
    path = root / "project.yaml"
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path
