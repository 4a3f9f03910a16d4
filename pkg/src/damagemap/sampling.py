"""Leave-one-quarter-out fold construction and overlapping patch extraction."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geodata import UNLABELED

Rect = tuple[int, int, int, int]  # x0, y0, x1, y1 (half-open pixel rectangle)


@dataclass(frozen=True)
class FoldSpec:
    fold_index: int
    test_quarter: Rect
    scene: Rect

    @property
    def train_rects(self) -> list[Rect]:
        """The two half-scene rectangles whose union is the scene minus the test quarter."""
        x0, y0, x1, y1 = self.test_quarter
        sx0, sy0, sx1, sy1 = self.scene
        rects = []
        # left/right half not containing the test quarter
        rects.append((x1, sy0, sx1, sy1) if x0 == sx0 else (sx0, sy0, x0, sy1))
        # top/bottom half not containing the test quarter
        rects.append((sx0, y1, sx1, sy1) if y0 == sy0 else (sx0, sy0, sx1, y0))
        return rects


@dataclass(frozen=True)
class TilingConfig:
    patch_size: int = 1024
    stride: int = 64
    min_labeled_fraction: float = 0.0
    min_valid_fraction: float = 0.0

    def __post_init__(self):
        if not 0 < self.stride <= self.patch_size:
            raise ValueError(f"need 0 < stride <= patch_size, got stride={self.stride}, patch={self.patch_size}")
        if not 0.0 <= self.min_labeled_fraction <= 1.0:
            raise ValueError("min_labeled_fraction must lie in [0, 1]")


@dataclass
class PatchSample:
    pre: np.ndarray
    post: np.ndarray
    labels: np.ndarray
    origin: tuple[int, int]
    fold: int = -1

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    @property
    def rect(self) -> Rect:
        x, y = self.origin
        return (x, y, x + self.labels.shape[1], y + self.labels.shape[0])


@dataclass
class FoldData:
    spec: FoldSpec
    train: list[PatchSample] = field(default_factory=list)
    test: list[PatchSample] = field(default_factory=list)


def quarter_split(scene_width: int, scene_height: int) -> list[FoldSpec]:
    if scene_width < 2 or scene_height < 2:
        raise ValueError(f"degenerate scene {scene_width}x{scene_height}")
    mx, my = scene_width // 2, scene_height // 2
    quarters = [
        (0, 0, mx, my),
        (mx, 0, scene_width, my),
        (0, my, mx, scene_height),
        (mx, my, scene_width, scene_height),
    ]
    scene = (0, 0, scene_width, scene_height)
    return [FoldSpec(k, q, scene) for k, q in enumerate(quarters)]


def axis_origins(start: int, stop: int, patch: int, stride: int) -> list[int]:
    """Stride grid along one axis, plus a final origin snapped to the far edge."""
    if stop - start < patch:
        raise ValueError(f"extent {stop - start} smaller than patch size {patch}")
    out = list(range(start, stop - patch + 1, stride))
    if out[-1] + patch < stop:
        out.append(stop - patch)
    return out


def patch_origins(region: Rect, cfg: TilingConfig) -> list[tuple[int, int]]:
    x0, y0, x1, y1 = region
    xs = axis_origins(x0, x1, cfg.patch_size, cfg.stride)
    ys = axis_origins(y0, y1, cfg.patch_size, cfg.stride)
    return [(x, y) for y in ys for x in xs]


def rects_intersect(a: Rect, b: Rect) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _keep(labels: np.ndarray, valid: np.ndarray | None, cfg: TilingConfig) -> bool:
    if cfg.min_labeled_fraction > 0:
        if np.mean(labels != UNLABELED) < cfg.min_labeled_fraction:
            return False
    if valid is not None:
        frac = float(np.mean(valid))
        if frac == 0.0 or frac < cfg.min_valid_fraction:
            return False
    return True


def _cut(pre, post, mask, origins, cfg, fold, valid) -> list[PatchSample]:
    p = cfg.patch_size
    out = []
    for x, y in origins:
        lab = mask[y:y + p, x:x + p]
        v = valid[y:y + p, x:x + p] if valid is not None else None
        if _keep(lab, v, cfg):
            out.append(PatchSample(pre[y:y + p, x:x + p], post[y:y + p, x:x + p], lab, (x, y), fold))
    return out


def _check_shapes(pre: np.ndarray, post: np.ndarray, mask: np.ndarray) -> None:
    if pre.shape[:2] != post.shape[:2] or pre.shape[:2] != mask.shape[:2]:
        raise ValueError(f"pre {pre.shape[:2]}, post {post.shape[:2]} and mask {mask.shape[:2]} differ")


def extract_patches(
    pre: np.ndarray,
    post: np.ndarray,
    mask: np.ndarray,
    region: Rect,
    cfg: TilingConfig,
    *,
    fold: int = -1,
    valid: np.ndarray | None = None,
) -> list[PatchSample]:
    """Cut aligned (pre, post, labels) patches covering ``region``.

    Arrays are (H, W, C) / (H, W); patches are views, not copies.
    """
    _check_shapes(pre, post, mask)
    x0, y0, x1, y1 = region
    if x0 < 0 or y0 < 0 or x1 > mask.shape[1] or y1 > mask.shape[0]:
        raise ValueError(f"region {region} outside scene {mask.shape[1]}x{mask.shape[0]}")
    return _cut(pre, post, mask, patch_origins(region, cfg), cfg, fold, valid)


def train_origins(spec: FoldSpec, cfg: TilingConfig) -> list[tuple[int, int]]:
    origins: set[tuple[int, int]] = set()
    for r in spec.train_rects:
        if r[2] - r[0] < cfg.patch_size or r[3] - r[1] < cfg.patch_size:
            continue
        origins.update(patch_origins(r, cfg))
    return sorted(origins, key=lambda o: (o[1], o[0]))


def build_fold_datasets(
    pre: np.ndarray,
    post: np.ndarray,
    mask: np.ndarray,
    folds: Sequence[FoldSpec],
    cfg: TilingConfig,
    *,
    valid: np.ndarray | None = None,
) -> list[FoldData]:
    _check_shapes(pre, post, mask)
    out = []
    for spec in folds:
        train = _cut(pre, post, mask, train_origins(spec, cfg), cfg, spec.fold_index, valid)
        p = cfg.patch_size
        for o in (s.origin for s in train):
            if rects_intersect((o[0], o[1], o[0] + p, o[1] + p), spec.test_quarter):
                raise RuntimeError(f"train patch at {o} overlaps test quarter {spec.test_quarter}")
        test = extract_patches(pre, post, mask, spec.test_quarter, cfg, fold=spec.fold_index, valid=valid)
        out.append(FoldData(spec, train, test))
    return out


# --------------------------------------------------------------------------- manifest


def write_manifest(path: str | Path, folds: Iterable[FoldData], extra: dict | None = None) -> None:
    with Path(path).open("w") as fh:
        if extra:
            fh.write(json.dumps({"header": extra}, sort_keys=True) + "\n")
        for fd in folds:
            for split, samples in (("train", fd.train), ("test", fd.test)):
                for s in samples:
                    fh.write(json.dumps({"fold": fd.spec.fold_index, "split": split,
                                         "x": s.origin[0], "y": s.origin[1], "size": s.size}) + "\n")


def read_manifest(path: str | Path) -> tuple[dict, list[dict]]:
    header, records = {}, []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if "header" in rec:
            header = rec["header"]
        else:
            records.append(rec)
    return header, records


def samples_from_manifest(records: Iterable[dict], pre, post, mask, *, fold: int, split: str) -> list[PatchSample]:
    out = []
    for r in records:
        if r["fold"] != fold or r["split"] != split:
            continue
        x, y, p = r["x"], r["y"], r["size"]
        out.append(PatchSample(pre[y:y + p, x:x + p], post[y:y + p, x:x + p], mask[y:y + p, x:x + p], (x, y), fold))
    return out
