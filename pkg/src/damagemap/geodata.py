"""Raster/vector ingestion, point-to-footprint label transfer and label rasterization."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import rasterio
from affine import Affine
from rasterio.features import rasterize
from scipy.ndimage import maximum_filter
from shapely import STRtree
from shapely.geometry import Point, Polygon, mapping, shape

log = logging.getLogger(__name__)

UNLABELED = 255


class DamageLabel(IntEnum):
    NO_DAMAGE = 0
    MODERATE = 1
    SEVERE = 2
    DESTROYED = 3


class PointSource(str, Enum):
    EXTERNAL = "external"
    EXPERT = "expert"


class MergeScheme(str, Enum):
    FOUR = "four"
    THREE = "three"
    TWO = "two"

    @property
    def num_classes(self) -> int:
        return {"four": 4, "three": 3, "two": 2}[self.value]

    @classmethod
    def from_classes(cls, n: int) -> "MergeScheme":
        try:
            return {4: cls.FOUR, 3: cls.THREE, 2: cls.TWO}[int(n)]
        except KeyError:
            raise ValueError(f"no merge scheme with {n} classes") from None


# Column headers used in reports, in class order.
CLASS_NAMES = {
    MergeScheme.FOUR: ["No Damage", "Moderate Damage", "Severe Damage", "Destroyed"],
    MergeScheme.THREE: ["No Damage", "Moderate Damage", "Severe + Destroyed"],
    MergeScheme.TWO: ["No Damage", "Damage"],
}

_MERGE_TABLES = {
    MergeScheme.FOUR: (0, 1, 2, 3),
    MergeScheme.THREE: (0, 1, 2, 2),
    MergeScheme.TWO: (0, 1, 1, 1),
}


class GeoDataError(ValueError):
    pass


class CRSMismatchError(GeoDataError):
    pass


@dataclass
class GeoRaster:
    """Georeferenced image, pixels stored as (height, width, bands) uint8."""

    data: np.ndarray
    transform: Affine
    crs: str

    def __post_init__(self):
        if self.data.ndim != 3:
            raise GeoDataError(f"raster data must be (H, W, bands), got shape {self.data.shape}")
        h, w, b = self.data.shape
        if h <= 0 or w <= 0:
            raise GeoDataError("raster has an empty extent")
        if b < 3:
            raise GeoDataError(f"insufficient bands: {b} < 3")
        if abs(self.transform.determinant) == 0:
            raise GeoDataError("not georeferenced: transform is singular")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    @property
    def rgb(self) -> np.ndarray:
        return self.data[..., :3]


def load_raster(path: str | Path) -> GeoRaster:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"raster not found: {path}")
    with rasterio.open(path) as src:
        if src.count < 3:
            raise GeoDataError(f"insufficient bands in {path}: {src.count} < 3")
        if src.transform.is_identity or src.crs is None:
            raise GeoDataError(f"{path} is not georeferenced (missing geotransform or CRS)")
        data = src.read()
        order = _rgb_band_order(src)
        data = data[order + [i for i in range(src.count) if i not in order]]
        return GeoRaster(
            data=np.ascontiguousarray(np.moveaxis(data, 0, -1).astype(np.uint8, copy=False)),
            transform=src.transform,
            crs=src.crs.to_string(),
        )


def _rgb_band_order(src) -> list[int]:
    interp = [ci.name.lower() for ci in src.colorinterp]
    if all(c in interp for c in ("red", "green", "blue")):
        return [interp.index("red"), interp.index("green"), interp.index("blue")]
    return [0, 1, 2]


def write_raster(path: str | Path, raster: GeoRaster) -> None:
    data = np.moveaxis(raster.data, -1, 0)
    with rasterio.open(
        path, "w", driver="GTiff", width=raster.width, height=raster.height,
        count=raster.bands, dtype="uint8", crs=raster.crs, transform=raster.transform,
    ) as dst:
        dst.write(data)


def write_mask(path: str | Path, mask: np.ndarray, transform: Affine, crs: str,
               tags: dict[str, str] | None = None) -> None:
    with rasterio.open(
        path, "w", driver="GTiff", width=mask.shape[1], height=mask.shape[0],
        count=1, dtype="uint8", crs=crs, transform=transform, nodata=UNLABELED,
    ) as dst:
        dst.write(mask.astype(np.uint8), 1)
        if tags:
            dst.update_tags(**tags)


def load_mask(path: str | Path) -> tuple[np.ndarray, Affine, str, dict[str, str]]:
    with rasterio.open(path) as src:
        return src.read(1), src.transform, src.crs.to_string() if src.crs else "", src.tags()


# --------------------------------------------------------------------------- vectors


@dataclass(frozen=True)
class BuildingFootprint:
    id: Any
    polygon: Polygon

    @classmethod
    def from_rings(cls, id, rings: Sequence[Sequence[tuple[float, float]]]) -> "BuildingFootprint":
        return cls(id, Polygon(rings[0], rings[1:]))

    @property
    def barycentre(self) -> tuple[float, float]:
        c = self.polygon.centroid
        return c.x, c.y


@dataclass(frozen=True)
class DamagePoint:
    x: float
    y: float
    label: DamageLabel
    source: PointSource = PointSource.EXTERNAL

    def __post_init__(self):
        # rejects UNLABELED and anything else outside the four classes
        object.__setattr__(self, "label", DamageLabel(self.label))


def id_sort_key(fid) -> tuple:
    """Numeric ids order numerically, everything else by string."""
    if isinstance(fid, (int, np.integer)) and not isinstance(fid, bool):
        return (0, int(fid), "")
    return (1, 0, str(fid))


@dataclass
class LabeledFootprintSet:
    items: list[tuple[BuildingFootprint, int]]
    crs: str | None = None
    unassigned_points: int = 0

    def __post_init__(self):
        ids = [fp.id for fp, _ in self.items]
        if len(set(ids)) != len(ids):
            raise GeoDataError("duplicate footprint ids in labeled set")

    def labels(self) -> dict[Any, int]:
        return {fp.id: int(lab) for fp, lab in self.items}

    def counts(self) -> dict[str, int]:
        out = {lab.name: 0 for lab in DamageLabel}
        out["UNLABELED"] = 0
        for _, lab in self.items:
            out["UNLABELED" if lab == UNLABELED else DamageLabel(lab).name] += 1
        return out

    def merged(self, scheme: MergeScheme) -> "LabeledFootprintSet":
        table = _MERGE_TABLES[MergeScheme(scheme)]
        items = [(fp, lab if lab == UNLABELED else table[lab]) for fp, lab in self.items]
        return LabeledFootprintSet(items, self.crs, self.unassigned_points)

    def to_geojson(self) -> dict:
        feats = []
        for fp, lab in self.items:
            feats.append({
                "type": "Feature",
                "id": fp.id,
                "properties": {"damage": None if lab == UNLABELED else int(lab)},
                "geometry": mapping(fp.polygon),
            })
        out: dict = {"type": "FeatureCollection", "features": feats}
        if self.crs:
            out["crs"] = {"type": "name", "properties": {"name": self.crs}}
        return out


def _collection_crs(doc: dict) -> str | None:
    crs = doc.get("crs")
    if isinstance(crs, dict):
        return crs.get("properties", {}).get("name")
    return crs


def read_footprints(path: str | Path) -> tuple[list[BuildingFootprint], str | None, dict[Any, int]]:
    """Read a GeoJSON feature collection of building polygons.

    Returns the footprints, the collection CRS (if declared) and any
    pre-assigned labels taken from the optional ``damage`` property.
    """
    doc = json.loads(Path(path).read_text())
    footprints, prelabels = [], {}
    for i, feat in enumerate(doc.get("features", [])):
        fid = feat.get("id", feat.get("properties", {}).get("id", i))
        geom = shape(feat["geometry"])
        if geom.geom_type == "MultiPolygon":
            if len(geom.geoms) != 1:
                raise GeoDataError(f"footprint {fid!r} is a multi-part polygon")
            geom = geom.geoms[0]
        if geom.geom_type != "Polygon":
            raise GeoDataError(f"footprint {fid!r} has geometry type {geom.geom_type}")
        if not geom.is_valid:
            raise GeoDataError(f"footprint {fid!r} is not a valid polygon")
        footprints.append(BuildingFootprint(fid, geom))
        dmg = (feat.get("properties") or {}).get("damage")
        if dmg is not None:
            prelabels[fid] = int(DamageLabel(int(dmg)))
    return footprints, _collection_crs(doc), prelabels


def write_footprints(path: str | Path, labeled: LabeledFootprintSet) -> None:
    Path(path).write_text(json.dumps(labeled.to_geojson(), sort_keys=True, indent=1))


def read_points(path: str | Path) -> tuple[list[DamagePoint], str | None]:
    """Read damage points from CSV (x, y, label, source) or a GeoJSON point collection."""
    path = Path(path)
    if path.suffix.lower() in (".json", ".geojson"):
        doc = json.loads(path.read_text())
        pts = []
        for feat in doc.get("features", []):
            x, y = feat["geometry"]["coordinates"][:2]
            props = feat.get("properties", {})
            pts.append(DamagePoint(float(x), float(y), DamageLabel(int(props["label"])),
                                   PointSource(props.get("source", "external"))))
        return pts, _collection_crs(doc)
    pts = []
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            pts.append(DamagePoint(float(row["x"]), float(row["y"]), DamageLabel(int(row["label"])),
                                   PointSource((row.get("source") or "external").lower())))
    return pts, None


# --------------------------------------------------------------------------- labeling


def _check_crs(a: str | None, b: str | None, what: str) -> None:
    if a and b and a != b:
        raise CRSMismatchError(f"CRS mismatch between {what}: {a} != {b}")


def assign_point_labels(
    footprints: Sequence[BuildingFootprint],
    points: Iterable[DamagePoint],
    buffer_m: float = 7.5,
    *,
    footprints_crs: str | None = None,
    points_crs: str | None = None,
) -> LabeledFootprintSet:
    """Transfer point damage labels onto building footprints.

    A point is a candidate for every footprint within ``buffer_m`` of it
    (distance 0 inside the polygon). Among several candidates the point goes
    to the footprint with the nearest barycentre, exact ties resolved by the
    lowest id. A footprint receiving several points keeps the most severe
    label; footprints receiving none are UNLABELED. Output is sorted by id.
    """
    if not footprints:
        raise GeoDataError("empty footprint list")
    if buffer_m <= 0:
        raise ValueError("buffer_m must be positive")
    _check_crs(footprints_crs, points_crs, "footprints and points")

    fps = sorted(footprints, key=lambda f: id_sort_key(f.id))
    polys = [f.polygon for f in fps]
    cents = np.array([f.barycentre for f in fps], dtype=np.float64)
    tree = STRtree(polys)
    best = np.full(len(fps), -1, dtype=np.int64)
    unassigned = 0

    for p in points:
        cand = tree.query(Point(p.x, p.y), predicate="dwithin", distance=buffer_m)
        if len(cand) == 0:
            unassigned += 1
            continue
        cand = np.sort(cand)  # index order == id order, so argmin picks the lowest id on ties
        d2 = (cents[cand, 0] - p.x) ** 2 + (cents[cand, 1] - p.y) ** 2
        k = cand[int(np.argmin(d2))]
        best[k] = max(best[k], int(p.label))

    if unassigned:
        log.info("%d damage points fell outside every %.2f m buffer and were dropped", unassigned, buffer_m)
    items = [(fp, int(b) if b >= 0 else UNLABELED) for fp, b in zip(fps, best)]
    return LabeledFootprintSet(items, footprints_crs or points_crs, unassigned)


def rasterize_labels(
    labeled: LabeledFootprintSet,
    shape: tuple[int, int],
    transform: Affine,
    crs: str | None = None,
) -> np.ndarray:
    """Burn footprint labels into a (height, width) uint8 mask.

    Pixel membership is decided on pixel centres. Polygons are painted in
    ascending severity, so overlaps take the worst label. Background and
    unlabeled buildings are UNLABELED.
    """
    _check_crs(labeled.crs, crs, "footprints and raster grid")
    burn = sorted(
        ((fp.polygon, lab) for fp, lab in labeled.items if lab != UNLABELED),
        key=lambda t: t[1],
    )
    if not burn:
        return np.full(shape, UNLABELED, dtype=np.uint8)
    return rasterize(
        [(mapping(g), int(v)) for g, v in burn],
        out_shape=shape, transform=transform, fill=UNLABELED, dtype="uint8", all_touched=False,
    )


def rasterize_to_grid(labeled: LabeledFootprintSet, grid: GeoRaster) -> np.ndarray:
    return rasterize_labels(labeled, (grid.height, grid.width), grid.transform, grid.crs)


def dilate_mask(mask: np.ndarray, kernel: int = 3) -> np.ndarray:
    """Severity-max dilation with a square kernel; UNLABELED acts as -inf."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 1, got {kernel}")
    if kernel == 1:
        return mask.copy()
    work = mask.astype(np.int16)
    work[mask == UNLABELED] = -1
    out = maximum_filter(work, size=kernel, mode="constant", cval=-1)
    out[out < 0] = UNLABELED
    return out.astype(np.uint8)


def merge_classes(mask: np.ndarray, scheme: MergeScheme | str) -> np.ndarray:
    table = np.full(256, UNLABELED, dtype=np.uint8)
    table[:4] = _MERGE_TABLES[MergeScheme(scheme)]
    bad = (mask > 3) & (mask != UNLABELED)
    if bad.any():
        raise GeoDataError(f"invalid label values {np.unique(mask[bad]).tolist()}")
    return table[mask]


def merge_table(src: MergeScheme | str, dst: MergeScheme | str) -> tuple[int, ...]:
    """Class mapping from an already-merged scheme to a coarser one."""
    src, dst = MergeScheme(src), MergeScheme(dst)
    if dst.num_classes > src.num_classes:
        raise ValueError(f"cannot split {src.value}-scheme classes into {dst.value}")
    if src == MergeScheme.FOUR:
        return _MERGE_TABLES[dst]
    if src == dst:
        return tuple(range(src.num_classes))
    return (0, 1, 1)  # three -> two


def merge_between(mask: np.ndarray, src: MergeScheme | str, dst: MergeScheme | str) -> np.ndarray:
    table = np.full(256, UNLABELED, dtype=np.uint8)
    t = merge_table(src, dst)
    table[:len(t)] = t
    return table[mask]
