"""Project configuration file, overrides and fingerprints."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from .augment import AugmentationConfig
from .geodata import MergeScheme
from .model import ModelConfig
from .sampling import TilingConfig
from .training import TrainConfig


@dataclass
class Paths:
    pre: Path
    post: Path
    footprints: Path
    output: Path
    points: Optional[Path] = None
    valid: Optional[Path] = None
    name_table: Optional[Path] = None


@dataclass
class ProjectConfig:
    paths: Paths
    buffer_m: float = 7.5
    tiling: TilingConfig = field(default_factory=TilingConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    scheme: MergeScheme = MergeScheme.THREE

    def check_paths(self) -> None:
        for name in ("pre", "post", "footprints", "points", "valid", "name_table"):
            p = getattr(self.paths, name)
            if p is not None and not p.exists():
                raise FileNotFoundError(f"config path {name}={p} does not exist")

    def to_dict(self) -> dict:
        return {
            "paths": {k: (str(v) if v is not None else None) for k, v in asdict(self.paths).items()},
            "buffer_m": self.buffer_m,
            "tiling": asdict(self.tiling),
            "augmentation": asdict(self.augmentation),
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "scheme": self.scheme.value,
        }


def _build(cls, d: dict | None):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(v)
    return cls(**d)


def from_dict(doc: dict, base_dir: Path | None = None) -> ProjectConfig:
    base_dir = base_dir or Path.cwd()
    raw_paths = dict(doc["paths"])
    paths = Paths(**{k: (None if v is None else (base_dir / v).resolve()) for k, v in raw_paths.items()})
    scheme = MergeScheme(doc.get("scheme", "three"))
    model = dict(doc.get("model") or {})
    model.setdefault("num_classes", scheme.num_classes)
    return ProjectConfig(
        paths=paths,
        buffer_m=float(doc.get("buffer_m", 7.5)),
        tiling=_build(TilingConfig, doc.get("tiling")),
        augmentation=_build(AugmentationConfig, doc.get("augmentation")),
        model=_build(ModelConfig, model),
        training=_build(TrainConfig, doc.get("training")),
        scheme=scheme,
    )


def load_config(path: str | Path) -> ProjectConfig:
    path = Path(path)
    return from_dict(yaml.safe_load(path.read_text()), path.parent)


def with_overrides(cfg: ProjectConfig, *, encoder=None, classes=None, augment=None, dilate=None,
                   init=None, seed=None) -> ProjectConfig:
    model, training, scheme = cfg.model, cfg.training, cfg.scheme
    if encoder is not None:
        model = replace(model, encoder=encoder)
    if classes is not None:
        scheme = MergeScheme.from_classes(classes)
        model = replace(model, num_classes=int(classes))
    tr = {}
    if augment is not None:
        tr["augment"] = augment
    if dilate is not None:
        tr["dilate"] = dilate
    if init is not None:
        tr["init"] = init if init == "scratch" else str(Path(init).resolve())
    if seed is not None:
        tr["seed"] = int(seed)
    if tr:
        training = replace(training, **tr)
    return replace(cfg, model=model, training=training, scheme=scheme)


def digest(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def file_digest(path: Path | None) -> str | None:
    if path is None:
        return None
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def data_fingerprint(cfg: ProjectConfig) -> str:
    """Identity of the labeled scene: input file contents plus labeling settings."""
    p = cfg.paths
    return digest({
        "pre": file_digest(p.pre), "post": file_digest(p.post),
        "footprints": file_digest(p.footprints), "points": file_digest(p.points),
        "valid": file_digest(p.valid), "buffer_m": cfg.buffer_m,
    })


def run_fingerprint(cfg: ProjectConfig, data_fp: str) -> str:
    d = cfg.to_dict()
    d.pop("paths")
    return digest({"data": data_fp, **d})
