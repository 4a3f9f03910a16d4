"""Pixel-level confusion, F1 / balanced accuracy, stitched and ensembled prediction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .geodata import CLASS_NAMES, UNLABELED, MergeScheme
from .sampling import Rect, TilingConfig, patch_origins

log = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # counts[truth, pred]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion counts must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("negative confusion counts")

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.class_count != self.class_count:
            raise ValueError("class count mismatch")
        return ConfusionMatrix(self.counts + other.counts)

    def merged(self, table: Sequence[int]) -> "ConfusionMatrix":
        """Aggregate rows and columns through a class mapping (e.g. 4 -> 3)."""
        table = np.asarray(table)
        m = int(table.max()) + 1
        proj = np.zeros((self.class_count, m), dtype=np.int64)
        proj[np.arange(self.class_count), table] = 1
        return ConfusionMatrix(proj.T @ self.counts @ proj)


def confusion(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> ConfusionMatrix:
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} shapes differ")
    sel = truth != UNLABELED
    t = truth[sel].astype(np.int64)
    p = pred[sel].astype(np.int64)
    if t.size and (t.max() >= num_classes or p.max() >= num_classes or p.min() < 0):
        raise ValueError("label values outside the class range at labeled pixels")
    counts = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def f1_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """2TP / (2TP + FP + FN) per class; 0 where the denominator vanishes."""
    c = cm.counts
    tp = np.diag(c).astype(np.float64)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    den = 2 * tp + fp + fn
    return np.divide(2 * tp, den, out=np.zeros_like(tp), where=den > 0)


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    support = cm.counts.sum(axis=1)
    present = support > 0
    if not present.all():
        log.warning("balanced accuracy: classes %s have no truth pixels and are excluded",
                    np.flatnonzero(~present).tolist())
    if not present.any():
        return 0.0
    recall = np.diag(cm.counts)[present] / support[present]
    return float(recall.mean())


@dataclass
class MetricsReport:
    per_class_f1: list[float]
    macro_f1: float
    balanced_accuracy: float
    scheme: MergeScheme
    fold: int | str
    absent_classes: list[int] = field(default_factory=list)
    confusion: list[list[int]] | None = None

    @property
    def class_names(self) -> list[str]:
        return CLASS_NAMES[self.scheme]

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "scheme": self.scheme.value,
            "classes": self.class_names,
            "per_class_f1": self.per_class_f1,
            "macro_f1": self.macro_f1,
            "balanced_accuracy": self.balanced_accuracy,
            "absent_classes": self.absent_classes,
            "confusion": self.confusion,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["per_class_f1"], d["macro_f1"], d["balanced_accuracy"], MergeScheme(d["scheme"]),
                   d["fold"], d.get("absent_classes", []), d.get("confusion"))


def make_report(cm: ConfusionMatrix, scheme: MergeScheme | str, fold: int | str) -> MetricsReport:
    scheme = MergeScheme(scheme)
    if cm.class_count != scheme.num_classes:
        raise ValueError(f"{cm.class_count}-class confusion cannot be reported under {scheme.value}")
    f1 = f1_per_class(cm)
    c = cm.counts
    absent = [i for i in range(cm.class_count) if c[i].sum() + c[:, i].sum() == 0]
    return MetricsReport(
        per_class_f1=f1.tolist(),
        macro_f1=float(f1.mean()),
        balanced_accuracy=balanced_accuracy(cm),
        scheme=scheme,
        fold=fold,
        absent_classes=absent,
        confusion=c.tolist(),
    )


def mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    if not reports:
        raise ValueError("no reports to average")
    scheme = reports[0].scheme
    if any(r.scheme != scheme for r in reports):
        raise ValueError("fold reports use different merge schemes")
    f1 = np.mean([r.per_class_f1 for r in reports], axis=0)
    return MetricsReport(
        per_class_f1=f1.tolist(),
        macro_f1=float(np.mean([r.macro_f1 for r in reports])),
        balanced_accuracy=float(np.mean([r.balanced_accuracy for r in reports])),
        scheme=scheme,
        fold="mean",
        absent_classes=sorted({c for r in reports for c in r.absent_classes}),
    )


def report(folds: Iterable[tuple[int, ConfusionMatrix]], scheme: MergeScheme | str) -> list[MetricsReport]:
    """Per-fold reports followed by their arithmetic-mean report."""
    per_fold = [make_report(cm, scheme, k) for k, cm in folds]
    return per_fold + [mean_report(per_fold)]


# --------------------------------------------------------------------------- prediction


def image_tensor(batch: Sequence[np.ndarray], device="cpu") -> torch.Tensor:
    arr = np.stack([np.ascontiguousarray(a[..., :3]) for a in batch])
    return torch.from_numpy(arr).to(device).permute(0, 3, 1, 2).float().div_(255.0)


@torch.no_grad()
def predict_probabilities(
    models: Sequence[torch.nn.Module],
    pre: np.ndarray,
    post: np.ndarray,
    region: Rect,
    tiling: TilingConfig,
    *,
    batch_size: int = 8,
    device: str = "cpu",
) -> np.ndarray:
    """Mean softmax over models and overlapping patches, shape (C, h, w) for ``region``."""
    if not models:
        raise ValueError("need at least one model")
    classes = {m.cfg.num_classes for m in models}
    if len(classes) != 1:
        raise ValueError(f"models disagree on class count: {sorted(classes)}")
    n_cls = classes.pop()
    x0, y0, x1, y1 = region
    acc = np.zeros((n_cls, y1 - y0, x1 - x0), dtype=np.float64)
    hits = np.zeros((y1 - y0, x1 - x0), dtype=np.int64)
    p = tiling.patch_size
    for m in models:
        m.eval()
    origins = patch_origins(region, tiling)
    for i in range(0, len(origins), batch_size):
        chunk = origins[i:i + batch_size]
        a = image_tensor([pre[y:y + p, x:x + p] for x, y in chunk], device)
        b = image_tensor([post[y:y + p, x:x + p] for x, y in chunk], device)
        # average over models per patch first so k identical models reproduce one exactly
        prob = sum(torch.softmax(m(a, b), dim=1).double() for m in models) / len(models)
        prob = prob.cpu().numpy()
        for (x, y), pr in zip(chunk, prob):
            acc[:, y - y0:y - y0 + p, x - x0:x - x0 + p] += pr
            hits[y - y0:y - y0 + p, x - x0:x - x0 + p] += 1
    if (hits == 0).any():
        raise RuntimeError(f"region {region} is not fully covered by the patch grid")
    return acc / hits


def predict_quarter(model, pre, post, quarter: Rect, tiling: TilingConfig, **kw) -> np.ndarray:
    return ensemble_predict([model], pre, post, quarter, tiling, **kw)


def ensemble_predict(models, pre, post, quarter: Rect, tiling: TilingConfig, **kw) -> np.ndarray:
    prob = predict_probabilities(models, pre, post, quarter, tiling, **kw)
    return prob.argmax(axis=0).astype(np.uint8)


def damage_palette(scheme: MergeScheme) -> np.ndarray:
    """RGB lookup for damage maps; index 255 is black."""
    lut = np.zeros((256, 3), dtype=np.uint8)
    colours = {
        MergeScheme.FOUR: [(0, 170, 0), (255, 200, 0), (255, 110, 0), (200, 0, 0)],
        MergeScheme.THREE: [(0, 170, 0), (255, 200, 0), (200, 0, 0)],
        MergeScheme.TWO: [(0, 170, 0), (200, 0, 0)],
    }[MergeScheme(scheme)]
    lut[:len(colours)] = colours
    return lut


# --------------------------------------------------------------------------- tables


def _pct(v: float) -> str:
    return f"{round(100 * v)}%"


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    fmt = " | ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), "-+-".join("-" * w for w in widths)]
    lines += [fmt.format(*r) for r in rows]
    return "\n".join(lines)


def results_table(rows: Sequence[tuple[str, MetricsReport, MetricsReport]]) -> str:
    """Network rows with 3-class and 2-class column groups."""
    header = (["Network", "BAS_3", "F1_3"] + CLASS_NAMES[MergeScheme.THREE]
              + ["BAS_2", "F1_2"] + CLASS_NAMES[MergeScheme.TWO])
    body = []
    for name, r3, r2 in rows:
        body.append([name, _pct(r3.balanced_accuracy), _pct(r3.macro_f1)] + [_pct(v) for v in r3.per_class_f1]
                    + [_pct(r2.balanced_accuracy), _pct(r2.macro_f1)] + [_pct(v) for v in r2.per_class_f1])
    return _table(header, body)


def pretraining_table(rows: Sequence[tuple[bool, MetricsReport, MetricsReport]]) -> str:
    header = (["Pretraining", "F1_3"] + CLASS_NAMES[MergeScheme.THREE]
              + ["F1_2"] + CLASS_NAMES[MergeScheme.TWO])
    body = []
    for pretrained, r3, r2 in rows:
        body.append(["yes" if pretrained else "no", _pct(r3.macro_f1)] + [_pct(v) for v in r3.per_class_f1]
                    + [_pct(r2.macro_f1)] + [_pct(v) for v in r2.per_class_f1])
    return _table(header, body)


def ablation_table(columns: Sequence[tuple[str, MetricsReport, MetricsReport]]) -> str:
    header = ["Metric"] + [name for name, _, _ in columns]
    body = [
        ["F1_3"] + [_pct(r3.macro_f1) for _, r3, _ in columns],
        ["F1_2"] + [_pct(r2.macro_f1) for _, _, r2 in columns],
    ]
    return _table(header, body)
