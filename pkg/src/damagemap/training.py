"""Masked cross-entropy training per LOQO fold."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentationConfig, augment_sample, sample_rng
from .evaluation import MetricsReport, confusion, ensemble_predict, image_tensor, make_report, mean_report
from .geodata import UNLABELED, MergeScheme, dilate_mask, merge_between, merge_classes
from .model import ModelConfig, SiameseUNet, build_model, import_pretrained
from .sampling import FoldData, TilingConfig, build_fold_datasets, quarter_split, rects_intersect

log = logging.getLogger(__name__)


class LeakageError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 5e-5
    weight_decay: float = 5e-6
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    augment: bool = True
    dilate: bool = True
    dilate_kernel: int = 3
    dilate_eval: bool = False
    init: str = "scratch"  # or a checkpoint path
    grad_clip: Optional[float] = None
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    model_state: dict
    optimizer_state: dict
    epoch: int
    fold_index: int
    model_config: dict
    train_config: dict
    fingerprint: str = ""
    metrics: dict = field(default_factory=dict)
    loss_log: list[dict] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        torch.save(asdict(self), path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls(**torch.load(path, map_location="cpu", weights_only=False))

    def build_model(self) -> SiameseUNet:
        model = build_model(ModelConfig.from_dict(self.model_config))
        model.load_state_dict(self.model_state)
        model.eval()
        return model


def masked_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean pixel cross-entropy over pixels whose label is not UNLABELED.

    ``logits`` is (N, C, H, W) or (C, H, W). With no labeled pixel the loss
    is an exact zero that still carries a (zero) gradient.
    """
    if logits.dim() == 3:
        logits, labels = logits[None], labels[None]
    labels = labels.long()
    valid = labels != UNLABELED
    n_cls = logits.shape[1]
    if valid.any() and (labels[valid].max() >= n_cls or labels[valid].min() < 0):
        raise ValueError(f"label codes {torch.unique(labels[valid]).tolist()} exceed {n_cls} classes")
    if not valid.any():
        return logits.sum() * 0.0
    logp = F.log_softmax(logits, dim=1)
    nll = -logp.gather(1, torch.where(valid, labels, 0)[:, None]).squeeze(1)
    return nll[valid].mean()


def labels_tensor(batch: Sequence[np.ndarray], device="cpu") -> torch.Tensor:
    return torch.from_numpy(np.stack([np.ascontiguousarray(b) for b in batch])).to(device).long()


def check_no_leakage(fold: FoldData) -> None:
    for s in fold.train:
        if rects_intersect(s.rect, fold.spec.test_quarter):
            raise LeakageError(f"train patch at {s.origin} overlaps test quarter {fold.spec.test_quarter}")


def _seed_everything(seed: int, deterministic: bool) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def init_model(model_cfg: ModelConfig, train_cfg: TrainConfig, name_table=()) -> SiameseUNet:
    _seed_everything(train_cfg.seed, train_cfg.deterministic)
    model = build_model(ModelConfig.from_dict(model_cfg.to_dict()))
    if train_cfg.init != "scratch":
        import_pretrained(model, train_cfg.init, name_table)
    return model


def train_fold(
    fold: FoldData,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    aug_cfg: AugmentationConfig | None = None,
    *,
    log_path: str | Path | None = None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    lr_schedule: Callable[[int], float] | None = None,
    name_table=(),
    fingerprint: str = "",
    device: str = "cpu",
) -> Checkpoint:
    """Train one fold; returns the final checkpoint.

    ``fold.train`` labels must already use the model's class scheme.
    ``lr_schedule`` maps epoch -> learning-rate multiplier (constant if None).
    ``stop_after`` ends after that many epochs (for resumable runs).
    """
    check_no_leakage(fold)
    if not fold.train:
        raise ValueError(f"fold {fold.spec.fold_index} has no training patches")
    aug_cfg = aug_cfg or AugmentationConfig()
    model = init_model(model_cfg, train_cfg, name_table).to(device)
    opt = torch.optim.AdamW(model.parameters(), lr=train_cfg.learning_rate, betas=train_cfg.betas,
                            weight_decay=train_cfg.weight_decay)
    start, history = 0, []
    if resume is not None:
        model.load_state_dict(resume.model_state)
        opt.load_state_dict(resume.optimizer_state)
        start, history = resume.epoch + 1, list(resume.loss_log)

    n = len(fold.train)
    bs = train_cfg.batch_size
    last = train_cfg.epochs if stop_after is None else min(train_cfg.epochs, start + stop_after)
    epoch = start - 1
    for epoch in range(start, last):
        for g in opt.param_groups:
            g["lr"] = train_cfg.learning_rate * (lr_schedule(epoch) if lr_schedule else 1.0)
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
        model.train()
        losses, steps, skipped = [], 0, 0
        for start_i in range(0, n, bs):
            idx = order[start_i:start_i + bs]
            batch = [fold.train[i] for i in idx]
            if train_cfg.augment:
                batch = [augment_sample(s, aug_cfg, sample_rng(train_cfg.seed, epoch * n + int(i)))
                         for s, i in zip(batch, idx)]
            lab = labels_tensor([s.labels for s in batch], device)
            if not (lab != UNLABELED).any():
                skipped += 1
                continue
            logits = model(image_tensor([s.pre for s in batch], device), image_tensor([s.post for s in batch], device))
            loss = masked_cross_entropy(logits, lab)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if train_cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
            opt.step()
            steps += 1
            losses.append(float(loss.detach()))
        rec = {
            "fold": fold.spec.fold_index,
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "steps": steps,
            "skipped": skipped,
            "lr": opt.param_groups[0]["lr"],
        }
        history.append(rec)
        log.info("fold %d epoch %d loss %.4f (%d steps, %d skipped)", rec["fold"], epoch, rec["loss"], steps, skipped)
        if log_path is not None:
            with Path(log_path).open("a") as fh:
                fh.write(json.dumps(rec) + "\n")

    return Checkpoint(
        model_state={k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        optimizer_state=opt.state_dict(),
        epoch=epoch,
        fold_index=fold.spec.fold_index,
        model_config=model.cfg.to_dict(),
        train_config=train_cfg.to_dict(),
        fingerprint=fingerprint,
        loss_log=history,
    )


# --------------------------------------------------------------------------- LOQO protocol


def prepare_folds(
    pre: np.ndarray,
    post: np.ndarray,
    mask: np.ndarray,
    tiling: TilingConfig,
    train_cfg: TrainConfig,
    num_classes: int,
    *,
    valid: np.ndarray | None = None,
) -> tuple[list[FoldData], np.ndarray]:
    """Fold datasets with training labels (merged, optionally dilated) and the evaluation truth mask."""
    scheme = MergeScheme.from_classes(num_classes)
    merged = merge_classes(mask, scheme)
    train_mask = dilate_mask(merged, train_cfg.dilate_kernel) if train_cfg.dilate else merged
    eval_mask = dilate_mask(merged, train_cfg.dilate_kernel) if train_cfg.dilate_eval else merged
    specs = quarter_split(mask.shape[1], mask.shape[0])
    train_sets = build_fold_datasets(pre, post, train_mask, specs, tiling, valid=valid)
    test_sets = build_fold_datasets(pre, post, eval_mask, specs, tiling, valid=valid)
    folds = [FoldData(tr.spec, tr.train, te.test) for tr, te in zip(train_sets, test_sets)]
    return folds, eval_mask


def evaluate_fold(models: Sequence[SiameseUNet], fold: FoldData, pre, post, truth: np.ndarray,
                  tiling: TilingConfig, schemes: Sequence[MergeScheme | str], **kw) -> dict[str, MetricsReport]:
    """Reports for the fold's test quarter; ``truth`` uses the models' scheme."""
    src = MergeScheme.from_classes(models[0].cfg.num_classes)
    x0, y0, x1, y1 = fold.spec.test_quarter
    pred = ensemble_predict(models, pre, post, fold.spec.test_quarter, tiling, **kw)
    t = truth[y0:y1, x0:x1]
    out = {}
    for s in schemes:
        s = MergeScheme(s)
        cm = confusion(merge_between(pred, src, s), merge_between(t, src, s), s.num_classes)
        out[s.value] = make_report(cm, s, fold.spec.fold_index)
    return out


def run_loqo(
    pre: np.ndarray,
    post: np.ndarray,
    mask: np.ndarray,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    tiling: TilingConfig,
    aug_cfg: AugmentationConfig | None = None,
    *,
    folds: Sequence[int] = (0, 1, 2, 3),
    schemes: Sequence[MergeScheme | str] | None = None,
    log_dir: str | Path | None = None,
    device: str = "cpu",
) -> tuple[list[Checkpoint], dict[str, list[MetricsReport]]]:
    """Train and evaluate each requested fold on its held-out quarter.

    Returns the checkpoints and, per scheme, the fold reports followed by
    their mean.
    """
    fold_data, truth = prepare_folds(pre, post, mask, tiling, train_cfg, model_cfg.num_classes)
    src = MergeScheme.from_classes(model_cfg.num_classes)
    schemes = [MergeScheme(s) for s in (schemes or [src])]
    checkpoints, reports = [], {s.value: [] for s in schemes}
    for k in folds:
        fd = fold_data[k]
        log_path = Path(log_dir) / f"fold{k}_train.jsonl" if log_dir else None
        ckpt = train_fold(fd, model_cfg, train_cfg, aug_cfg, log_path=log_path, device=device)
        fold_reports = evaluate_fold([ckpt.build_model()], fd, pre, post, truth, tiling, schemes, device=device)
        ckpt.metrics = {s: r.to_dict() for s, r in fold_reports.items()}
        checkpoints.append(ckpt)
        for s, r in fold_reports.items():
            reports[s].append(r)
    for s in reports:
        reports[s].append(mean_report(reports[s]))
    return checkpoints, reports
