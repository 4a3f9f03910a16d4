"""damagemap command line: label, tile, train, eval, ensemble, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from .evaluation import MetricsReport, ablation_table, damage_palette, mean_report, pretraining_table, results_table
from .geodata import (
    MergeScheme,
    assign_point_labels,
    load_mask,
    load_raster,
    rasterize_to_grid,
    read_footprints,
    read_points,
    write_footprints,
    write_mask,
    LabeledFootprintSet,
    UNLABELED,
)
from .model import EncoderKind
from .sampling import write_manifest
from .training import Checkpoint, evaluate_fold, init_model, prepare_folds, train_fold

log = logging.getLogger("damagemap")

DISPLAY = {"resnet": "ResNet", "seresnext": "SEResNeXt", "senet": "SENet", "dpn": "DualPathNet"}
DEVICE_ENV = "DAMAGEMAP_DEVICE"


class MissingArtifact(RuntimeError):
    pass


class FingerprintMismatch(RuntimeError):
    pass


def device() -> str:
    return os.environ.get(DEVICE_ENV, "cpu")


# --------------------------------------------------------------------------- helpers


def _labels_dir(cfg: C.ProjectConfig) -> Path:
    return cfg.paths.output / "labels"


def _require(path: Path, command: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {path}; run `damagemap {command}` first")
    return path


def _load_scene(cfg: C.ProjectConfig, force: bool):
    """Pre/post pixels, the 4-class label mask and the data fingerprint."""
    mask_path = _require(_labels_dir(cfg) / "label_mask.tif", "label")
    mask, _, _, tags = load_mask(mask_path)
    data_fp = C.data_fingerprint(cfg)
    if tags.get("data_fingerprint") != data_fp and not force:
        raise FingerprintMismatch("label mask was built from different inputs; re-run `damagemap label` or pass --force")
    pre, post = load_raster(cfg.paths.pre), load_raster(cfg.paths.post)
    valid = None
    if cfg.paths.valid is not None:
        valid = load_mask(cfg.paths.valid)[0] > 0
    return pre, post, mask, valid, data_fp


def run_id(cfg: C.ProjectConfig, fingerprint: str, zero_shot: bool = False) -> str:
    t = cfg.training
    parts = [
        cfg.model.encoder.value,
        f"c{cfg.model.num_classes}",
        "aug" if t.augment else "noaug",
        "dil" if t.dilate else "nodil",
        "scratch" if t.init == "scratch" else "pre",
        f"s{t.seed}",
    ]
    if zero_shot:
        parts.append("zs")
    return "-".join(parts) + "-" + fingerprint[:10]


def _run_meta(cfg: C.ProjectConfig, fingerprint: str, data_fp: str, zero_shot: bool = False) -> dict:
    t = cfg.training
    return {
        "fingerprint": fingerprint,
        "data_fingerprint": data_fp,
        "encoder": cfg.model.encoder.value,
        "num_classes": cfg.model.num_classes,
        "augment": t.augment,
        "dilate": t.dilate,
        "pretrained": t.init != "scratch",
        "zero_shot": zero_shot,
        "seed": t.seed,
        "config": cfg.to_dict(),
    }


def _folds(arg: str) -> list[int]:
    return [0, 1, 2, 3] if arg == "all" else [int(arg)]


def _effective(args) -> C.ProjectConfig:
    cfg = C.load_config(args.config)
    cfg.check_paths()
    return C.with_overrides(
        cfg,
        encoder=getattr(args, "encoder", None),
        classes=getattr(args, "classes", None),
        augment=False if getattr(args, "no_augment", False) else None,
        dilate=False if getattr(args, "no_dilate", False) else None,
        init=getattr(args, "init", None),
        seed=getattr(args, "seed", None),
    )


def _write_jsonl(path: Path, records) -> None:
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- label / tile


def cmd_label(args) -> int:
    cfg = _effective(args)
    pre = load_raster(cfg.paths.pre)
    footprints, fp_crs, prelabels = read_footprints(cfg.paths.footprints)
    points, pt_crs = read_points(cfg.paths.points) if cfg.paths.points else ([], None)
    fp_crs = fp_crs or pre.crs
    labeled = assign_point_labels(footprints, points, cfg.buffer_m, footprints_crs=fp_crs,
                                  points_crs=pt_crs or fp_crs)
    if prelabels:
        # pre-labelled features merge with point labels, worst severity wins
        items = []
        for fp, lab in labeled.items:
            pl = prelabels.get(fp.id)
            if pl is not None:
                lab = pl if lab == UNLABELED else max(lab, pl)
            items.append((fp, lab))
        labeled = LabeledFootprintSet(items, labeled.crs, labeled.unassigned_points)
    mask = rasterize_to_grid(labeled, pre)
    data_fp = C.data_fingerprint(cfg)

    out = _labels_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_footprints(out / "labeled_footprints.geojson", labeled)
    write_mask(out / "label_mask.tif", mask, pre.transform, pre.crs, tags={"data_fingerprint": data_fp})
    counts = labeled.counts()
    (out / "counts.json").write_text(json.dumps({
        "data_fingerprint": data_fp,
        "counts": counts,
        "unassigned_points": labeled.unassigned_points,
        "buildings": {str(fp.id): (None if lab == UNLABELED else lab) for fp, lab in labeled.items},
    }, indent=1, sort_keys=True))

    for name, n in counts.items():
        print(f"{name:>10}: {n}")
    if counts["UNLABELED"]:
        log.warning("%d buildings received no damage label", counts["UNLABELED"])
    if labeled.unassigned_points:
        log.warning("%d damage points fell outside every %.1f m buffer", labeled.unassigned_points, cfg.buffer_m)
    return 0


def cmd_tile(args) -> int:
    cfg = _effective(args)
    mask_path = _require(_labels_dir(cfg) / "label_mask.tif", "label")
    mask, _, _, tags = load_mask(mask_path)
    pre = post = np.zeros(mask.shape + (3,), dtype=np.uint8)  # geometry only
    folds, _ = prepare_folds(pre, post, mask, cfg.tiling, replace(cfg.training, dilate=False), 4)
    out = cfg.paths.output / "tiles"
    out.mkdir(parents=True, exist_ok=True)
    header = {"data_fingerprint": tags.get("data_fingerprint"), "tiling": cfg.to_dict()["tiling"],
              "scene": [mask.shape[1], mask.shape[0]]}
    write_manifest(out / "manifest.jsonl", folds, header)
    for fd in folds:
        print(f"fold {fd.spec.fold_index}: test quarter {fd.spec.test_quarter}, "
              f"{len(fd.train)} train / {len(fd.test)} test patches")
    return 0


# --------------------------------------------------------------------------- train


def _train_one(cfg_dict: dict, fold: int, run_dir: str, fingerprint: str, force: bool) -> int:
    cfg = C.from_dict(cfg_dict, Path("/"))
    pre, post, mask, valid, _ = _load_scene(cfg, force)
    folds, _ = prepare_folds(pre.rgb, post.rgb, mask, cfg.tiling, cfg.training, cfg.model.num_classes, valid=valid)
    fold_dir = Path(run_dir) / f"fold{fold}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    log_path = fold_dir / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    table = _name_table(cfg)
    ckpt = train_fold(folds[fold], cfg.model, cfg.training, cfg.augmentation, log_path=log_path,
                      fingerprint=fingerprint, name_table=table, device=device())
    ckpt.save(fold_dir / "checkpoint.pt")
    return fold


def _name_table(cfg: C.ProjectConfig):
    from .model.io import load_name_table

    return load_name_table(cfg.paths.name_table) if cfg.paths.name_table else ()


def cmd_train(args) -> int:
    cfg = _effective(args)
    _, _, _, _, data_fp = _load_scene(cfg, args.force)
    fp = C.run_fingerprint(cfg, data_fp)
    run_dir = cfg.paths.output / "runs" / run_id(cfg, fp)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "run.json").write_text(json.dumps(_run_meta(cfg, fp, data_fp), indent=1, sort_keys=True))
    folds = _folds(args.fold)
    cfg_dict = json.loads(json.dumps(cfg.to_dict()))
    if args.jobs > 1 and len(folds) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            done = list(pool.map(_train_one, [cfg_dict] * len(folds), folds, [str(run_dir)] * len(folds),
                                 [fp] * len(folds), [args.force] * len(folds)))
    else:
        done = [_train_one(cfg_dict, k, str(run_dir), fp, args.force) for k in folds]
    print(f"trained folds {done} -> {run_dir}")
    return 0 if sorted(done) == sorted(folds) else 1


# --------------------------------------------------------------------------- eval / ensemble


def _evaluate(models_per_fold: dict[int, list], cfg: C.ProjectConfig, pre, post, mask, valid,
              out_dir: Path, name: str, schemes: list[MergeScheme], maps: bool,
              fingerprint: str) -> dict[str, list[MetricsReport]]:
    folds, truth = prepare_folds(pre.rgb, post.rgb, mask, cfg.tiling, cfg.training, cfg.model.num_classes, valid=valid)
    reports: dict[str, list[MetricsReport]] = {s.value: [] for s in schemes}
    for k, models in sorted(models_per_fold.items()):
        fold_reports = evaluate_fold(models, folds[k], pre.rgb, post.rgb, truth, cfg.tiling, schemes, device=device())
        for s, r in fold_reports.items():
            reports[s].append(r)
        if maps:
            _write_damage_map(models, folds[k], pre, post, cfg, out_dir)
    records = []
    for s, rs in reports.items():
        rs.append(mean_report(rs))
        records += [{"name": name, "fingerprint": fingerprint, **r.to_dict()} for r in rs]
    _write_jsonl(out_dir / "reports.jsonl", records)
    (out_dir / "table.txt").write_text(_table_for(name, reports) + "\n")
    return reports


def _write_damage_map(models, fold, pre, post, cfg, out_dir: Path) -> None:
    from .evaluation import ensemble_predict
    from affine import Affine

    x0, y0, x1, y1 = fold.spec.test_quarter
    pred = ensemble_predict(models, pre.rgb, post.rgb, fold.spec.test_quarter, cfg.tiling, device=device())
    rgb = damage_palette(MergeScheme.from_classes(cfg.model.num_classes))[pred]
    from .geodata import GeoRaster, write_raster

    (out_dir / "maps").mkdir(exist_ok=True)
    write_raster(out_dir / "maps" / f"fold{fold.spec.fold_index}_damage.tif",
                 GeoRaster(rgb, pre.transform @ Affine.translation(x0, y0), pre.crs))


def _table_for(name: str, reports: dict[str, list[MetricsReport]]) -> str:
    three, two = reports.get("three"), reports.get("two")
    if three and two:
        return results_table([(name, three[-1], two[-1])])
    lines = []
    for s, rs in reports.items():
        m = rs[-1]
        lines.append(f"{name} [{s}] macro F1 {m.macro_f1:.4f} BAS {m.balanced_accuracy:.4f} "
                     + " ".join(f"{n}={v:.4f}" for n, v in zip(m.class_names, m.per_class_f1)))
    return "\n".join(lines)


def _schemes(report_classes: list[int], model_classes: int) -> list[MergeScheme]:
    return [MergeScheme.from_classes(c) for c in report_classes if c <= model_classes]


def _load_checkpoint(path: Path, fingerprint: str, force: bool) -> Checkpoint:
    ck = Checkpoint.load(_require(path, "train"))
    if ck.fingerprint != fingerprint and not force:
        raise FingerprintMismatch(f"{path} was trained under fingerprint {ck.fingerprint[:12]}, "
                                  f"current config is {fingerprint[:12]}; pass --force to evaluate anyway")
    return ck


def cmd_eval(args) -> int:
    cfg = _effective(args)
    pre, post, mask, valid, data_fp = _load_scene(cfg, args.force)
    fp = C.run_fingerprint(cfg, data_fp)
    folds = _folds(args.fold)
    if args.zero_shot:
        if cfg.training.init == "scratch":
            raise SystemExit("--zero-shot needs --init <checkpoint>")
        run_dir = cfg.paths.output / "runs" / run_id(cfg, fp, zero_shot=True)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "run.json").write_text(json.dumps(_run_meta(cfg, fp, data_fp, True), indent=1, sort_keys=True))
        model = init_model(cfg.model, cfg.training, _name_table(cfg)).eval()
        models = {k: [model] for k in folds}
        name = DISPLAY[cfg.model.encoder.value] + "-ZS"
    else:
        run_dir = Path(args.run) if args.run else cfg.paths.output / "runs" / run_id(cfg, fp)
        _require(run_dir, "train")
        models = {k: [_load_checkpoint(run_dir / f"fold{k}" / "checkpoint.pt", fp, args.force).build_model()]
                  for k in folds}
        name = DISPLAY[cfg.model.encoder.value]
    schemes = _schemes(args.report_classes, cfg.model.num_classes)
    reports = _evaluate(models, cfg, pre, post, mask, valid, run_dir, name, schemes, args.maps, fp)
    print((run_dir / "table.txt").read_text())
    return 0 if all(len(rs) == len(folds) + 1 for rs in reports.values()) else 1


def cmd_ensemble(args) -> int:
    base = _effective(args)
    pre, post, mask, valid, data_fp = _load_scene(base, args.force)
    folds = _folds(args.fold)
    models: dict[int, list] = {k: [] for k in folds}
    members = []
    for enc in args.encoders:
        cfg = C.with_overrides(base, encoder=enc)
        fp = C.run_fingerprint(cfg, data_fp)
        rd = cfg.paths.output / "runs" / run_id(cfg, fp)
        members.append(rd.name)
        for k in folds:
            models[k].append(_load_checkpoint(rd / f"fold{k}" / "checkpoint.pt", fp, args.force).build_model())
    ens_dir = base.paths.output / "ensembles" / C.digest(sorted(members))[:12]
    ens_dir.mkdir(parents=True, exist_ok=True)
    (ens_dir / "ensemble.json").write_text(json.dumps({"members": members, "data_fingerprint": data_fp},
                                                      indent=1, sort_keys=True))
    schemes = _schemes(args.report_classes, base.model.num_classes)
    reports = _evaluate(models, base, pre, post, mask, valid, ens_dir, args.name, schemes, args.maps,
                        C.digest(members))
    print((ens_dir / "table.txt").read_text())
    return 0 if all(len(rs) == len(folds) + 1 for rs in reports.values()) else 1


# --------------------------------------------------------------------------- report


def _mean_rows(path: Path) -> dict[str, MetricsReport]:
    out = {}
    for line in path.read_text().splitlines():
        d = json.loads(line)
        if d["fold"] == "mean":
            out[d["scheme"]] = MetricsReport.from_dict(d)
    return out


def collect_runs(output: Path) -> list[dict]:
    runs = []
    for meta_path in sorted((output / "runs").glob("*/run.json")):
        rep = meta_path.parent / "reports.jsonl"
        if not rep.exists():
            continue
        meta = json.loads(meta_path.read_text())
        meta["reports"] = _mean_rows(rep)
        meta["dir"] = meta_path.parent.name
        runs.append(meta)
    return runs


def _variant_key(run: dict, *drop: str) -> tuple:
    keys = ("encoder", "num_classes", "augment", "dilate", "pretrained", "zero_shot", "seed")
    return tuple(run[k] for k in keys if k not in drop)


def build_tables(output: Path) -> str:
    runs = collect_runs(output)
    sections = []
    rows = []
    for r in runs:
        if "three" not in r["reports"] or "two" not in r["reports"]:
            continue
        name = DISPLAY[r["encoder"]] + ("-ZS" if r["zero_shot"] else "")
        tags = [t for t, on in (("no-aug", not r["augment"]), ("no-dil", not r["dilate"]),
                                ("pretrained", r["pretrained"] and not r["zero_shot"])) if on]
        rows.append((name + (f" [{', '.join(tags)}]" if tags else ""), r["reports"]["three"], r["reports"]["two"]))
    for ens in sorted((output / "ensembles").glob("*/reports.jsonl")):
        rep = _mean_rows(ens)
        if "three" in rep and "two" in rep:
            name = json.loads(ens.read_text().splitlines()[0])["name"]
            rows.append((name, rep["three"], rep["two"]))
    if rows:
        sections.append("Results (mean over folds)\n" + results_table(rows))

    trained = [r for r in runs if not r["zero_shot"] and "three" in r["reports"] and "two" in r["reports"]]
    groups: dict[tuple, dict] = {}
    for r in trained:
        groups.setdefault(_variant_key(r, "pretrained"), {})[r["pretrained"]] = r
    for key, g in groups.items():
        if len(g) == 2:
            sections.append(f"Pretraining comparison ({DISPLAY[key[0]]})\n" + pretraining_table(
                [(p, g[p]["reports"]["three"], g[p]["reports"]["two"]) for p in (False, True)]))

    abl: dict[tuple, dict] = {}
    for r in trained:
        abl.setdefault(_variant_key(r, "augment", "dilate"), {})[(r["augment"], r["dilate"])] = r
    for key, g in abl.items():
        cols = [(label, g[k]) for label, k in (("Baseline", (False, False)), ("+ Augmentation", (True, False)),
                                               ("+ Dilation", (True, True))) if k in g]
        if len(cols) >= 2:
            sections.append(f"Augmentation / dilation ablation ({DISPLAY[key[0]]})\n" + ablation_table(
                [(label, r["reports"]["three"], r["reports"]["two"]) for label, r in cols]))
    return "\n\n".join(sections)


def cmd_synth(args) -> int:
    from .synthetic import generate_scene, write_project

    scene = generate_scene(size=args.size, seed=args.seed)
    path = write_project(scene, args.out, patch_size=args.patch_size, stride=args.stride)
    print(f"wrote {len(scene.footprints)} buildings, {len(scene.points)} points; config {path}")
    return 0


def cmd_report(args) -> int:
    cfg = C.load_config(args.config)
    text = build_tables(cfg.paths.output)
    if not text:
        raise MissingArtifact("no evaluated runs found; run `damagemap eval` first")
    (cfg.paths.output / "report.txt").write_text(text + "\n")
    print(text)
    return 0


# --------------------------------------------------------------------------- parser


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--encoder", choices=[k.value for k in EncoderKind], help="encoder family (default: config)")
    p.add_argument("--classes", type=int, choices=[2, 3, 4], help="model class count (default: config scheme)")
    p.add_argument("--no-augment", action="store_true", help="disable the augmentation pipeline")
    p.add_argument("--no-dilate", action="store_true", help="disable 3x3 dilation of training labels")
    p.add_argument("--init", help="'scratch' or a checkpoint path to start from (default: config)")
    p.add_argument("--seed", type=int, help="training seed (default: config)")
    p.add_argument("--force", action="store_true", help="ignore fingerprint mismatches")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="damagemap", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("label", help="transfer point labels to footprints and rasterize")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("tile", help="write the LOQO patch manifest")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("train", help="train one or all LOQO folds")
    p.add_argument("--config", required=True)
    p.add_argument("--fold", default="all", choices=["0", "1", "2", "3", "all"])
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
    _run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate fold checkpoints on their held-out quarters")
    p.add_argument("--config", required=True)
    p.add_argument("--fold", default="all", choices=["0", "1", "2", "3", "all"])
    p.add_argument("--report-classes", type=int, nargs="+", default=[3, 2])
    p.add_argument("--run", help="explicit run directory (default: derived from config + flags)")
    p.add_argument("--zero-shot", action="store_true", help="evaluate the --init checkpoint without training")
    p.add_argument("--maps", action="store_true", help="write colour-coded damage maps per quarter")
    _run_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="average predictions of several encoder runs")
    p.add_argument("--config", required=True)
    p.add_argument("--fold", default="all", choices=["0", "1", "2", "3", "all"])
    p.add_argument("--encoders", nargs="+", default=[k.value for k in EncoderKind])
    p.add_argument("--report-classes", type=int, nargs="+", default=[3, 2])
    p.add_argument("--name", default="Ensemble")
    p.add_argument("--maps", action="store_true")
    _run_flags(p)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("synth", help="write a synthetic demo scene and project config")
    p.add_argument("out", help="project directory to create")
    p.add_argument("--size", type=int, default=2048)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--stride", type=int, default=256)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="assemble comparison tables from evaluated runs")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MissingArtifact, FingerprintMismatch, FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
