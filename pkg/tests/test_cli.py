import json
import logging

import pytest
import yaml

from damagemap import cli
from damagemap import config as C
from damagemap.geodata import load_mask
from damagemap.synthetic import generate_scene, write_project


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def project(tmp_path_factory):
    root = tmp_path_factory.mktemp("proj")
    scene = generate_scene(size=256, seed=2)
    cfg = write_project(scene, root, patch_size=64, stride=64,
                        model={"encoder": "resnet", "stage_channels": [4, 8, 8, 8, 8]},
                        training={"epochs": 1, "batch_size": 4, "learning_rate": 1e-3})
    assert run("label", "--config", cfg) == 0
    return cfg


def three_building_project(tmp_path, points_csv):
    scene = generate_scene(size=128, seed=0, n_buildings=3, min_side=16, max_side=20)
    cfg = write_project(scene, tmp_path)
    xs = [fp.barycentre for fp in scene.footprints]
    (tmp_path / "data" / "points.csv").write_text(points_csv(xs))
    return cfg, scene


def test_label_counts_file(tmp_path, capsys):
    cfg, scene = three_building_project(
        tmp_path, lambda c: "x,y,label,source\n" + "".join(f"{x},{y},{i},expert\n" for i, (x, y) in enumerate(c)))
    assert run("label", "--config", cfg) == 0
    counts = json.loads((tmp_path / "out" / "labels" / "counts.json").read_text())
    assert counts["buildings"] == {"0": 0, "1": 1, "2": 2}
    assert counts["counts"]["UNLABELED"] == 0
    assert "NO_DAMAGE: 1" in capsys.readouterr().out


def test_label_out_of_buffer_warns(tmp_path, caplog):
    cfg, scene = three_building_project(
        tmp_path, lambda c: "x,y,label,source\n" + f"{c[0][0]},{c[0][1]},1,expert\n{c[1][0]},{c[1][1]},2,expert\n"
        f"{c[2][0] + 500},{c[2][1]},3,expert\n")
    with caplog.at_level(logging.WARNING, logger="damagemap"):
        assert run("label", "--config", cfg) == 0
    counts = json.loads((tmp_path / "out" / "labels" / "counts.json").read_text())
    assert counts["counts"]["UNLABELED"] == 1 and counts["unassigned_points"] == 1
    assert "no damage label" in caplog.text


def test_label_rerun_byte_identical(project):
    out = project.parent / "out" / "labels"
    before = {p.name: p.read_bytes() for p in out.iterdir()}
    assert run("label", "--config", project) == 0
    assert {p.name: p.read_bytes() for p in out.iterdir()} == before


def test_label_mask_carries_fingerprint(project):
    _, _, _, tags = load_mask(project.parent / "out" / "labels" / "label_mask.tif")
    assert tags["data_fingerprint"] == C.data_fingerprint(C.load_config(project))


def test_tile_manifest(project):
    assert run("tile", "--config", project) == 0
    lines = (project.parent / "out" / "tiles" / "manifest.jsonl").read_text().splitlines()
    assert "data_fingerprint" in json.loads(lines[0])["header"]
    recs = [json.loads(l) for l in lines[1:]]
    assert {r["fold"] for r in recs} == {0, 1, 2, 3}
    assert sum(r["split"] == "test" for r in recs) == 16


def test_train_eval_ensemble_report(project, capsys):
    out = project.parent / "out"
    assert run("train", "--config", project, "--fold", "all") == 0
    assert run("eval", "--config", project, "--report-classes", "3", "2", "--maps") == 0
    runs = list((out / "runs").iterdir())
    assert len(runs) == 1
    rd = runs[0]
    assert all((rd / f"fold{k}" / "checkpoint.pt").exists() for k in range(4))
    assert len(list((rd / "maps").glob("*.tif"))) == 4
    meta = json.loads((rd / "run.json").read_text())
    records = [json.loads(l) for l in (rd / "reports.jsonl").read_text().splitlines()]
    assert {r["scheme"] for r in records} == {"three", "two"} and len(records) == 10
    assert all(r["fingerprint"] == meta["fingerprint"] for r in records)
    table = (rd / "table.txt").read_text()
    assert "BAS_3" in table and "BAS_2" in table

    assert run("ensemble", "--config", project, "--encoders", "resnet") == 0
    ens = next((out / "ensembles").iterdir())
    single = [json.loads(l) for l in (rd / "reports.jsonl").read_text().splitlines()]
    combined = [json.loads(l) for l in (ens / "reports.jsonl").read_text().splitlines()]
    strip = lambda rs: [{k: v for k, v in r.items() if k not in ("name", "fingerprint")} for r in rs]
    assert strip(single) == strip(combined)
    assert "Ensemble" in (ens / "table.txt").read_text()

    assert run("train", "--config", project, "--no-augment", "--no-dilate") == 0
    assert run("eval", "--config", project, "--no-augment", "--no-dilate") == 0
    assert run("report", "--config", project) == 0
    text = capsys.readouterr().out
    assert "Augmentation / dilation ablation" in text and "Ensemble" in text


def test_pretrained_axis(project, capsys):
    out = project.parent / "out"
    ck = next((out / "runs").glob("resnet-c3-aug-dil-scratch-*")) / "fold0" / "checkpoint.pt"
    if not ck.exists():
        assert run("train", "--config", project) == 0
        ck = next((out / "runs").glob("resnet-c3-aug-dil-scratch-*")) / "fold0" / "checkpoint.pt"
        assert run("eval", "--config", project) == 0
    assert run("train", "--config", project, "--init", ck) == 0
    assert run("eval", "--config", project, "--init", ck) == 0
    assert run("eval", "--config", project, "--init", ck, "--zero-shot") == 0
    assert run("report", "--config", project) == 0
    text = capsys.readouterr().out
    assert "Pretraining comparison" in text and "ResNet-ZS" in text


def test_missing_upstream_artifact(tmp_path, capsys):
    cfg = write_project(generate_scene(size=128, seed=0, n_buildings=4), tmp_path, patch_size=32, stride=32)
    assert run("tile", "--config", cfg) == 2
    assert "damagemap label" in capsys.readouterr().err
    assert run("label", "--config", cfg) == 0
    assert run("eval", "--config", cfg) == 2
    assert "damagemap train" in capsys.readouterr().err
    assert run("report", "--config", cfg) == 2


def test_fingerprint_mismatch_refused(tmp_path, capsys):
    cfg = write_project(generate_scene(size=128, seed=0, n_buildings=4), tmp_path, patch_size=32, stride=32,
                        training={"epochs": 1, "batch_size": 4})
    assert run("label", "--config", cfg) == 0
    assert run("train", "--config", cfg, "--fold", "0") == 0
    run_dir = next((tmp_path / "out" / "runs").iterdir())
    # retarget the same run directory under an edited config
    doc = yaml.safe_load(cfg.read_text())
    doc["training"]["weight_decay"] = 1e-3
    cfg.write_text(yaml.safe_dump(doc))
    assert run("eval", "--config", cfg, "--fold", "0", "--run", run_dir) == 2
    assert "fingerprint" in capsys.readouterr().err
    assert run("eval", "--config", cfg, "--fold", "0", "--run", run_dir, "--force") == 0


def test_config_rejects_unknown_keys(tmp_path):
    cfg = write_project(generate_scene(size=128, seed=0, n_buildings=2), tmp_path)
    doc = yaml.safe_load(cfg.read_text())
    doc["training"]["lr"] = 1
    cfg.write_text(yaml.safe_dump(doc))
    with pytest.raises(ValueError, match="unknown TrainConfig"):
        C.load_config(cfg)


def test_config_missing_path(tmp_path):
    cfg = write_project(generate_scene(size=128, seed=0, n_buildings=2), tmp_path)
    (tmp_path / "data" / "post.tif").unlink()
    with pytest.raises(FileNotFoundError):
        C.load_config(cfg).check_paths()


def test_overrides_change_fingerprint(tmp_path):
    cfg = C.load_config(write_project(generate_scene(size=128, seed=0, n_buildings=2), tmp_path))
    base = C.run_fingerprint(cfg, "d")
    assert C.run_fingerprint(C.with_overrides(cfg, augment=False), "d") != base
    assert C.run_fingerprint(C.with_overrides(cfg, classes=2), "d") != base
    assert C.run_fingerprint(C.with_overrides(cfg), "d") == base
    two = C.with_overrides(cfg, classes=2)
    assert two.model.num_classes == 2 and two.scheme.value == "two"
