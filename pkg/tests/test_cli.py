import csv
import json
import subprocess
import sys

import pytest

from roofkit.cli import RunConfig, resolve_config, run
from roofkit.dataset_builder import load_tiles
from roofkit.match_eval import Detection, write_detections

from conftest import synthetic_features


def write_self_predictions(gt_dir, path):
    dets = []
    for t in load_tiles(gt_dir):
        dets += [Detection(m, 1.0, r.height, r.angle, r.azimuth, t.tile_id, k) for k, (r, m) in enumerate(t.segments)]
    write_detections(dets, path)
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    feats = root / "features.geojson"
    feats.write_text(json.dumps(synthetic_features()))
    gt = root / "gt"
    assert run(["build-dataset", "--input", str(feats), "--extent", "40", "--px", "80", "--out", str(gt)]) == 0
    assert run(["split", "--gt", str(gt), "--seed", "3"]) == 0
    pred = write_self_predictions(gt, root / "pred.json")
    return root, gt, pred


def test_build_dataset_layout(dataset):
    _, gt, _ = dataset
    index = json.loads((gt / "index.json").read_text())
    assert sorted(index["tiles"]) == ["bA", "bB", "bC"]
    assert all(v["segments"] == 3 for v in index["tiles"].values())
    assert len(list((gt / "tiles").glob("*.json"))) == 3


def test_build_dataset_parallel_matches_serial(dataset, tmp_path):
    root, gt, _ = dataset
    out = tmp_path / "par"
    assert run(["build-dataset", "--input", str(root / "features.geojson"), "--extent", "40", "--px", "80",
                "--out", str(out), "--jobs", "2"]) == 0
    for f in (gt / "tiles").glob("*.json"):
        assert (out / "tiles" / f.name).read_bytes() == f.read_bytes()
    assert (out / "index.json").read_bytes() != b""


def test_split_one_tile_per_split(dataset):
    _, gt, _ = dataset
    splits = json.loads((gt / "splits.json").read_text())
    assert sorted(splits["splits"].values()) == ["test", "train", "val"]


def test_stats_outputs(dataset, tmp_path):
    _, gt, _ = dataset
    assert run(["stats", "--gt", str(gt), "--out", str(tmp_path)]) == 0
    stats = json.loads((tmp_path / "stats.json").read_text())
    assert stats["instance_count"] == 9 and stats["per_image_mean"] == 3.0
    for attr in ("height", "angle", "azimuth"):
        assert (tmp_path / f"hist_{attr}.svg").exists()
    assert run(["stats", "--gt", str(gt), "--splits", str(gt / "splits.json"), "--split", "val", "--out", str(tmp_path / "v")]) == 0
    assert json.loads((tmp_path / "v" / "stats.json").read_text())["image_count"] == 1


def test_eval_self_prediction_is_perfect(dataset, tmp_path, capsys):
    _, gt, pred = dataset
    assert run(["eval", "--gt", str(gt), "--pred", str(pred), "--out", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert m["ap"]["map"] == 1.0 and m["ap"]["ap50"] == 1.0 and m["ap"]["ap75"] == 1.0
    assert m["mae"] == {"height_m": 0.0, "angle_deg": 0.0, "azimuth_deg": 0.0}
    assert m["counts"]["gt"] == m["counts"]["matched"] == 9
    rows = list(csv.DictReader((tmp_path / "clusters.csv").open()))
    assert len(rows) == 8
    assert all(r["match_rate_pct"] in ("", "100.000000") for r in rows)
    assert "mAP=1.0000" in capsys.readouterr().out


def test_report_counts_match_hand_counts(dataset, tmp_path):
    _, gt, _ = dataset
    assert run(["report", "--gt", str(gt), "--out", str(tmp_path)]) == 0

    def occupied(attr):
        with (tmp_path / f"hist_{attr}.csv").open() as fh:
            return {float(r["bin_lo"]): int(r["gt"]) for r in csv.DictReader(fh) if int(r["gt"])}

    # heights 3.5 x2, 2.1, 8.0 x2, 4.8, 14.0 x2, 8.4
    assert occupied("height") == {2.0: 1, 3.0: 2, 4.0: 1, 8.0: 3, 14.0: 2}
    assert occupied("angle") == {2.0: 3, 35.0: 6}
    assert occupied("azimuth") == {0.0: 3, 120.0: 3, 180.0: 3}
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["histograms"]["height"]["counts"] == {"gt": 9}


def test_report_per_split_and_pred(dataset, tmp_path):
    _, gt, pred = dataset
    assert run(["report", "--gt", str(gt), "--splits", str(gt / "splits.json"), "--pred", str(pred), "--out", str(tmp_path)]) == 0
    header = (tmp_path / "hist_angle.csv").read_text().splitlines()[0]
    assert header == "bin_lo,bin_hi,train,val,test,pred"


def test_reconstruct_from_gt_and_pred(dataset, tmp_path):
    _, gt, pred = dataset
    assert run(["reconstruct", "--gt", str(gt), "--out", str(tmp_path / "gt.obj")]) == 0
    assert (tmp_path / "gt.obj").read_text().count("\no ") == 9
    assert run(["reconstruct", "--gt", str(gt), "--pred", str(pred), "--image-id", "bB", "--out", str(tmp_path / "b.obj")]) == 0
    assert (tmp_path / "b.obj").read_text().count("\no ") == 3


def test_loss_check(capsys):
    assert run(["loss-check", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "max relative gradient discrepancy" in out and "PASS" in out


def test_config_file_and_flag_precedence(tmp_path):
    cfg = RunConfig(command="eval", gt="g", pred="p", out="o", iou_thresh=0.6, height_thresholds=[3.0, 6.0, 10.0])
    path = tmp_path / "run.toml"
    path.write_text(cfg.to_toml())
    loaded = resolve_config(["eval", "--config", str(path)])
    assert loaded.iou_thresh == 0.6 and loaded.height_thresholds == [3.0, 6.0, 10.0]
    over = resolve_config(["eval", "--config", str(path), "--iou-thresh", "0.7"])
    assert over.iou_thresh == 0.7 and over.gt == "g"
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.config_hash() == RunConfig.from_dict({**cfg.to_dict(), "out": "elsewhere", "jobs": 4}).config_hash()
    assert cfg.config_hash() != over.config_hash()


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["eval", "--bogus"],
        ["eval", "--iou-thresh", "1.5", "--gt", "g", "--pred", "p", "--out", "o"],
        ["eval", "--height-thresholds", "7,4.5,12"],
        ["stats", "--split", "val", "--gt", "g", "--out", "o"],
        ["eval", "--gt", "g"],
        ["loss-check", "--height-scheme", "cubic"],
    ],
)
def test_usage_errors_exit_1(argv):
    assert run(argv) == 1


def test_bad_config_exits_1(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("iou_thresh = [unclosed")
    assert run(["eval", "--config", str(bad)]) == 1
    bad.write_text("no_such_setting = 3\n")
    assert run(["eval", "--config", str(bad)]) == 1


def test_missing_files_exit_2(tmp_path):
    assert run(["eval", "--gt", str(tmp_path / "none"), "--pred", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2
    assert run(["loss-check", "--config", str(tmp_path / "missing.toml")]) == 2


def test_version_and_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "roofkit", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "roofkit 0.1.0"


def test_inputs_are_not_modified(dataset, tmp_path):
    _, gt, pred = dataset
    before = {p: p.read_bytes() for p in gt.rglob("*.json")} | {pred: pred.read_bytes()}
    run(["eval", "--gt", str(gt), "--pred", str(pred), "--out", str(tmp_path / "e")])
    run(["report", "--gt", str(gt), "--pred", str(pred), "--out", str(tmp_path / "r")])
    assert before == {p: p.read_bytes() for p in before}
