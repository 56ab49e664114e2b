import csv
import json

import numpy as np
import pytest

from biplanar.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, run
from biplanar.model import ModelConfig
from biplanar.selfcheck import MINI_CONFIG
from biplanar.volume import load_image_raw

MINI = ModelConfig(**{**MINI_CONFIG, "h_out": 16, "w_out": 16, "decoder_channels": (8, 4, 4)})
FAST_TRAIN = {"epochs": 1, "batch": 8, "slice_stride": 4, "val_stride": 8}


@pytest.fixture(scope="module")
def cli_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    assert run(["dataset", "--out", str(ds), "--n-train", "2", "--n-val", "1", "--n-test", "1",
                "--dims", "16", "16", "16", "--res", "16", "16", "--seed", "3"]) == EXIT_OK
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"model": MINI.to_dict(), "train": FAST_TRAIN}))
    return root, ds, cfg


@pytest.fixture(scope="module")
def trained(cli_ds):
    root, ds, cfg = cli_ds
    out = root / "train"
    assert run(["train", "--config", str(cfg), "--manifest", str(ds / "manifest.json"), "--out", str(out),
                "--eval-stride", "4"]) == EXIT_OK
    return out


def test_usage_error_exit_code(capsys):
    assert run(["train", "--no-such-flag"]) == EXIT_USAGE
    assert run(["nonexistent"]) == EXIT_USAGE
    assert run(["train"]) == EXIT_USAGE  # missing --manifest
    assert "usage" in capsys.readouterr().err.lower()


def test_runtime_error_exit_code(tmp_path, capsys):
    code = run(["eval", "--checkpoint", str(tmp_path / "missing.pxct"),
                "--manifest", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")])
    assert code == EXIT_RUNTIME
    assert "error" in capsys.readouterr().err


def test_unknown_config_key_is_usage_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(["phantom", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_USAGE


def test_gradcheck_command(tmp_path, capsys):
    assert run(["gradcheck", "--seeds", "1", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS pipeline" in out


def test_phantom_and_drr(tmp_path):
    assert run(["phantom", "--n", "2", "--seed", "5", "--dims", "16", "16", "16",
                "--out", str(tmp_path / "ph")]) == EXIT_OK
    vols = sorted((tmp_path / "ph").glob("*.vol"))
    assert [v.name for v in vols] == ["phantom_0005.vol", "phantom_0006.vol"]
    assert run(["drr", "--volume", str(vols[0]), "--res", "16", "24", "--out", str(tmp_path / "drr")]) == EXIT_OK
    pa = load_image_raw(tmp_path / "drr" / "phantom_0005_pa.drr")
    assert pa.shape == (16, 24)
    resolved = json.loads((tmp_path / "drr" / "resolved_config.json").read_text())
    assert len(resolved["poses"]) == 2


def test_resolved_config_reproduces_run(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert run(["phantom", "--seed", "9", "--dims", "16", "16", "16", "--out", str(first)]) == EXIT_OK
    resolved = json.loads((first / "resolved_config.json").read_text())
    resolved["args"]["out"] = str(second)
    cfg = tmp_path / "rerun.json"
    cfg.write_text(json.dumps(resolved))
    assert run(["phantom", "--config", str(cfg)]) == EXIT_OK
    assert (first / "phantom_0009.vol").read_bytes() == (second / "phantom_0009.vol").read_bytes()


def test_train_outputs(trained):
    for name in ("model.pxct", "model.json", "loss_curve.csv", "train_config.json", "test_report.csv",
                 "resolved_config.json"):
        assert (trained / name).exists(), name
    resolved = json.loads((trained / "resolved_config.json").read_text())
    assert resolved["model"]["h_out"] == 16 and resolved["train"]["epochs"] == 1


def test_eval_command(cli_ds, trained, tmp_path):
    _, ds, _ = cli_ds
    assert run(["eval", "--checkpoint", str(trained / "model.pxct"), "--manifest", str(ds / "manifest.json"),
                "--crop-suite", "--stride", "4", "--out", str(tmp_path)]) == EXIT_OK
    with open(tmp_path / "eval_test.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["crop"] for r in rows} >= {"none", "4:4:8:8", "6:6:4:4"}


def test_reconstruct_full_frame_crop_matches_uncropped(cli_ds, trained, tmp_path):
    _, ds, _ = cli_ds
    m = json.loads((ds / "manifest.json").read_text())
    item = m["splits"]["test"][0]
    common = ["reconstruct", "--checkpoint", str(trained / "model.pxct"), "--pa", str(ds / item["drr_pa"]),
              "--lat", str(ds / item["drr_lat"]), "--volume", str(ds / item["volume"]),
              "--plane", "coronal", "--index", "7"]
    assert run(common + ["--out", str(tmp_path / "plain")]) == EXIT_OK
    assert run(common + ["--crop", "0", "0", "16", "16", "--out", str(tmp_path / "full")]) == EXIT_OK
    a = load_image_raw(tmp_path / "plain" / "prediction.raw")
    b = load_image_raw(tmp_path / "full" / "prediction.raw")
    assert a.shape == (16, 16)
    np.testing.assert_array_equal(a, b)
    for name in ("prediction.png", "panel.png"):
        assert (tmp_path / "plain" / name).exists()


def test_reconstruct_crop_out_of_bounds(cli_ds, trained, tmp_path):
    _, ds, _ = cli_ds
    item = json.loads((ds / "manifest.json").read_text())["splits"]["test"][0]
    code = run(["reconstruct", "--checkpoint", str(trained / "model.pxct"), "--pa", str(ds / item["drr_pa"]),
                "--lat", str(ds / item["drr_lat"]), "--volume", str(ds / item["volume"]),
                "--crop", "10", "10", "16", "16", "--out", str(tmp_path)])
    assert code == EXIT_RUNTIME


def test_ablate_grid(cli_ds, tmp_path):
    _, ds, cfg = cli_ds
    assert run(["ablate", "--config", str(cfg), "--manifest", str(ds / "manifest.json"), "--epochs", "1",
                "--eval-stride", "8", "--out", str(tmp_path)]) == EXIT_OK
    with open(tmp_path / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8
    combos = {(r["projection"], r["use_pe"], r["use_global"]) for r in rows}
    assert len(combos) == 8
