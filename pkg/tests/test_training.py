import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biplanar.autodiff import Tensor, default_dtype, grad_check
from biplanar.autodiff import functional as F
from biplanar.errors import ParameterError, TrainingError, VersionError
from biplanar.model import ModelConfig, SliceReconstructor
from biplanar.selfcheck import MINI_CONFIG
from biplanar.training import (
    PerceptualFeatures, QueryCache, SliceDataset, TrainConfig, build_dataset, evaluate, loss_total,
    make_batch, mean_loss, run_ablation, sample_crop, train,
)
from biplanar.volume import SliceSpec, extract_slice

# 16x16 outputs so SSIM's 11x11 window fits
MINI = ModelConfig(**{**MINI_CONFIG, "h_out": 16, "w_out": 16, "decoder_channels": (8, 4, 4)})


@pytest.fixture(scope="module")
def mini_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini_ds")
    build_dataset(root, 2, 1, 1, vol_dims=(16, 16, 16), seed=11, drr_res=(16, 16))
    return root


# -- dataset ----------------------------------------------------------------------

def test_slice_record_count(tmp_path):
    m = build_dataset(tmp_path, 1, 1, 1, vol_dims=(64, 64, 64), drr_res=(16, 16))
    for split in ("train", "val", "test"):
        assert len(m["slices"][split]) == 3 * 64
    recs = m["slices"]["train"]
    assert {(r["plane"], r["index"]) for r in recs} == {(p, i) for p in ("axial", "coronal", "sagittal")
                                                       for i in range(64)}


def test_splits_disjoint_and_files_exist(mini_ds):
    m = json.loads((mini_ds / "manifest.json").read_text())
    paths = [it[k] for items in m["splits"].values() for it in items for k in ("volume", "drr_pa", "drr_lat")]
    assert len(paths) == len(set(paths))
    seeds = [it["seed"] for items in m["splits"].values() for it in items]
    assert len(seeds) == len(set(seeds))
    assert all((mini_ds / p).exists() for p in paths)


def test_dataset_deterministic(tmp_path, mini_ds):
    build_dataset(tmp_path, 2, 1, 1, vol_dims=(16, 16, 16), seed=11, drr_res=(16, 16))
    assert (tmp_path / "manifest.json").read_text() == (mini_ds / "manifest.json").read_text()
    for f in mini_ds.iterdir():
        assert (tmp_path / f.name).read_bytes() == f.read_bytes()


def test_dataset_rejects_empty_split(tmp_path):
    with pytest.raises(ParameterError):
        build_dataset(tmp_path, 1, 0, 1, vol_dims=(16, 16, 16))


# -- crops --------------------------------------------------------------------

def test_no_crop_when_p_zero():
    rng = np.random.default_rng(0)
    assert all(sample_crop((64, 64), 0.0, (16, 16), rng) is None for _ in range(10_000))


def test_degenerate_crop_range_is_full_frame(phantom32):
    rng = np.random.default_rng(0)
    for _ in range(100):
        crop = sample_crop((32, 32), 1.0, (32, 32), rng)
        assert crop == (0, 0, 32, 32)
    a = extract_slice(phantom32, SliceSpec("axial", 4, crop, (16, 16)))
    b = extract_slice(phantom32, SliceSpec("axial", 4, None, (16, 16)))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_crop_frequency():
    rng = np.random.default_rng(42)
    hits = sum(sample_crop((64, 64), 0.5, (16, 16), rng) is not None for _ in range(10_000))
    assert abs(hits / 10_000 - 0.5) <= 0.02


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31), h=st.integers(4, 64), w=st.integers(4, 64), data=st.data())
def test_crop_bounds(seed, h, w, data):
    hmin = data.draw(st.integers(1, h))
    wmin = data.draw(st.integers(1, w))
    r0, c0, rows, cols = sample_crop((h, w), 1.0, (hmin, wmin), np.random.default_rng(seed))
    assert hmin <= rows <= h and wmin <= cols <= w
    assert 0 <= r0 and r0 + rows <= h and 0 <= c0 and c0 + cols <= w


def test_crop_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ParameterError):
        sample_crop((16, 16), 1.5, (4, 4), rng)
    with pytest.raises(ParameterError):
        sample_crop((16, 16), 0.5, (32, 4), rng)


# -- loss ---------------------------------------------------------------------

def test_loss_zero_for_identical(rng):
    img = rng.random((2, 1, 16, 16))
    pred = Tensor(img, requires_grad=True, dtype=np.float64)
    assert loss_total(pred, img, 1.0, 1.0).item() == 0.0


def test_loss_mse_only():
    pred = Tensor([[[[0.0, 1.0]]]], requires_grad=True, dtype=np.float64)
    assert loss_total(pred, np.zeros((1, 1, 1, 2)), 1.0, 0.0).item() == 0.5


def test_loss_decomposition(rng):
    a, b = rng.random((2, 3, 1, 16, 16))
    pred = Tensor(a, dtype=np.float64)
    assert abs(loss_total(pred, b, 1.0, 0.0).item() - F.mse(pred, b).item()) <= 1e-12
    total = loss_total(pred, b, 2.0, 0.5).item()
    feats = PerceptualFeatures()
    from biplanar.training import perceptual_loss

    expect = 2.0 * F.mse(pred, b).item() + 0.5 * perceptual_loss(pred, b, feats).item()
    assert abs(total - expect) <= 1e-12


def test_loss_gradient(rng):
    target = rng.random((1, 1, 16, 16))
    pred = Tensor(rng.random((1, 1, 16, 16)), requires_grad=True, dtype=np.float64)
    with default_dtype(np.float64):
        feats = PerceptualFeatures()
    rep = grad_check(lambda p: loss_total(p, target, 1.0, 1.0, feats), [pred], max_elements=40, rng=rng)
    assert rep.passed, str(rep)


def test_perceptual_features_frozen():
    feats = PerceptualFeatures()
    assert all(not c.weight.requires_grad for c in feats.convs)
    a = PerceptualFeatures()
    assert all(np.array_equal(x.weight.data, y.weight.data) for x, y in zip(feats.convs, a.convs))


def test_loss_errors(rng):
    pred = Tensor(rng.random((1, 1, 4, 4)), dtype=np.float64)
    with pytest.raises(ParameterError):
        loss_total(pred, np.zeros((1, 1, 4, 5)), 1.0, 0.0)
    with pytest.raises(ParameterError):
        loss_total(pred, np.zeros((1, 1, 4, 4)), -1.0, 0.0)


def test_train_config_validation():
    for bad in (dict(lambda_p=-1), dict(p_part=2.0), dict(batch=0), dict(slice_stride=0)):
        with pytest.raises(ParameterError):
            TrainConfig(**bad)
    with pytest.raises(ParameterError):
        TrainConfig.from_dict({"momentum": 0.9})
    cfg = TrainConfig(crop_min=[8, 8])
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


# -- training loop -------------------------------------------------------------------

FAST = dict(epochs=2, batch=8, slice_stride=3, val_stride=4, lr=1e-3)


def test_training_is_reproducible(mini_ds, tmp_path):
    a = train(mini_ds, MINI, TrainConfig(**FAST), tmp_path / "a")
    b = train(mini_ds, MINI, TrainConfig(**FAST), tmp_path / "b")
    assert a.curve == b.curve
    assert (tmp_path / "a" / "model.pxct").read_bytes() == (tmp_path / "b" / "model.pxct").read_bytes()
    with open(tmp_path / "a" / "loss_curve.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "train_loss", "val_loss", "val_psnr"]
    assert len(rows) == 2
    c = train(mini_ds, MINI, TrainConfig(**{**FAST, "seed": 1}))
    assert c.curve != a.curve


def test_zero_learning_rate_keeps_parameters(mini_ds):
    with default_dtype(np.float32):
        model = SliceReconstructor(MINI)
    before = model.state_dict()
    train(mini_ds, MINI, TrainConfig(**{**FAST, "epochs": 1, "lr": 0.0}), model=model)
    after = model.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_training_reduces_loss(mini_ds):
    res = train(mini_ds, MINI, TrainConfig(epochs=6, batch=8, slice_stride=2, lr=2e-3, lambda_p=0.0,
                                          keep_best=False))
    losses = [r["train_loss"] for r in res.curve]
    assert losses[-1] < losses[0]


def test_crop_training_runs(mini_ds):
    res = train(mini_ds, MINI, TrainConfig(**{**FAST, "p_part": 0.5, "crop_min": (8, 8)}))
    assert np.isfinite(res.curve[-1]["val_psnr"])


def test_non_finite_loss_aborts(mini_ds):
    with default_dtype(np.float32):
        model = SliceReconstructor(MINI)
    model.decoder.head.weight.data[:] = np.nan
    with pytest.raises(TrainingError, match=r"epoch 1, batch 0: .*'conv2d'"):
        train(mini_ds, MINI, TrainConfig(**FAST), model=model)


def test_rig_mismatch_rejected(mini_ds):
    from dataclasses import replace

    with pytest.raises(VersionError):
        train(mini_ds, replace(MINI, focal=2.5), TrainConfig(**FAST))
    with pytest.raises(VersionError):
        train(mini_ds, replace(MINI, image_size=32, h_local=8, w_local=8), TrainConfig(**FAST))


# -- evaluation ----------------------------------------------------------------

def test_ground_truth_scores_perfectly(mini_ds):
    with default_dtype(np.float32):
        model = SliceReconstructor(MINI)
    ds = SliceDataset(mini_ds, "test")
    report = evaluate(model, ds, stride=5, crop_suite=True, predict=lambda pa, lat, q, t: t)
    assert all(r["psnr_db"] == np.inf and abs(r["ssim"] - 1) <= 1e-9 for r in report.rows)


def test_report_rows_and_csv(mini_ds, tmp_path):
    with default_dtype(np.float32):
        model = SliceReconstructor(MINI)
    ds = SliceDataset(mini_ds, "test")
    report = evaluate(model, ds, stride=4)
    assert len(report.rows) == len(ds.records[::4]) == 12
    assert {r["plane"] for r in report.rows} == {"axial", "coronal", "sagittal"}
    assert report.digest == MINI.digest()
    suite = evaluate(model, ds, stride=4, crop_suite=True)
    assert len(suite.rows) == 3 * 12
    assert {r["crop"] for r in suite.rows} == {"none", "4:4:8:8", "6:6:4:4"}
    kinds = {a["crop"] for a in suite.aggregates}
    assert kinds == {"full", "8x8", "4x4"}
    for a in suite.aggregates:
        assert a["slice_index"] == -1 and np.isfinite(a["psnr_db"]) and -1 <= a["ssim"] <= 1
    suite.to_csv(tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["split", "plane", "slice_index", "crop", "psnr_db", "ssim"]
    assert len(rows) == len(suite.rows) + len(suite.aggregates)


def test_mean_loss_matches_manual(mini_ds):
    with default_dtype(np.float32):
        model = SliceReconstructor(MINI)
    ds = SliceDataset(mini_ds, "val")
    recs = ds.records[:5]
    cache = QueryCache(model)
    _, mse = mean_loss(model, ds, recs, cache, TrainConfig(lambda_p=0.0))
    pa, lat, target, qs = make_batch(ds, cache, recs, [None] * 5)
    manual = float(np.mean((model(pa, lat, qs).data - target) ** 2))
    assert abs(mse - manual) <= 1e-6


def test_ablation_grid(mini_ds, tmp_path):
    rows = run_ablation(mini_ds, MINI, TrainConfig(epochs=1, batch=16, slice_stride=6, val_stride=8),
                        tmp_path, eval_stride=6)
    assert len(rows) == 8
    combos = {(r["projection"], r["use_pe"], r["use_global"]) for r in rows}
    assert len(combos) == 8
    with open(tmp_path / "ablation.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 8
