"""Synthetic dataset, composite loss, training loop, evaluation and ablations."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .autodiff import Adam, Tensor, check_finite, default_dtype, leaky_relu, no_grad
from .autodiff import functional as F
from .autodiff.nn import Conv2d
from .drr import DEFAULT_STEP, render_pair
from .errors import ParameterError, TrainingError, VersionError
from .geometry import make_biplanar_rig
from .metrics import psnr, psnr_from_mse, ssim
from .model import ModelConfig, SliceReconstructor, config_digest, load_model
from .volume import (
    PLANES, PhantomSpec, SliceSpec, extract_slice, generate_phantom, load_image_raw,
    load_volume, save_image_raw, save_volume,
)

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# dataset
# ----------------------------------------------------------------------------

def _phantom_spec(seed: int) -> PhantomSpec:
    rng = np.random.default_rng(seed)
    axes = (rng.uniform(0.36, 0.46), rng.uniform(0.24, 0.34), rng.uniform(0.40, 0.48))
    return PhantomSpec(seed=seed, n_organs=int(rng.integers(3, 7)), body_axes=axes)


def build_dataset(out_dir, n_train: int = 40, n_val: int = 5, n_test: int = 5,
                  vol_dims=(64, 64, 64), source_dist: float = 3.0, focal: float = 2.0,
                  seed: int = 0, drr_res=(64, 64), step: float = DEFAULT_STEP) -> dict:
    """Generate phantoms and DRR pairs, write them plus ``manifest.json`` to ``out_dir``."""
    counts = {"train": n_train, "val": n_val, "test": n_test}
    if min(counts.values()) < 1:
        raise ParameterError("every split needs at least one volume")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rig = make_biplanar_rig(source_dist, focal)
    seeds = np.random.SeedSequence(seed).generate_state(sum(counts.values()), dtype=np.uint64)
    if len(set(seeds.tolist())) != len(seeds):
        raise ParameterError("phantom seed collision; choose another dataset seed")

    manifest = {
        "seed": seed,
        "dims": list(vol_dims),
        "drr_res": list(drr_res),
        "step": step,
        "rig": {"source_dist": source_dist, "focal": focal,
                "poses": [p.to_dict() for p in rig]},
        "splits": {},
        "slices": {},
    }
    k = 0
    for split, n in counts.items():
        items, records = [], []
        for i in range(n):
            s = int(seeds[k])
            k += 1
            stem = f"{split}_{i:03d}"
            vol = generate_phantom(_phantom_spec(s), vol_dims)
            save_volume(vol, out_dir / f"{stem}.vol")
            pa, lat = render_pair(vol, rig, drr_res, step)
            save_image_raw(out_dir / f"{stem}_pa.drr", pa.pixels)
            save_image_raw(out_dir / f"{stem}_lat.drr", lat.pixels)
            items.append({"volume": f"{stem}.vol", "drr_pa": f"{stem}_pa.drr",
                          "drr_lat": f"{stem}_lat.drr", "seed": s})
            for plane in PLANES:
                for idx in range(vol.plane_extent(plane)):
                    records.append({"item": i, "plane": plane, "index": idx})
        manifest["splits"][split] = items
        manifest["slices"][split] = records
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return json.loads(path.read_text()), path.parent


class SliceDataset:
    """In-memory view of one manifest split."""

    def __init__(self, manifest_path, split: str):
        self.manifest, self.root = load_manifest(manifest_path)
        if split not in self.manifest["splits"]:
            raise ParameterError(f"manifest has no split {split!r}")
        self.split = split
        self.records = self.manifest["slices"][split]
        items = self.manifest["splits"][split]
        self.volumes = [load_volume(self.root / it["volume"]) for it in items]
        self.drrs = [(load_image_raw(self.root / it["drr_pa"]), load_image_raw(self.root / it["drr_lat"]))
                     for it in items]

    def __len__(self):
        return len(self.records)

    def check_compatible(self, cfg: ModelConfig) -> None:
        rig = self.manifest["rig"]
        h, w = self.manifest["drr_res"]
        if (rig["source_dist"], rig["focal"]) != (cfg.source_dist, cfg.focal):
            raise VersionError(
                f"model rig ({cfg.source_dist}, {cfg.focal}) differs from dataset rig "
                f"({rig['source_dist']}, {rig['focal']})")
        if (h, w) != (cfg.image_size, cfg.image_size):
            raise VersionError(f"model expects {cfg.image_size}^2 X-rays, dataset has {h}x{w}")


class QueryCache:
    """Memoizes slice grids, targets and resampling operators per slice spec."""

    def __init__(self, model: SliceReconstructor):
        self.model = model
        self._cache = {}

    def get(self, vol, spec: SliceSpec, item: int):
        cfg = self.model.cfg
        key = (item, spec.plane, spec.index, spec.crop)
        hit = self._cache.get(key)
        if hit is None:
            target, grid = extract_slice(vol, replace(spec, out_res=cfg.out_res), cfg.feat_res)
            hit = (target, self.model.query(grid))
            if spec.crop is None:
                self._cache[key] = hit
        return hit


def make_batch(dataset: SliceDataset, cache: QueryCache, records, crops, dtype=np.float32):
    pa, lat, targets, queries = [], [], [], []
    for rec, crop in zip(records, crops):
        item = rec["item"]
        spec = SliceSpec(rec["plane"], rec["index"], crop)
        target, q = cache.get(dataset.volumes[item], spec, item)
        pa.append(dataset.drrs[item][0])
        lat.append(dataset.drrs[item][1])
        targets.append(target)
        queries.append(q)
    stack = lambda xs: np.stack(xs)[:, None].astype(dtype)
    return stack(pa), stack(lat), stack(targets), queries


# ----------------------------------------------------------------------------
# crops and loss
# ----------------------------------------------------------------------------

def sample_crop(native, p_part: float, crop_min, rng):
    """Random crop window ``(row0, col0, rows, cols)`` with probability ``p_part``, else ``None``."""
    h, w = native
    hmin, wmin = crop_min
    if not 0.0 <= p_part <= 1.0:
        raise ParameterError("p_part must lie in [0, 1]")
    if not (1 <= hmin <= h and 1 <= wmin <= w):
        raise ParameterError(f"crop_min {crop_min} must lie within the native size {native}")
    if rng.random() >= p_part:
        return None
    rows = int(rng.integers(hmin, h + 1))
    cols = int(rng.integers(wmin, w + 1))
    return int(rng.integers(0, h - rows + 1)), int(rng.integers(0, w - cols + 1)), rows, cols


class PerceptualFeatures:
    """Frozen, randomly initialised conv stack used as a feature-space distance.

    Stands in for a learned perceptual metric; it has no trainable state.
    """

    def __init__(self, channels=(8, 16, 32), seed: int = 1234):
        rng = np.random.default_rng(seed)
        self.convs = []
        c_in = 1
        for c in channels:
            conv = Conv2d(c_in, c, 3, 2, rng=rng)
            conv.weight.requires_grad = False
            conv.bias.requires_grad = False
            self.convs.append(conv)
            c_in = c

    def __call__(self, x):
        feats = []
        for conv in self.convs:
            w = conv.weight
            if w.dtype != x.dtype:
                w = Tensor(w.data, dtype=x.dtype)
            x = leaky_relu(F.conv2d(x, w, None, conv.stride, conv.pad), 0.2)
            feats.append(x)
        return feats


def perceptual_loss(pred: Tensor, target, features: PerceptualFeatures) -> Tensor:
    with no_grad():
        ref = features(Tensor(np.asarray(target), dtype=pred.dtype))
    total = None
    for fp, fr in zip(features(pred), ref):
        term = F.mse(fp, fr.data)
        total = term if total is None else total + term
    return total


def loss_total(pred: Tensor, target, lambda_rec: float = 1.0, lambda_p: float = 1.0,
               features: PerceptualFeatures | None = None) -> Tensor:
    """``lambda_rec * MSE + lambda_p * perceptual``; the perceptual term is skipped at ``lambda_p == 0``."""
    if lambda_rec < 0 or lambda_p < 0:
        raise ParameterError("loss weights must be non-negative")
    rec = F.mse(pred, target)
    total = rec * lambda_rec if lambda_rec != 1.0 else rec
    if lambda_p > 0:
        features = features or PerceptualFeatures()
        total = total + perceptual_loss(pred, target, features) * lambda_p
    return total


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lambda_rec: float = 1.0
    lambda_p: float = 1.0
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    epochs: int = 50
    batch: int = 16
    p_part: float = 0.0
    crop_min: tuple = (16, 16)
    seed: int = 0
    slice_stride: int = 1   # train on every k-th slice record
    val_stride: int = 8     # validate on every k-th val record
    keep_best: bool = True  # restore the best-validation weights at the end

    def __post_init__(self):
        self.crop_min = tuple(int(c) for c in self.crop_min)
        if self.lambda_rec < 0 or self.lambda_p < 0:
            raise ParameterError("loss weights must be non-negative")
        if not 0.0 <= self.p_part <= 1.0:
            raise ParameterError("p_part must lie in [0, 1]")
        if self.epochs < 0 or self.batch < 1 or self.slice_stride < 1 or self.val_stride < 1:
            raise ParameterError("epochs >= 0, batch >= 1 and strides >= 1 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_min"] = list(self.crop_min)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ParameterError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    model: SliceReconstructor
    curve: list = field(default_factory=list)   # dicts: epoch, train_loss, val_loss, val_psnr
    checkpoint: Path | None = None
    seconds: float = 0.0


def mean_loss(model, dataset, records, cache, tcfg: TrainConfig, features=None, batch=32):
    """Mean total loss and mean MSE over ``records`` (full-frame, no gradients)."""
    tot = mse_sum = 0.0
    with no_grad():
        for s in range(0, len(records), batch):
            recs = records[s:s + batch]
            pa, lat, target, qs = make_batch(dataset, cache, recs, [None] * len(recs), model_dtype(model))
            pred = model(pa, lat, qs)
            tot += loss_total(pred, target, tcfg.lambda_rec, tcfg.lambda_p, features).item() * len(recs)
            mse_sum += float(np.mean((pred.data - target) ** 2, axis=(1, 2, 3)).sum())
    n = max(len(records), 1)
    return tot / n, mse_sum / n


def model_dtype(model) -> np.dtype:
    return model.parameters()[0].dtype


def _write_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "val_psnr"])
        writer.writeheader()
        writer.writerows(curve)


def train(manifest_path, model_cfg: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
          out_dir=None, model: SliceReconstructor | None = None) -> TrainResult:
    """Adam training on the train split; keeps the weights with the best validation loss."""
    tcfg = train_cfg or TrainConfig()
    start = time.perf_counter()
    with default_dtype(np.float32):
        model = model or SliceReconstructor(model_cfg or ModelConfig())
    cfg = model.cfg
    train_set = SliceDataset(manifest_path, "train")
    train_set.check_compatible(cfg)
    val_set = SliceDataset(manifest_path, "val") if train_set.manifest["splits"].get("val") else None
    features = PerceptualFeatures() if tcfg.lambda_p > 0 else None
    train_cache = QueryCache(model)
    val_cache = QueryCache(model)

    records = train_set.records[:: tcfg.slice_stride]
    val_records = val_set.records[:: tcfg.val_stride] if val_set else []
    rng = np.random.default_rng(tcfg.seed)
    params = model.parameters()
    opt = Adam(params, lr=tcfg.lr, betas=(tcfg.beta1, tcfg.beta2))
    native = train_set.volumes[0].slice_shape("axial")
    dtype = model_dtype(model)

    curve = []
    best = (math.inf, None)
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(records))
        running = 0.0
        for b, s in enumerate(range(0, len(order), tcfg.batch)):
            recs = [records[i] for i in order[s:s + tcfg.batch]]
            crops = []
            for rec in recs:
                shape = train_set.volumes[rec["item"]].slice_shape(rec["plane"])
                crops.append(sample_crop(shape, tcfg.p_part, tcfg.crop_min, rng) if tcfg.p_part > 0 else None)
            pa, lat, target, qs = make_batch(train_set, train_cache, recs, crops, dtype)
            pred = model(pa, lat, qs)
            loss = loss_total(pred, target, tcfg.lambda_rec, tcfg.lambda_p, features)
            if not np.isfinite(loss.item()):
                raise TrainingError(_diagnose(model, pa, lat, qs, target, tcfg, features, epoch, b))
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += loss.item() * len(recs)
        train_loss = running / max(len(records), 1)
        if val_records:
            val_loss, val_mse = mean_loss(model, val_set, val_records, val_cache, tcfg, features)
        else:
            val_loss, val_mse = train_loss, math.nan
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
               "val_psnr": psnr_from_mse(val_mse) if np.isfinite(val_mse) else math.nan}
        curve.append(row)
        log.info("epoch %d train %.5f val %.5f psnr %.2f", epoch, train_loss, val_loss, row["val_psnr"])
        if val_loss < best[0]:
            best = (val_loss, model.state_dict())
    if tcfg.keep_best and best[1] is not None:
        model.load_state_dict(best[1])

    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / "model.pxct"
        model.save(ckpt)
        _write_curve(out_dir / "loss_curve.csv", curve)
        (out_dir / "train_config.json").write_text(json.dumps(tcfg.to_dict(), indent=2))
    return TrainResult(model, curve, ckpt, time.perf_counter() - start)


def _diagnose(model, pa, lat, qs, target, tcfg, features, epoch, batch) -> str:
    where = "loss"
    try:
        with check_finite(), no_grad():
            pred = model(pa, lat, qs)
            loss_total(pred, target, tcfg.lambda_rec, tcfg.lambda_p, features)
    except FloatingPointError as exc:
        where = str(exc)
    return f"non-finite loss at epoch {epoch}, batch {batch}: {where}"


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------

def centered_crop(native, size) -> tuple:
    h, w = native
    rh, rw = size
    return (h - rh) // 2, (w - rw) // 2, rh, rw


def crop_label(crop) -> str:
    return "none" if crop is None else ":".join(str(v) for v in crop)


@dataclass
class EvalReport:
    split: str
    digest: str
    rows: list = field(default_factory=list)        # per-slice dicts
    aggregates: list = field(default_factory=list)  # slice_index == -1 rows

    def aggregate(self, plane: str = "all", crop_kind: str = "full"):
        for row in self.aggregates:
            if row["plane"] == plane and row["crop"] == crop_kind:
                return row["psnr_db"], row["ssim"]
        raise KeyError((plane, crop_kind))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["split", "plane", "slice_index", "crop", "psnr_db", "ssim"])
            writer.writeheader()
            writer.writerows(self.rows + self.aggregates)


def _crop_kind(crop, native) -> str:
    if crop is None:
        return "full"
    return f"{crop[2]}x{crop[3]}"


def evaluate(model, dataset: SliceDataset, stride: int = 1, crop_suite: bool = False,
             predict=None, batch: int = 32) -> EvalReport:
    """Per-slice PSNR/SSIM against bilinearly resampled ground truth.

    ``predict(pa, lat, queries, targets) -> (N, 1, H, W)`` overrides the model
    forward pass (used to score reference predictors).
    """
    cfg = model.cfg
    dataset.check_compatible(cfg)
    cache = QueryCache(model)
    records = dataset.records[::stride]
    jobs = []
    for rec in records:
        native = dataset.volumes[rec["item"]].slice_shape(rec["plane"])
        jobs.append((rec, None, "full"))
        if crop_suite:
            for div in (2, 4):
                crop = centered_crop(native, (native[0] // div, native[1] // div))
                jobs.append((rec, crop, _crop_kind(crop, native)))
    dtype = model_dtype(model)
    rows = []
    with no_grad():
        for s in range(0, len(jobs), batch):
            chunk = jobs[s:s + batch]
            recs = [j[0] for j in chunk]
            pa, lat, target, qs = make_batch(dataset, cache, recs, [j[1] for j in chunk], dtype)
            pred = predict(pa, lat, qs, target) if predict is not None else model(pa, lat, qs).data
            for (rec, crop, kind), p, t in zip(chunk, pred, target):
                p = np.clip(np.asarray(p[0], dtype=np.float64), 0.0, 1.0)
                t = np.asarray(t[0], dtype=np.float64)
                rows.append({"split": dataset.split, "plane": rec["plane"], "slice_index": rec["index"],
                             "crop": crop_label(crop), "psnr_db": psnr(p, t), "ssim": ssim(p, t),
                             "_kind": kind})
    report = EvalReport(dataset.split, cfg.digest())
    kinds = sorted({r["_kind"] for r in rows}, key=lambda k: (k != "full", k))
    for kind in kinds:
        for plane in list(PLANES) + ["all"]:
            sel = [r for r in rows if r["_kind"] == kind and (plane == "all" or r["plane"] == plane)]
            if not sel:
                continue
            report.aggregates.append({
                "split": dataset.split, "plane": plane, "slice_index": -1, "crop": kind,
                "psnr_db": float(np.mean([r["psnr_db"] for r in sel])),
                "ssim": float(np.mean([r["ssim"] for r in sel])),
            })
    for r in rows:
        del r["_kind"]
    report.rows = rows
    return report


def evaluate_checkpoint(checkpoint, manifest_path, split: str = "test", stride: int = 1,
                        crop_suite: bool = False) -> EvalReport:
    model = load_model(checkpoint)
    return evaluate(model, SliceDataset(manifest_path, split), stride, crop_suite)


# ----------------------------------------------------------------------------
# ablation grid
# ----------------------------------------------------------------------------

ABLATION_FIELDS = ["projection", "use_pe", "use_global", "test_psnr", "test_ssim", "val_psnr",
                   "seconds", "digest"]


def run_ablation(manifest_path, base_cfg: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
                 out_dir=None, projections=("perspective", "orthogonal"), pe=(True, False),
                 use_global=(False, True), eval_stride: int = 1) -> list:
    """Train and test every (projection, PE, global) combination with identical seeds and data."""
    base_cfg = base_cfg or ModelConfig()
    train_cfg = train_cfg or TrainConfig(epochs=15)
    test_set = SliceDataset(manifest_path, "test")
    results = []
    for proj in projections:
        for use_pe in pe:
            for glob in use_global:
                cfg = replace(base_cfg, projection=proj, use_pe=use_pe, use_global=glob)
                sub = None
                if out_dir is not None:
                    sub = Path(out_dir) / f"{proj}_pe{int(use_pe)}_global{int(glob)}"
                res = train(manifest_path, cfg, train_cfg, sub)
                report = evaluate(res.model, test_set, eval_stride)
                test_psnr, test_ssim = report.aggregate("all", "full")
                results.append({
                    "projection": proj, "use_pe": use_pe, "use_global": glob,
                    "test_psnr": test_psnr, "test_ssim": test_ssim,
                    "val_psnr": res.curve[-1]["val_psnr"] if res.curve else math.nan,
                    "seconds": round(res.seconds, 2), "digest": cfg.digest(),
                })
                if sub is not None:
                    report.to_csv(sub / "test_report.csv")
    if out_dir is not None:
        with open(Path(out_dir) / "ablation.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
            writer.writeheader()
            writer.writerows(results)
    return results


__all__ = [
    "build_dataset", "load_manifest", "SliceDataset", "QueryCache", "make_batch", "sample_crop",
    "PerceptualFeatures", "perceptual_loss", "loss_total", "TrainConfig", "TrainResult", "train",
    "mean_loss", "evaluate", "evaluate_checkpoint", "EvalReport", "run_ablation", "config_digest",
]
