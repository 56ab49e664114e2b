"""
Training a slice reconstructor and decoding partial windows
============================================================

Build a small synthetic dataset, train for a few epochs with random crops,
then reconstruct full slices and centered native/2, native/4 windows.
Outputs go to ``demos/out/train_and_reconstruct``.  Takes a few minutes on
one CPU core; raise ``EPOCHS`` / ``N_TRAIN`` for better images.
"""
import logging
from pathlib import Path

import numpy as np

from biplanar import ModelConfig, SliceSpec
from biplanar.cli import reconstruct_slice
from biplanar.training import SliceDataset, TrainConfig, build_dataset, centered_crop, evaluate, train
from biplanar.volume import save_png

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
EPOCHS, N_TRAIN = 4, 8
out = Path(__file__).parent / "out" / "train_and_reconstruct"
build_dataset(out / "data", N_TRAIN, 1, 2, vol_dims=(64, 64, 64), seed=0)
manifest = out / "data" / "manifest.json"

cfg = ModelConfig()  # perspective projection, positional encoding, no global branch
tcfg = TrainConfig(epochs=EPOCHS, p_part=0.5, slice_stride=4, val_stride=16)
res = train(manifest, cfg, tcfg, out / "run")
print(f"trained in {res.seconds:.0f} s; checkpoint {res.checkpoint}")

test = SliceDataset(manifest, "test")
report = evaluate(res.model, test, stride=8, crop_suite=True)
for row in report.aggregates:
    print(f"{row['plane']:9s} {row['crop']:6s} PSNR {row['psnr_db']:6.2f} dB  SSIM {row['ssim']:.3f}")

# one coronal slice, full frame and two centered windows, each decoded at 64x64
vol = test.volumes[0]
pa, lat = test.drrs[0]
for div in (1, 2, 4):
    crop = None if div == 1 else centered_crop(vol.slice_shape("coronal"), (64 // div, 64 // div))
    pred, target = reconstruct_slice(res.model, pa, lat, vol, SliceSpec("coronal", 30, crop))
    save_png(out / f"coronal30_div{div}.png", np.concatenate([np.clip(pred, 0, 1), target], axis=1))
print("wrote", sorted(p.name for p in out.glob("*.png")))
