"""
Projection / positional-encoding / global-feature ablation
===========================================================

Train every combination of perspective vs orthogonal resampling, positional
encoding on/off and global features on/off with identical data and seeds,
then compare test PSNR.  The default budget here is small (8 training
phantoms, 3 epochs, 8 runs); the acceptance suite runs the 40-phantom
perspective vs orthogonal comparison.
"""
import logging
from pathlib import Path

from biplanar import ModelConfig
from biplanar.training import TrainConfig, build_dataset, run_ablation

logging.basicConfig(level=logging.WARNING)
out = Path(__file__).parent / "out" / "ablation"
build_dataset(out / "data", 8, 1, 2, vol_dims=(64, 64, 64), seed=0)
rows = run_ablation(out / "data" / "manifest.json", ModelConfig(),
                    TrainConfig(epochs=3, slice_stride=8, val_stride=16), out / "runs", eval_stride=8)
for r in sorted(rows, key=lambda r: -r["test_psnr"]):
    print(f"{r['projection']:12s} pe={int(r['use_pe'])} global={int(r['use_global'])} "
          f"PSNR {r['test_psnr']:.2f} dB  SSIM {r['test_ssim']:.3f}  ({r['seconds']:.0f} s)")
