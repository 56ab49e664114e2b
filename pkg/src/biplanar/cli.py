"""Command-line entry point: ``python -m biplanar <command> ...``.

Every command accepts ``--config file.json``.  The file may hold flat option
values (same names as the flags, underscores for dashes) and optional
``model`` / ``train`` sections.  Explicit flags win over the file.  Commands
that write outputs also write ``resolved_config.json`` next to them; feeding
that file back through ``--config`` reproduces the run.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import BiplanarError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
log = logging.getLogger("biplanar")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_help()}")


def _ints(n):
    return dict(type=int, nargs=n)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="biplanar", description=__doc__.split("\n")[0])
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS threads (1 = bit-deterministic)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--out", type=Path, default=None, help="output directory (default out/<command>)")
        return p

    p = command("phantom", "generate phantom volumes")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", **_ints(3), default=[64, 64, 64])
    p.add_argument("--n-organs", type=int, default=4)

    p = command("drr", "render a PA / lateral DRR pair from a volume file")
    p.add_argument("--volume", type=Path)
    p.add_argument("--res", **_ints(2), default=[64, 64])
    p.add_argument("--step", type=float, default=1 / 128)
    p.add_argument("--source-dist", type=float, default=3.0)
    p.add_argument("--focal", type=float, default=2.0)

    p = command("dataset", "build a phantom dataset and manifest")
    p.add_argument("--n-train", type=int, default=40)
    p.add_argument("--n-val", type=int, default=5)
    p.add_argument("--n-test", type=int, default=5)
    p.add_argument("--dims", **_ints(3), default=[64, 64, 64])
    p.add_argument("--res", **_ints(2), default=[64, 64])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--source-dist", type=float, default=3.0)
    p.add_argument("--focal", type=float, default=2.0)

    for name, help_text, epochs in (("train", "train a slice reconstructor", 50),
                                    ("ablate", "train/test the projection x PE x global grid", 15)):
        p = command(name, help_text)
        p.add_argument("--manifest", type=Path)
        p.add_argument("--epochs", type=int, default=None, help=f"default {epochs}")
        p.set_defaults(default_epochs=epochs)
        p.add_argument("--batch", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--lambda-p", type=float, default=None)
        p.add_argument("--p-part", type=float, default=None)
        p.add_argument("--slice-stride", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--eval-stride", type=int, default=1)
        if name == "train":
            p.add_argument("--projection", choices=["perspective", "orthogonal"], default=None)
            p.add_argument("--pe", dest="use_pe", action=argparse.BooleanOptionalAction, default=None)
            p.add_argument("--global", dest="use_global", action=argparse.BooleanOptionalAction, default=None)

    p = command("reconstruct", "predict one slice from an X-ray pair")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--pa", type=Path)
    p.add_argument("--lat", type=Path)
    p.add_argument("--volume", type=Path, help="volume defining the slice geometry (and ground truth)")
    p.add_argument("--plane", choices=["axial", "coronal", "sagittal"], default="axial")
    p.add_argument("--index", type=int, default=32)
    p.add_argument("--crop", **_ints(4), default=None, metavar=("ROW0", "COL0", "ROWS", "COLS"))

    p = command("eval", "PSNR/SSIM report for a checkpoint on a manifest split")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--split", default="test")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--crop-suite", action="store_true")

    p = command("gradcheck", "finite-difference self-test of the autodiff ops")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


_REQUIRED = {
    "drr": ["volume"], "train": ["manifest"], "ablate": ["manifest"], "eval": ["checkpoint", "manifest"],
    "reconstruct": ["checkpoint", "pa", "lat", "volume"],
}
_PATH_KEYS = {"out", "volume", "manifest", "checkpoint", "pa", "lat", "config"}


def parse(argv):
    """Parse ``argv`` with config-file defaults; returns (args, model section, train section)."""
    parser = build_parser()
    args = parser.parse_args(argv)
    model_sec, train_sec = {}, {}
    if getattr(args, "config", None) is not None:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        flat = dict(cfg.get("args", cfg))
        model_sec = dict(cfg.get("model", {}))
        train_sec = dict(cfg.get("train", {}))
        for key in ("model", "train", "args", "command", "config", "seconds"):
            flat.pop(key, None)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions} | {"threads", "verbose", "default_epochs"}
        unknown = set(flat) - known
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}\n\n{sub.format_help()}")
        flat = {k: Path(v) if k in _PATH_KEYS and v is not None else v for k, v in flat.items()}
        sub.set_defaults(**flat)
        parser.set_defaults(**{k: flat[k] for k in ("threads", "verbose") if k in flat})
        args = parser.parse_args(argv)
    missing = [k for k in _REQUIRED.get(args.command, []) if getattr(args, k) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required options {['--' + m.replace('_', '-') for m in missing]}")
    if args.out is None:
        args.out = Path("out") / args.command
    return args, model_sec, train_sec


def _write_resolved(args, extra=None):
    args.out.mkdir(parents=True, exist_ok=True)
    flat = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "config"}
    doc = {"command": args.command, "args": flat}
    doc.update(extra or {})
    (args.out / "resolved_config.json").write_text(json.dumps(doc, indent=2))


def _model_train_configs(args, model_sec, train_sec):
    from .model import ModelConfig
    from .training import TrainConfig

    mcfg = ModelConfig.from_dict(model_sec)
    overrides = {k: getattr(args, k, None) for k in ("projection", "use_pe", "use_global")}
    mcfg = replace(mcfg, **{k: v for k, v in overrides.items() if v is not None})
    tcfg = TrainConfig.from_dict({"epochs": args.default_epochs, **train_sec})
    flag_map = {"epochs": "epochs", "batch": "batch", "lr": "lr", "lambda_p": "lambda_p",
                "p_part": "p_part", "slice_stride": "slice_stride", "seed": "seed"}
    tover = {field: getattr(args, flag) for flag, field in flag_map.items() if getattr(args, flag) is not None}
    tcfg = replace(tcfg, **tover)
    return mcfg, tcfg


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_phantom(args, *_):
    from .volume import PhantomSpec, generate_phantom, save_png, save_volume

    _write_resolved(args)
    for i in range(args.n):
        seed = args.seed + i
        vol = generate_phantom(PhantomSpec(seed=seed, n_organs=args.n_organs), tuple(args.dims))
        save_volume(vol, args.out / f"phantom_{seed:04d}.vol")
        save_png(args.out / f"phantom_{seed:04d}_axial.png", vol.slice_array("axial", vol.shape[0] // 2))
    print(f"wrote {args.n} volume(s) to {args.out}")


def cmd_drr(args, *_):
    from .drr import render_pair
    from .geometry import make_biplanar_rig
    from .volume import load_volume, save_image_raw, save_png

    vol = load_volume(args.volume)
    rig = make_biplanar_rig(args.source_dist, args.focal)
    _write_resolved(args, {"poses": [p.to_dict() for p in rig]})
    stem = args.volume.stem
    for img, tag in zip(render_pair(vol, rig, tuple(args.res), args.step), ("pa", "lat")):
        save_image_raw(args.out / f"{stem}_{tag}.drr", img.pixels)
        save_png(args.out / f"{stem}_{tag}.png", img.pixels)
    print(f"wrote DRR pair for {args.volume} to {args.out}")


def cmd_dataset(args, *_):
    from .training import build_dataset

    _write_resolved(args)
    m = build_dataset(args.out, args.n_train, args.n_val, args.n_test, tuple(args.dims),
                      args.source_dist, args.focal, args.seed, tuple(args.res))
    n = {k: len(v) for k, v in m["slices"].items()}
    print(f"manifest {args.out / 'manifest.json'}: slice records {n}")


def cmd_train(args, model_sec, train_sec):
    from .training import evaluate, SliceDataset, train

    mcfg, tcfg = _model_train_configs(args, model_sec, train_sec)
    _write_resolved(args, {"model": mcfg.to_dict(), "train": tcfg.to_dict()})
    res = train(args.manifest, mcfg, tcfg, args.out)
    report = evaluate(res.model, SliceDataset(args.manifest, "test"), args.eval_stride)
    report.to_csv(args.out / "test_report.csv")
    p, s = report.aggregate()
    print(f"checkpoint {res.checkpoint}; test PSNR {p:.3f} dB, SSIM {s:.4f}; {res.seconds:.1f} s")


def cmd_ablate(args, model_sec, train_sec):
    from .training import run_ablation

    mcfg, tcfg = _model_train_configs(args, model_sec, train_sec)
    _write_resolved(args, {"model": mcfg.to_dict(), "train": tcfg.to_dict()})
    rows = run_ablation(args.manifest, mcfg, tcfg, args.out, eval_stride=args.eval_stride)
    for r in rows:
        print(f"{r['projection']:12s} pe={int(r['use_pe'])} global={int(r['use_global'])} "
              f"PSNR {r['test_psnr']:.3f} SSIM {r['test_ssim']:.4f}")
    print(f"wrote {args.out / 'ablation.csv'}")


def _panel(pred, target) -> np.ndarray:
    cells = [np.clip(pred, 0, 1), np.clip(target, 0, 1), np.clip(np.abs(pred - target), 0, 1)]
    gap = np.ones((pred.shape[0], 2))
    row = np.concatenate([cells[0], gap, cells[1], gap, cells[2]], axis=1)
    return np.round(255 * row).astype(np.uint8)


def reconstruct_slice(model, pa, lat, vol, spec):
    """Predicted slice (H_out, W_out) and bilinear ground truth for ``spec``."""
    from .autodiff import no_grad
    from .volume import extract_slice

    target, grid = extract_slice(vol, replace(spec, out_res=model.cfg.out_res), model.cfg.feat_res)
    dtype = model.parameters()[0].dtype
    with no_grad():
        pred = model(pa[None, None].astype(dtype), lat[None, None].astype(dtype), [model.query(grid)])
    return pred.data[0, 0], target


def cmd_reconstruct(args, *_):
    from PIL import Image

    from .metrics import psnr, ssim
    from .model import load_model
    from .volume import SliceSpec, load_image_raw, load_volume, save_image_raw, save_png

    model = load_model(args.checkpoint)
    vol = load_volume(args.volume)
    spec = SliceSpec(args.plane, args.index, tuple(args.crop) if args.crop else None)
    _write_resolved(args)
    pred, target = reconstruct_slice(model, load_image_raw(args.pa), load_image_raw(args.lat), vol, spec)
    save_image_raw(args.out / "prediction.raw", pred)
    save_png(args.out / "prediction.png", pred)
    Image.fromarray(_panel(pred, target), mode="L").save(args.out / "panel.png")
    print(f"{args.plane}[{args.index}] crop={spec.crop}: PSNR {psnr(np.clip(pred, 0, 1), target):.3f} dB, "
          f"SSIM {ssim(np.clip(pred, 0, 1), target):.4f}")


def cmd_eval(args, *_):
    from .training import evaluate_checkpoint

    _write_resolved(args)
    report = evaluate_checkpoint(args.checkpoint, args.manifest, args.split, args.stride, args.crop_suite)
    report.to_csv(args.out / f"eval_{args.split}.csv")
    for row in report.aggregates:
        print(f"{row['plane']:9s} {row['crop']:6s} PSNR {row['psnr_db']:.3f} dB  SSIM {row['ssim']:.4f}")


def cmd_gradcheck(args, *_):
    from .selfcheck import key_bias_gradient, run_suite

    worst = run_suite(range(args.seeds), args.tol)
    kb = max(key_bias_gradient(s) for s in range(args.seeds))
    ok = all(v <= args.tol for v in worst.values()) and kb <= 1e-10
    for name, err in worst.items():
        print(f"{'PASS' if err <= args.tol else 'FAIL'} {name:24s} max rel err {err:.2e}")
    print(f"{'PASS' if kb <= 1e-10 else 'FAIL'} {'attention key bias':24s} max |grad| {kb:.2e} (exact value 0)")
    if not ok:
        raise BiplanarError("gradient check failed")


COMMANDS = {
    "phantom": cmd_phantom, "drr": cmd_drr, "dataset": cmd_dataset, "train": cmd_train,
    "ablate": cmd_ablate, "reconstruct": cmd_reconstruct, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args, model_sec, train_sec = parse(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    start = time.perf_counter()
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                COMMANDS[args.command](args, model_sec, train_sec)
        else:
            COMMANDS[args.command](args, model_sec, train_sec)
    except (BiplanarError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"[{args.command}] {time.perf_counter() - start:.2f} s")
    return EXIT_OK


def main() -> None:
    sys.exit(run())
