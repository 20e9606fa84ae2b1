"""Command-line entry point: ``htprior {gen-data,train,eval,detect,gradcheck}``."""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from htprior import block, dataset, detector, hough, training
from htprior.errors import ConfigurationError, HTPriorError, LoadError


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ConfigurationError(f"{out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    splits = dataset.generate_dataset(args.seed)
    for name, samples in splits.items():
        dataset.save_split(out / name, samples)
    counts = ", ".join(f"{k} {len(v)}" for k, v in splits.items())
    print(f"wrote {counts} to {out} (manifest sha256 {dataset.manifest_digest(out)[:16]})")
    return 0


def cmd_train(args) -> int:
    cfg = training.load_config(args.config)
    result = training.train(cfg)
    print(f"best val AP {100 * result.best_ap:.2f}% at epoch {result.best_epoch}; "
          f"checkpoint {result.out_dir / training.BEST_CKPT}")
    return 0


def cmd_eval(args) -> int:
    model, cfg = training.load_trained(args.ckpt, args.config)
    data = args.data or cfg.data
    if not data:
        raise ConfigurationError("no dataset directory: pass --data")
    samples = dataset.load_split(Path(data) / args.split)
    out = Path(args.out) if args.out else Path(args.ckpt).parent
    out.mkdir(parents=True, exist_ok=True)
    report = training.write_metrics(out, args.split, model, samples, f"{cfg.model} on {args.split}")
    sys.stdout.write(report)
    return 0


def cmd_detect(args) -> int:
    image = (dataset.read_pgm(args.image) > 127).astype(np.float32)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    if args.mode == "learned":
        if not args.ckpt:
            raise ConfigurationError("learned mode needs --ckpt")
        model, cfg = training.load_trained(args.ckpt, args.config)
        H, W = image.shape
        model.mask = hough.vote_mask_for(W, H, cfg.n_rho, cfg.n_theta)
        if isinstance(model, block.BlockModel):
            model.block.mask = model.mask
        dataset.write_pgm(out / f"{stem}_pred.pgm", (model.predict(image) * 255).round().astype(np.uint8))
        print(f"wrote {out / f'{stem}_pred.pgm'}")
        return 0
    lines = [p for p in detector.detect_lines(image, k=args.k) if p.score > 0]
    H, W = image.shape
    grid = hough.build_grid(W, H)
    raster = np.zeros((H, W), np.uint8)
    for p in lines:
        raster |= detector.rasterize_line(p, grid)
    dataset.write_pgm(out / f"{stem}_lines.pgm", raster)
    with open(out / f"{stem}_lines.txt", "w", newline="\n") as fh:
        fh.write("rho theta score\n")
        for p in lines:
            fh.write(f"{p.rho:.4f} {p.theta:.6f} {p.score:.6f}\n")
    print(f"{len(lines)} lines; wrote {out / f'{stem}_lines.pgm'} and {out / f'{stem}_lines.txt'}")
    return 0


def cmd_gradcheck(args) -> int:
    kinds = block.MODEL_KINDS if args.model == "all" else [args.model]
    failed = 0
    for kind in kinds:
        if kind not in block.MODEL_KINDS:
            raise ConfigurationError(f"unknown model {kind!r}; expected one of {', '.join(block.MODEL_KINDS)}")
        err = training.gradient_report(kind, args.seed)
        ok = err <= args.tol
        failed += not ok
        print(f"{kind:16s} max relative error {err:.2e}  {'ok' if ok else 'FAIL'}")
    if failed:
        raise HTPriorError(f"{failed} model(s) exceed relative error {args.tol:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="htprior", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the Line-Circle dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="replace an existing non-empty directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a key = value config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="average precision of a checkpoint on one split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=sorted(dataset.SPLITS), default="test")
    p.add_argument("--data", help="dataset directory (default: the one in the run config)")
    p.add_argument("--config", help="run config (default: run.cfg beside the checkpoint)")
    p.add_argument("--out", help="directory for the report and CSV (default: beside the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="line map of one PGM image")
    p.add_argument("--image", required=True)
    p.add_argument("--mode", choices=("learned", "classic"), default="classic")
    p.add_argument("--ckpt")
    p.add_argument("--config")
    p.add_argument("--k", type=int, default=5, help="number of Hough peaks in classic mode")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check on a small model")
    p.add_argument("--model", default="all", help="model kind or 'all'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (HTPriorError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
