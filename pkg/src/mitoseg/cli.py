"""``mitoseg`` command line: synth, train, predict, eval, bench, inspect.

Failures exit nonzero after printing one line to stderr of the form
``mitoseg: error[<category>]: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .bench import run_bench
from .data_pipeline import BlobSpec, PatchSampler, StackError, load_stack, make_synthetic_fixture, save_stack
from .data_pipeline.stack import read_meta, to_uint8, write_meta
from .metrics import evaluate
from .runconfig import load_config
from .tensor_core import ShapeError
from .unet_model import (
    DECODER,
    ENCODER,
    ENCODER_PARAMS,
    REFERENCE_DECODER_PARAMS,
    CheckpointError,
    ConfigError,
    Trainer,
    TrainingDiverged,
    UNetConfig,
    build,
    load,
    load_trainer,
    predict_volume,
    tile_grid,
    utilization,
)
from .zfilter import ZFilterSpec, zfilter

log = logging.getLogger("mitoseg")

EXIT_CODES = {"usage": 2, "config": 3, "data": 4, "checkpoint": 5, "diverged": 6, "invalid": 7, "io": 8}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


def _size(text: str) -> tuple[int, int]:
    """'512' or '1024x768' (width x height) -> (height, width)."""
    parts = text.lower().split("x")
    try:
        nums = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use N or WxH") from None
    if len(nums) == 1:
        return nums[0], nums[0]
    if len(nums) == 2:
        return nums[1], nums[0]
    raise argparse.ArgumentTypeError(f"bad size {text!r}; use N or WxH")


# -- synth -----------------------------------------------------------------

def cmd_synth(args) -> int:
    h, w = args.size
    blobs = BlobSpec() if args.blobs is None else BlobSpec(count=args.blobs)
    stack = make_synthetic_fixture(args.slices, (h, w), blobs=blobs, seed=args.seed)
    save_stack(args.out, stack)
    print(f"wrote {stack.depth} slices of {w}x{h} to {args.out} (foreground {stack.labels.mean():.4f})")
    return 0


# -- train -----------------------------------------------------------------

def _progress(every: int):
    def report(step, loss):
        if every and step % every == 0:
            print(f"step {step} loss {loss:.6f}", flush=True)
    return report


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    stack = load_stack(args.data, require_masks=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        trainer = load_trainer(args.resume, cfg.train_spec())
        if trainer.model.config != cfg.model_config():
            raise CliError("config", f"resume checkpoint model {trainer.model.config} does not match config")
    else:
        trainer = Trainer(build(cfg.model_config(), seed=cfg.seed), cfg.train_spec())
    (out / "config.txt").write_text(cfg.to_text())
    trainer.run(PatchSampler(stack, cfg.augment_spec()), out, on_step=_progress(args.log_every))
    print(f"trained {trainer.step} steps; final loss {trainer.losses[-1] if trainer.losses else float('nan'):.6f}")
    if args.val:
        val = load_stack(args.val, require_masks=True)
        pv = predict_volume(trainer.model, val)
        report = evaluate(pv.threshold(args.threshold), val.labels, pv.probs, args.threshold)
        report.write(out / "val_report")
        print(report.to_text(), end="")
    return 0


# -- predict ---------------------------------------------------------------

def _save_raster(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path)


def cmd_predict(args) -> int:
    model = load(args.checkpoint)
    stack = load_stack(args.data)
    pv = predict_volume(model, stack, batch_size=args.batch_size, workers=args.workers)
    probs = pv.probs
    if args.zfilter_depth and args.zfilter_mode == "prob":
        probs = zfilter(probs, ZFilterSpec(depth=args.zfilter_depth, binary=False))
        masks = (probs >= args.threshold).astype(np.uint8)
    elif args.zfilter_depth:
        masks = zfilter(probs, ZFilterSpec(depth=args.zfilter_depth, binary=True, threshold=args.threshold))
    else:
        masks = (probs >= args.threshold).astype(np.uint8)

    out = Path(args.out)
    dirs = {"probs": out / "probs", "masks": out / "masks"}
    if args.float32:
        dirs["probs_f32"] = out / "probs_f32"
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    for name, p, m in zip(stack.names, probs, masks):
        _save_raster(dirs["probs"] / f"{name}.png", to_uint8(p))
        _save_raster(dirs["masks"] / f"{name}.png", (m * 255).astype(np.uint8))
        if args.float32:
            _save_raster(dirs["probs_f32"] / f"{name}.tif", np.ascontiguousarray(p, dtype=np.float32))
    z, h, w = stack.shape
    write_meta(out / "predict.meta", z, h, w, stack.voxel_size_nm, threshold=args.threshold,
               zfilter_depth=args.zfilter_depth or 1, zfilter_mode=args.zfilter_mode if args.zfilter_depth else "off")
    print(f"wrote {z} probability and mask slices to {out}")
    return 0


# -- eval ------------------------------------------------------------------

def _read_dir(folder: Path, names) -> np.ndarray:
    arrs = []
    for name in names:
        hits = sorted(p for p in folder.glob(f"{name}.*"))
        if not hits:
            raise StackError(f"{folder}: missing slice {name}")
        with Image.open(hits[0]) as im:
            arrs.append(np.asarray(im))
    return np.stack(arrs)


def cmd_eval(args) -> int:
    pred_root, gt = Path(args.pred), load_stack(args.gt, require_masks=True)
    meta = read_meta(pred_root / "predict.meta") if (pred_root / "predict.meta").exists() else {}
    probs = None
    if (pred_root / "probs_f32").is_dir():
        probs = _read_dir(pred_root / "probs_f32", gt.names).astype(np.float32)
    elif (pred_root / "probs").is_dir():
        probs = _read_dir(pred_root / "probs", gt.names).astype(np.float32) / 255.0
    if args.threshold is not None:
        if probs is None:
            raise CliError("data", f"{pred_root}: --threshold needs a probs/ directory")
        threshold = args.threshold
        pred = (probs >= threshold).astype(np.uint8)
    else:
        # stored masks are the pipeline's decision (z-filter included)
        threshold = float(meta.get("threshold", 0.5))
        raw = _read_dir(pred_root / "masks", gt.names)
        bad = ~np.isin(raw, (0, 255))
        if bad.any():
            raise CliError("data", f"{pred_root / 'masks'}: mask values must be 0 or 255, found {int(raw[bad][0])}")
        pred = (raw == 255).astype(np.uint8)
    if pred.shape != gt.labels.shape:
        raise CliError("invalid", f"prediction shape {pred.shape} != ground-truth shape {gt.labels.shape}")
    report = evaluate(pred, gt.labels, probs, threshold)
    stem = Path(args.out) if args.out else pred_root / "report"
    report.write(stem)
    print(report.to_text(), end="")
    return 0


# -- bench -----------------------------------------------------------------

def cmd_bench(args) -> int:
    # reject bad timing plans before allocating anything large
    if args.runs < 3 or args.warmup < 1:
        raise CliError("usage", f"bench needs --runs >= 3 and --warmup >= 1 (got {args.runs}, {args.warmup})")
    if args.checkpoint:
        model = load(args.checkpoint)
    else:
        model = build(UNetConfig(filters=tuple(args.filters)), seed=0)
    if args.data:
        stack = load_stack(args.data).images
    else:
        z = args.slices
        h, w = args.size
        stack = np.random.default_rng(0).random((z, h, w), dtype=np.float32)
    report = run_bench(model, stack, runs=args.runs, warmup=args.warmup, workers=args.workers,
                       batch_size=args.batch_size, zfilter_depth=args.zfilter_depth)
    if args.out:
        report.write(args.out)
    print(report.to_text(), end="")
    return 0


# -- inspect ---------------------------------------------------------------

def _probe_tiles(images: np.ndarray, s: int, limit: int) -> np.ndarray:
    tiles = []
    for sl in images[:limit]:
        h, w = sl.shape
        if h < s or w < s:
            padded = np.zeros((max(h, s), max(w, s)), np.float32)
            padded[:h, :w] = sl
            sl, h, w = padded, *padded.shape
        tiles += [sl[y:y + s, x:x + s] for y, x in tile_grid(h, w, s)]
    return np.stack(tiles)


def cmd_inspect(args) -> int:
    model = load(args.checkpoint)
    enc, dec = model.param_count(ENCODER), model.param_count(DECODER)
    print(f"filters={','.join(map(str, model.config.filters))}")
    print(f"encoder_params={enc}")
    print(f"decoder_params={dec}")
    print(f"total_params={model.param_count()}")
    if model.config.filters == UNetConfig().filters:
        if enc != ENCODER_PARAMS:
            raise CliError("checkpoint", f"encoder has {enc} parameters, expected {ENCODER_PARAMS}")
        print(f"encoder_budget={ENCODER_PARAMS} (match)")
        print(f"decoder_vs_reference={dec - REFERENCE_DECODER_PARAMS:+d} (reference {REFERENCE_DECODER_PARAMS})")
    summary = {"encoder_params": enc, "decoder_params": dec, "total_params": enc + dec}
    if args.probe:
        probe = _probe_tiles(load_stack(args.probe).images, model.config.input_size, args.probe_slices)
        rep = utilization(model, probe)
        print(f"utilization={100 * rep.fraction:.1f}% ({rep.active}/{rep.total} filters active "
              f"on {len(probe)} probe tiles)")
        for name, (a, n) in rep.per_layer.items():
            print(f"  {name}: {a}/{n}")
        summary.update(utilization=rep.fraction, active_filters=rep.active, total_filters=rep.total)
    if args.json:
        Path(args.json).write_text(json.dumps(summary, indent=2) + "\n")
    return 0


# -- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mitoseg", description="Slimmed U-Net mitochondria segmentation for EM stacks.")
    p.add_argument("--version", action="version", version=f"mitoseg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a labelled synthetic stack")
    s.add_argument("--out", required=True)
    s.add_argument("--slices", type=int, default=16)
    s.add_argument("--size", type=_size, default=(512, 512), help="N or WxH (default 512)")
    s.add_argument("--blobs", type=int, default=None, help="ellipse count")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train on a labelled stack")
    s.add_argument("--config", help="key = value file")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--val", help="labelled stack evaluated after training")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--log-every", type=int, default=50)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="segment a stack")
    s.add_argument("checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--zfilter-depth", type=int, default=0, help="odd z-median depth; 0 disables")
    s.add_argument("--zfilter-mode", choices=("binary", "prob"), default="binary")
    s.add_argument("--float32", action="store_true", help="also write exact float32 probabilities")
    s.add_argument("--batch-size", type=int, default=1)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="score predictions against ground truth")
    s.add_argument("--pred", required=True, help="output directory of predict")
    s.add_argument("--gt", required=True, help="labelled stack")
    s.add_argument("--threshold", type=float, default=None,
                   help="re-threshold stored probabilities instead of using the stored masks")
    s.add_argument("--out", help="report stem (default <pred>/report)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="time inference throughput")
    s.add_argument("--checkpoint")
    s.add_argument("--filters", type=lambda t: [int(x) for x in t.split(",")], default=[16, 32, 64, 128, 256],
                   help="plan for a freshly initialized model when no checkpoint is given")
    s.add_argument("--data", help="stack to time; default is a random in-memory stack")
    s.add_argument("--slices", type=int, default=165)
    s.add_argument("--size", type=_size, default=(768, 1024), help="WxH of the random stack (default 1024x768)")
    s.add_argument("--runs", type=int, default=3)
    s.add_argument("--warmup", type=int, default=1)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--batch-size", type=int, default=1)
    s.add_argument("--zfilter-depth", type=int, default=0)
    s.add_argument("--out", help="report stem")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("inspect", help="parameter audit and filter utilization")
    s.add_argument("checkpoint")
    s.add_argument("--probe", help="stack whose slices feed the utilization probe")
    s.add_argument("--probe-slices", type=int, default=8)
    s.add_argument("--json", help="also write the audit as JSON")
    s.set_defaults(func=cmd_inspect)
    return p


def _category(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, StackError):
        return "data"
    if isinstance(exc, TrainingDiverged):
        return "diverged"
    if isinstance(exc, (ShapeError, ValueError)):
        return "invalid"
    if isinstance(exc, OSError):
        return "io"
    raise exc


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (CliError, ConfigError, CheckpointError, StackError, TrainingDiverged, ValueError, OSError) as exc:
        cat = _category(exc)
        msg = " ".join(str(exc).split())
        print(f"mitoseg: error[{cat}]: {msg}", file=sys.stderr)
        return EXIT_CODES.get(cat, 1)


if __name__ == "__main__":
    sys.exit(main())
