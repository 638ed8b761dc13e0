"""Command-line entry point: ``mirnetv2 {train,infer,eval,analyze}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numeric failure.

Eval table format (tab-separated)::

    name    psnr    ssim    mae
    <stem>  31.2    0.91    0.021
    ...
    mean    ...

Infinite PSNR (identical images) is written as ``inf``.
"""

from __future__ import annotations

import argparse
import math
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .config import ConfigError, load_run_config
from .costs import count_costs, fusion_table
from .data import ImageFormatError, UnpairedDataError, dual_pixel_concat, list_pairs, load_image, save_image
from .formats import FormatError, load_checkpoint
from .metrics import mae, psnr, ssim
from .tensor import FLOAT32, FLOAT64, DTypeMismatch, ShapeError, is_sequential, set_sequential

EVAL_COLUMNS = ("name", "psnr", "ssim", "mae")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package (``tiny`` or ``default``)."""
    return Path(str(resources.files("mirnetv2") / "configs" / f"{name}.cfg"))


def _config_path(arg: str) -> Path:
    p = Path(arg)
    if not p.exists() and "/" not in arg and not arg.endswith(".cfg"):
        cand = bundled_config(arg)
        if cand.exists():
            return cand
    return p


def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size: expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise UsageError(f"--size: extents must be positive, got {text!r}")
    return h, w


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    from .data import PairedDataset
    from .train import train_loop

    run = load_run_config(_config_path(args.config))
    if args.seed is not None:
        run.train.seed = args.seed
    if args.iters is not None:
        run.train.total_iters = args.iters
        run.train.validate(run.model.scale_factor)
    out = Path(args.output_dir or run.output_dir)
    try:
        dataset = PairedDataset.from_spec(run.data)
    except ValueError as exc:
        raise ConfigError(str(exc), "data") from None
    result = train_loop(run.model, run.train, dataset, out, dtype=FLOAT64 if args.f64 else FLOAT32,
                        verbose=not args.quiet)
    print(f"checkpoint: {out / 'checkpoint.erck'}")
    print(f"metrics log: {out / 'metrics.tsv'}")
    if result.val_psnr is not None:
        print(f"validation PSNR {result.val_psnr:.3f} dB (input {result.input_psnr:.3f} dB)")
    print(f"wall time {result.wall_time:.1f} s")
    return 0


def _load_model(path: str, f64: bool):
    cfg, store, _, _ = load_checkpoint(path)
    return cfg, store.astype(FLOAT64 if f64 else FLOAT32)


def cmd_infer(args) -> int:
    from .train import restore

    cfg, store = _load_model(args.checkpoint, args.f64)
    images = [load_image(p) for p in args.inputs]
    if len(images) == 2:
        image = dual_pixel_concat(*images)
    elif len(images) == 1:
        image = images[0]
    else:
        raise UsageError("infer takes one input image, or two for dual-pixel (left right)")
    if image.shape[1] != cfg.in_channels:
        raise UsageError(f"checkpoint expects {cfg.in_channels} input channels, got {image.shape[1]} "
                         f"({'pass two views' if cfg.in_channels == 6 else 'pass one image'})")
    out = restore(image, store, cfg)
    save_image(out, args.output)
    print(f"wrote {args.output}")
    return 0


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else repr(float(v))


def format_eval_table(rows: list[tuple[str, float, float, float]]) -> str:
    lines = ["\t".join(EVAL_COLUMNS)]
    lines += [f"{n}\t{_fmt(p)}\t{_fmt(s)}\t{_fmt(m)}" for n, p, s, m in rows]
    means = [float(np.mean([r[i] for r in rows])) for i in (1, 2, 3)]
    lines.append("mean\t" + "\t".join(_fmt(v) for v in means))
    return "\n".join(lines) + "\n"


def parse_eval_table(text: str) -> tuple[list[tuple[str, float, float, float]], tuple[float, float, float]]:
    """Inverse of :func:`format_eval_table`: (per-image rows, means)."""
    lines = text.strip().splitlines()
    if tuple(lines[0].split("\t")) != EVAL_COLUMNS:
        raise ValueError("missing eval table header")
    rows = []
    for line in lines[1:]:
        name, *vals = line.split("\t")
        rows.append((name, *(float(v) for v in vals)))
    if not rows or rows[-1][0] != "mean":
        raise ValueError("missing mean row")
    return rows[:-1], tuple(rows[-1][1:])


def cmd_eval(args) -> int:
    from .train import restore

    pairs = list_pairs(args.dataset)
    model = _load_model(args.checkpoint, args.f64) if args.checkpoint else None
    rows = []
    for p in pairs:
        if model is not None:
            cfg, store = model
            if p.degraded.shape[1] != cfg.in_channels:
                raise UsageError(f"checkpoint expects {cfg.in_channels} channels, {p.name} has {p.degraded.shape[1]}")
            out = np.clip(restore(p.degraded, store, cfg).data, 0.0, 1.0)
        else:
            out = p.degraded.data[:, :3]
        clean = p.clean.data
        rows.append((p.name, psnr(out, clean), ssim(out, clean), mae(out, clean)))
    table = format_eval_table(rows)
    sys.stdout.write(table)
    if args.output:
        Path(args.output).write_text(table)
    return 0


def cmd_analyze(args) -> int:
    run = load_run_config(_config_path(args.config), check_paths=False, require_data=False)
    h, w = parse_size(args.size)
    try:
        report = count_costs(run.model, h, w)
    except ShapeError as exc:
        raise UsageError(f"--size: {exc}") from None
    text = report.to_text(include_layers=args.layers)
    c, n = args.fusion_channels, args.fusion_inputs
    text += f"\n[fusion C={c} n={n}]\n"
    text += "".join(f"{k} = {v}\n" for k, v in fusion_table(c, n).items())
    sys.stdout.write(text)
    if args.output:
        Path(args.output).write_text(text)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mirnetv2", description="Multi-scale image restoration: train, infer, eval, analyze.")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--sequential", action="store_true", help="single-threaded, bitwise-reproducible mode")
    p.add_argument("--f64", action="store_true", help="run in float64 (verification dtype)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a run config")
    t.add_argument("config", help="config file, or a bundled name (tiny, default)")
    t.add_argument("--output-dir", default=None)
    t.add_argument("--iters", type=int, default=None, help="override train.total_iters")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="restore one image (or a dual-pixel pair)")
    i.add_argument("checkpoint")
    i.add_argument("inputs", nargs="+", help="input image, or left and right views")
    i.add_argument("-o", "--output", required=True)
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="PSNR/SSIM/MAE over a paired dataset")
    e.add_argument("dataset", help="root with clean/ and degraded/ folders")
    e.add_argument("--checkpoint", default=None, help="model to evaluate; omit to score the degraded inputs")
    e.add_argument("-o", "--output", default=None, help="also write the table here")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("analyze", help="parameter / FLOP / conv / activation counts")
    a.add_argument("config", help="config file, or a bundled name (tiny, default)")
    a.add_argument("--size", default="256x256", help="HxW (default 256x256)")
    a.add_argument("--layers", action="store_true", help="include the per-layer table")
    a.add_argument("--fusion-channels", type=int, default=64)
    a.add_argument("--fusion-inputs", type=int, default=2)
    a.add_argument("-o", "--output", default=None)
    a.set_defaults(fn=cmd_analyze)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    was_sequential = is_sequential()
    if args.sequential:
        set_sequential(True)
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, ImageFormatError, UnpairedDataError, ShapeError, DTypeMismatch,
            ArithmeticError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    finally:
        set_sequential(was_sequential)


if __name__ == "__main__":
    sys.exit(main())
