"""Command-line entry point: ``uformer {count,gradcheck,build,train,eval,infer}``.

Exit codes: 0 success, 1 verification or training failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import accounting, checkpoint, config as runconfig
from . import tensor as T
from .io import FormatError, read_png, write_png
from .metrics import count_tiles, psnr, rgb_to_y, ssim, tiled_inference
from .model import ConfigError, Model, build
from .train import TrainingError, make_dataset, train_loop

log = logging.getLogger("uformer")


class UsageError(Exception):
    pass


def _threads(deterministic: bool):
    env = os.environ.get("UFORMER_THREADS")
    limit = None
    if env is not None:
        limit = max(1, int(env))
    if deterministic:
        limit = 1
    if limit is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=limit)


def _load_config(args) -> runconfig.RunConfig:
    cfg = runconfig.load(args.config) if args.config else runconfig.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "deterministic", False):
        cfg.run.deterministic = True
    if getattr(args, "f64", False):
        cfg.run.f64 = True
    return cfg


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


# -- commands ---------------------------------------------------------------


def cmd_count(args) -> int:
    cfg = _load_config(args)
    report = accounting.count_macs(cfg.model, args.resolution, args.resolution)
    print(report.table())
    print("assumptions:")
    for a in accounting.ASSUMPTIONS:
        print(f"  - {a}")
    if args.out:
        out = Path(args.out)
        out.write_text(report.to_csv(), encoding="utf-8")
        from .plotting import cost_report_figure

        cost_report_figure(report, out.with_suffix(".png"), title=f"{report.params / 1e6:.2f} M params, {report.macs / 1e9:.2f} GMACs")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    cfg = _load_config(args) if args.config else None
    results = run_suite(seed=args.seed or 0, model_config=cfg.model if cfg else None)
    failed = [r for r in results if not r.ok]
    for r in results:
        print(f"{r.name:<20} max_rel_err={r.error:.3e}  tol={r.tol:.0e}  {'ok' if r.ok else 'FAIL'}")
    if failed:
        print("failing: " + ", ".join(r.name for r in failed))
        return 1
    return 0


def cmd_build(args) -> int:
    cfg = _load_config(args)
    dtype = np.float64 if cfg.run.f64 else np.float32
    with T.default_dtype(dtype):
        params = build(cfg.model, seed=cfg.train.seed, zero_output_proj=args.zero_output or cfg.run.zero_output_proj)
    out = args.out or cfg.paths.checkpoint
    checkpoint.save(out, params)
    print(f"wrote {out}: {params.num_params():,} parameters")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dtype = np.float64 if cfg.run.f64 else np.float32
    T.set_check_finite(cfg.run.check_finite)
    out_dir = Path(args.out or cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = Path(cfg.paths.checkpoint)
    if not ckpt.is_absolute() and args.out:
        ckpt = out_dir / ckpt.name
    resume = args.resume or cfg.paths.resume
    state = None
    with T.default_dtype(dtype):
        if resume:
            params, state = checkpoint.load(resume, dtype=dtype)
            print(f"resuming from {resume} at step {state.step}")
        else:
            params = build(cfg.model, seed=cfg.train.seed, zero_output_proj=cfg.run.zero_output_proj)
        data = make_dataset(cfg.train, cfg.model.in_channels, cfg.paths.data_dir or None)
        try:
            result = train_loop(
                params,
                cfg.train,
                data,
                state,
                save=lambda p, s: checkpoint.save(ckpt, p, s),
                log_path=out_dir / "metrics.csv",
            )
        except TrainingError as exc:
            print(f"training aborted: {exc}", file=sys.stderr)
            return 1
    if result.rows:
        from .plotting import training_figure

        training_figure(result.rows, out_dir / "training.png")
    summary = result.summary()
    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["key", "value"])
        for k, v in summary.items():
            w.writerow([k, repr(v)])
    print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items()))
    print(f"checkpoint: {ckpt}")
    return 0


def _restorer(ckpt, tile: int, overlap: int):
    """A numpy -> numpy restore function, or ``None`` for the identity baseline."""
    if ckpt in (None, "", "none", "-"):
        return None, 1
    params, _ = checkpoint.load(ckpt)
    model = Model(params)
    minimum = params.config.min_extent

    def restore(img):
        if tile:
            return tiled_inference(model.restore, img, tile, overlap, min_tile=minimum)
        return model.restore(img)

    return restore, minimum


def cmd_eval(args) -> int:
    root = Path(args.input_dir)
    clean_dir = Path(args.clean_dir) if args.clean_dir else root / "clean"
    degraded_dir = Path(args.degraded_dir) if args.degraded_dir else root / "degraded"
    for d in (clean_dir, degraded_dir):
        if not d.is_dir():
            raise UsageError(f"missing directory {d}")
    clean_files = {p.name for p in clean_dir.glob("*.png")}
    degraded_files = {p.name for p in degraded_dir.glob("*.png")}
    unpaired = sorted(clean_files ^ degraded_files)
    if unpaired:
        raise UsageError(f"unpaired file: {unpaired[0]}")
    restore, _ = _restorer(args.checkpoint, args.tile, args.overlap)
    rows = []
    for name in sorted(clean_files):
        clean = read_png(clean_dir / name)
        degraded = read_png(degraded_dir / name)
        if clean.shape != degraded.shape:
            raise UsageError(f"size mismatch for {name}: {clean.shape} vs {degraded.shape}")
        out = degraded if restore is None else np.clip(restore(degraded.astype(np.float32)).astype(np.float64), 0, 1)
        # compare on the 8-bit grid the outputs are stored on
        out = np.round(out * 255.0) / 255.0
        a, b = (rgb_to_y(out), rgb_to_y(clean)) if args.y_channel and clean.shape[0] == 3 else (out, clean)
        rows.append((name, psnr(a, b), ssim(a, b), psnr(rgb_to_y(degraded), rgb_to_y(clean)) if args.y_channel and clean.shape[0] == 3 else psnr(degraded, clean)))
    for name, p, s, _ in rows:
        print(f"{name}\tpsnr={_fmt(p)}\tssim={s:.4f}")
    if rows:
        mean_p = float(np.mean([r[1] for r in rows]))
        mean_s = float(np.mean([r[2] for r in rows]))
        print(f"mean\tpsnr={_fmt(mean_p)}\tssim={mean_s:.4f}")
    if args.out:
        out = Path(args.out)
        with open(out, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["name", "psnr", "ssim"])
            for name, p, s, _ in rows:
                w.writerow([name, repr(p), repr(s)])
            if rows:
                w.writerow(["mean", repr(mean_p), repr(mean_s)])
        from .plotting import eval_figure

        eval_figure([r[0] for r in rows], [r[3] for r in rows], [r[1] for r in rows] if restore else None, out.with_suffix(".png"))
    return 0


def cmd_infer(args) -> int:
    img = read_png(args.input)
    restore, minimum = _restorer(args.checkpoint, 0, 0)
    if restore is None:
        raise UsageError("infer needs a checkpoint")
    H, W = img.shape[1:]
    if args.tile:
        if args.tile < minimum:
            raise UsageError(f"tile {args.tile} below model minimum {minimum}")
        n = count_tiles(H, W, args.tile, args.overlap)
        print(f"tiles: {n} ({args.tile}px, overlap {args.overlap}) for {H}x{W}")
        out = tiled_inference(restore, img.astype(np.float32), args.tile, args.overlap, min_tile=minimum)
    else:
        if min(H, W) < minimum:
            raise UsageError(f"image {H}x{W} below model minimum {minimum}; use --tile")
        print(f"tiles: 1 (whole image) for {H}x{W}")
        out = restore(img.astype(np.float32))
    write_png(args.output, out)
    print(f"wrote {args.output}")
    return 0


# -- parser -----------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uformer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="key = value config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--deterministic", action="store_true")
        sp.add_argument("--f64", action="store_true")

    sp = sub.add_parser("count", help="parameter / MAC report")
    common(sp, config_required=True)
    sp.add_argument("--resolution", type=int, default=256)
    sp.add_argument("--out", help="CSV path; a PNG figure is written alongside")
    sp.set_defaults(func=cmd_count)

    sp = sub.add_parser("gradcheck", help="finite-difference adjoint suite")
    common(sp)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("build", help="write an initial checkpoint")
    common(sp)
    sp.add_argument("--zero-output", action="store_true", help="zero the output projection (identity model)")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_build)

    sp = sub.add_parser("train", help="desk-scale training run")
    common(sp, config_required=True)
    sp.add_argument("--out", help="output directory for checkpoint, metrics.csv, training.png")
    sp.add_argument("--resume")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="PSNR/SSIM over paired clean/degraded PNG trees")
    common(sp)
    sp.add_argument("checkpoint", help="checkpoint path, or 'none' to score the degraded inputs")
    sp.add_argument("input_dir", help="directory holding clean/ and degraded/")
    sp.add_argument("--clean-dir")
    sp.add_argument("--degraded-dir")
    sp.add_argument("--y-channel", action="store_true")
    sp.add_argument("--tile", type=int, default=0)
    sp.add_argument("--overlap", type=int, default=0)
    sp.add_argument("--out", help="CSV path; a PNG figure is written alongside")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="restore one PNG")
    common(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--tile", type=int, default=0)
    sp.add_argument("--overlap", type=int, default=0)
    sp.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        with _threads(getattr(args, "deterministic", False)):
            return args.func(args)
    except (ConfigError, UsageError, FormatError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
