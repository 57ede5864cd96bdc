"""Command-line entry point: ``mcstra <command> [flags]``.

Exit status is 0 on success, 1 on runtime failure and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .data import PhantomSpec, build_dataset, nmse, psnr, ssim
from .fourier import (
    INFINITE,
    SamplingMask,
    add_complex_noise,
    apply_mask,
    equispaced_line_mask,
    fft2c,
    ifft2c,
    psf_of_mask,
    random_line_mask,
)
from .io import atomic_write, read_cras, read_dataset, read_mask, write_cras, write_dataset, write_mask, write_pgm
from .model import ABLATIONS, McstraConfig
from .validation import ShapeError

log = logging.getLogger("mcstra")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# argument types


def _positive(kind):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return parse


def _accel(text):
    v = _positive(float)(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"acceleration must be >= 1, got {text}")
    return v


def _fraction(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"must be in (0, 1], got {text}")
    return v


def _snr(text):
    if text.lower() in ("inf", "infinite", "none"):
        return INFINITE
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected dB value or 'inf', got {text!r}") from None


def _tags(text):
    tags = [t.strip().upper() for t in text.split(",") if t.strip()]
    bad = [t for t in tags if t not in ABLATIONS]
    if not tags or bad:
        raise argparse.ArgumentTypeError(f"tags must be a comma list from {','.join(ABLATIONS)}, got {text!r}")
    return tags


# --------------------------------------------------------------------------
# helpers


def _make_mask(args) -> SamplingMask:
    if args.kind == "random":
        return random_line_mask(args.width, args.accel, args.center_frac, args.seed)
    if not float(args.accel).is_integer():
        raise UsageError(f"equispaced masks need an integer acceleration, got {args.accel}")
    return equispaced_line_mask(args.width, int(args.accel), args.center_frac, args.offset)


def _load_config(path) -> McstraConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: config file not found")
    try:
        return McstraConfig.from_text(path.read_text())
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None


def _config_for_checkpoint(ckpt: Path, explicit) -> McstraConfig:
    if explicit:
        return _load_config(explicit)
    sidecar = ckpt.with_suffix(".cfg")
    if not sidecar.exists():
        raise FileNotFoundError(f"{sidecar}: no config next to checkpoint {ckpt}; pass --config")
    return _load_config(sidecar)


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    return path


def _write_csv(path, rows: list[dict]) -> None:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    atomic_write(path, buf.getvalue().encode())


def _dataset_for(args, cfg: McstraConfig):
    kw = dict(seed=args.seed, mask_kind=cfg.mask_kind, accel=cfg.accel, center_frac=cfg.center_frac,
              fixed_masks=cfg.fixed_masks)
    if getattr(args, "dataset", None):
        ds = read_dataset(_require(args.dataset), **kw)
    else:
        ds = build_dataset(12, 4, cfg.height, cfg.width, 0.8, **kw)
    if ds.shape != (cfg.height, cfg.width):
        raise ShapeError(f"dataset rasters are {ds.shape[0]}x{ds.shape[1]}, config expects "
                         f"{cfg.height}x{cfg.width}")
    return ds


# --------------------------------------------------------------------------
# commands


def cmd_mask(args) -> int:
    m = _make_mask(args)
    write_mask(args.out, m)
    print(f"{args.out}: {m.n_sampled}/{m.width} lines, center {m.center_count}")
    return 0


def cmd_psf(args) -> int:
    m = read_mask(_require(args.mask)) if args.mask else _make_mask(args)
    h = args.height or m.width
    psf = np.abs(psf_of_mask(m, h))
    if args.out:
        write_pgm(args.out, psf)
    if args.panels:
        # mask, PSF and the aliased phantom, one file per panel
        d = Path(args.panels)
        phantom = PhantomSpec.shepp_logan().render(h, m.width)
        write_pgm(d / "mask.pgm", m.to_2d(h), 1.0)
        write_pgm(d / "psf.pgm", psf)
        write_pgm(d / "aliased.pgm", np.abs(ifft2c(apply_mask(fft2c(phantom), m))), 1.0)
    if not (args.out or args.panels):
        raise UsageError("psf needs --out and/or --panels")
    print(f"psf peak {psf.max():.6f} at {np.unravel_index(np.argmax(psf), psf.shape)}")
    return 0


def cmd_undersample(args) -> int:
    img = read_cras(_require(args.input)).astype(np.complex128)
    m = read_mask(_require(args.mask))
    if m.width != img.shape[1]:
        raise ShapeError(f"{args.mask}: mask width {m.width} does not match {args.input} width {img.shape[1]}")
    y = apply_mask(fft2c(img), m)
    y = add_complex_noise(y, args.snr, args.seed, mask=m)
    write_cras(args.out, y)
    zf = np.abs(ifft2c(y))
    if args.zf_out:
        write_pgm(args.zf_out, zf, float(np.abs(img).max()) or None)
    return 0


def cmd_dataset(args) -> int:
    ds = build_dataset(args.volumes, args.slices, args.size, args.size, args.split_frac, args.seed)
    manifest = write_dataset(args.out, ds)
    print(f"{manifest}: {len(ds)} records, {len(ds.volume_ids)} volumes")
    return 0


def cmd_train(args) -> int:
    from .training import checkpoint_save, train

    cfg = _load_config(args.config) if args.config else McstraConfig.toy()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    args.seed = cfg.seed
    ds = _dataset_for(args, cfg)
    params, tlog, state = train(cfg, ds, epochs=args.epochs, max_steps=args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint_save(params, state, out / "model.mckp")
    atomic_write(out / "model.cfg", cfg.to_text().encode())
    tlog.write_csv(out / "train_log.csv")
    val = tlog.val_rows()
    tail = f", val nmse {val[-1]['nmse']:.4f}" if val else ""
    print(f"{out / 'model.mckp'}: {state.step} steps{tail}")
    return 0


def cmd_reconstruct(args) -> int:
    from .estimator import masks_from_kspace
    from .model import mcstra_forward
    from .training import checkpoint_load

    ckpt = _require(args.checkpoint)
    cfg = _config_for_checkpoint(ckpt, args.config)
    y = read_cras(_require(args.input)).astype(np.complex128)
    if y.shape != (cfg.height, cfg.width):
        raise ShapeError(f"{args.input}: input is {y.shape[0]}x{y.shape[1]} but {ckpt} was trained at "
                         f"{cfg.height}x{cfg.width}; the model has a fixed input size")
    params, _ = checkpoint_load(ckpt, cfg)
    m = read_mask(_require(args.mask)) if args.mask else masks_from_kspace(y)[None]
    y_full = None
    ref = None
    if args.reference:
        ref = read_cras(_require(args.reference)).astype(np.complex128)
        if ref.shape != y.shape:
            raise ShapeError(f"{args.reference}: reference shape {ref.shape} differs from input {y.shape}")
        y_full = fft2c(ref)[None]
    out, _ = mcstra_forward(y[None], [m] if isinstance(m, SamplingMask) else m, cfg, params, y_full)
    img = out[0]
    peak = float(np.abs(ref).max()) if ref is not None else None
    write_pgm(args.out, np.clip(img, 0, None), peak)
    if ref is not None:
        r = np.abs(ref)
        print(f"nmse {nmse(img, r):.6f} psnr {psnr(img, r):.3f} ssim {ssim(img, r):.4f}")
    return 0


def cmd_eval(args) -> int:
    from .training import checkpoint_load, evaluate

    if args.checkpoint:
        ckpt = _require(args.checkpoint)
        cfg = _config_for_checkpoint(ckpt, args.config)
        params, _ = checkpoint_load(ckpt, cfg)
    else:
        cfg = _load_config(args.config) if args.config else McstraConfig.toy()
        params = None
    ds = _dataset_for(args, cfg)
    rep = evaluate(params, cfg, ds, args.protocol, seed=args.seed)
    atomic_write(args.out, rep.to_csv().encode())
    out = Path(args.out)
    summary = out.with_name(out.stem + "_summary.csv")
    atomic_write(summary, rep.summary_csv().encode())
    print(f"{out}: {len(rep.rows)} rows; {summary}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import MODEL_TOLERANCE, model_check, run_op_suite

    results = {f"op:{k}": (v, args.threshold) for k, v in run_op_suite(args.seed).items()}
    if args.model:
        cfg = _load_config(args.config) if args.config else McstraConfig.toy()
        cfg = cfg.replace(height=16, width=16)
        for k, v in model_check(cfg, seed=args.seed).items():
            results[f"model:{k}"] = (v, MODEL_TOLERANCE)
    failed = 0
    for name, (err, tol) in results.items():
        ok = err < tol
        failed += not ok
        print(f"{name:28s} {err:.3e} {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    from .training import train, validation_report

    cfg = _load_config(args.config) if args.config else McstraConfig.toy()
    args.seed = cfg.seed if args.seed is None else args.seed
    ds = _dataset_for(args, cfg)
    rows = []
    for tag in args.tags:
        c = cfg.replace(ablation=tag, seed=args.seed)
        params, tlog, _ = train(c, ds, max_steps=args.steps, validate=False)
        agg, val_loss = validation_report(params, c, ds)
        losses = tlog.train_losses
        metrics = {"nmse": float(np.mean(agg["nmse"])), "psnr": float(np.mean(agg["psnr"])),
                   "ssim": float(np.mean(agg["ssim"])), "first_loss": losses[0], "last_loss": losses[-1],
                   "val_loss": val_loss}
        for k, v in metrics.items():
            rows.append({"tag": tag, "metric": k, "value": v})
        print(f"{tag}: nmse {metrics['nmse']:.4f} psnr {metrics['psnr']:.2f} loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    rows.sort(key=lambda r: (r["metric"], r["tag"]))
    _write_csv(args.out, rows)
    return 0


# --------------------------------------------------------------------------
# parser


def _mask_flags(p, required_width=True):
    p.add_argument("--width", type=_positive(int), required=required_width)
    p.add_argument("--accel", type=_accel, default=4.0)
    p.add_argument("--center-frac", type=_fraction, default=0.08)
    p.add_argument("--kind", choices=("random", "equispaced"), default="random")
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcstra", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", help="write a line mask as text")
    _mask_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("psf", help="PSF magnitude (and mask / aliasing panels) as PGM")
    _mask_flags(p, required_width=False)
    p.add_argument("--height", type=_positive(int))
    p.add_argument("--mask", help="read the mask from a file instead of generating one")
    p.add_argument("--out")
    p.add_argument("--panels", help="directory for mask.pgm, psf.pgm and aliased.pgm")
    p.set_defaults(func=cmd_psf)

    p = sub.add_parser("undersample", help="mask (and optionally noise) an image raster")
    p.add_argument("--input", required=True, help="CRAS1 image")
    p.add_argument("--mask", required=True)
    p.add_argument("--snr", type=_snr, default=INFINITE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CRAS1 k-space output")
    p.add_argument("--zf-out", help="zero-filled magnitude PGM")
    p.set_defaults(func=cmd_undersample)

    p = sub.add_parser("dataset", help="write a phantom dataset directory")
    p.add_argument("--volumes", type=_positive(int), default=12)
    p.add_argument("--slices", type=_positive(int), default=4)
    p.add_argument("--size", type=_positive(int), default=64)
    p.add_argument("--split-frac", type=_fraction, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train and write model.mckp, model.cfg, train_log.csv")
    p.add_argument("--config")
    p.add_argument("--dataset", help="dataset directory (default: built-in toy phantoms)")
    p.add_argument("--epochs", type=_positive(int))
    p.add_argument("--steps", type=_positive(int))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct a magnitude PGM from undersampled k-space")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="defaults to the .cfg next to the checkpoint")
    p.add_argument("--input", required=True, help="CRAS1 undersampled k-space")
    p.add_argument("--mask", help="mask text file (default: nonzero k-space columns)")
    p.add_argument("--reference", help="CRAS1 reference image for a metric summary")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="metrics CSV for a protocol sweep")
    p.add_argument("--checkpoint", help="omit to evaluate only the zero-filled baseline")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--protocol", choices=("clean", "accel", "snr", "mask", "all"), default="clean")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--config")
    p.add_argument("--model", action="store_true", help="also check the full model on a 16x16 input")
    p.add_argument("--threshold", type=_positive(float), default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train configurations and write a comparison CSV")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--tags", type=_tags, default=list(ABLATIONS))
    p.add_argument("--steps", type=_positive(int), default=50)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mcstra {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"mcstra {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
