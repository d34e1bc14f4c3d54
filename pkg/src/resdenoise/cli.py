"""Command-line entry point: synth, train, denoise, eval, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .engine import NumericalError, TrainConfig, denoise_file, evaluate, train, write_metrics_csv
from .model import ModelConfig
from .report import ReportError, report
from .tensor_core import ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("resdenoise")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text):
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = data.PhantomConfig(family=args.family, height=args.height, width=args.width, speckle=args.speckle)
    records = data.generate_phantoms(cfg, args.count, seed=args.seed)
    if args.family == data.POSTERIOR and args.count >= 3:
        split = data.split_dataset(records, rng=args.seed)
        assign = {i: s for s in data.SPLITS for i in split.ids(s)}
    else:
        # anterior-like scans are held out for cross-domain testing only
        assign = {r.id: "test" for r in records}
    entries = []
    for rec in records:
        path = out / f"{rec.id}.png"
        data.save_image(path, rec)
        entries.append(data.ManifestEntry(rec.id, path, assign[rec.id], rec.source))
    data.write_manifest(out / "manifest.tsv", entries)
    print(f"wrote {len(records)} {args.family} phantoms and {out / 'manifest.tsv'}")


def cmd_train(args):
    entries = data.read_manifest(args.manifest)
    mcfg = ModelConfig(args.height, args.width, args.depth, args.channels or _default_channels(args.depth),
                       seed=args.seed)
    noise = data.NoiseConfig(args.sigma_min, args.sigma_max, seed=args.seed)
    cfg = TrainConfig(
        epochs=args.epochs, learning_rate=args.lr, alpha=args.alpha, batch_size=args.batch, seed=args.seed,
        model=mcfg, noise=noise, augment=None if args.no_augment else data.AugmentConfig(seed=args.seed),
    )
    dims = (args.height, args.width)
    split = data.split_from_manifest(entries)
    records = data.load_manifest_records([e for e in entries if e.split in ("train", "val")], dims)
    ckpt, history = train(split, records, cfg)
    save_checkpoint(ckpt, args.out)
    print(f"saved {args.out} (best epoch {history.best_epoch + 1}, val loss {min(history.val_loss):.6f})")


def _default_channels(depth):
    return tuple(32 * 2 ** k for k in range(depth))


def cmd_denoise(args):
    ckpt = load_checkpoint(args.ckpt)
    result = denoise_file(ckpt, args.inp, args.out, args.reference)
    if result is not None:
        print(f"PSNR (norm ratio) {result['psnr_paper']:.3f} dB")
        print(f"PSNR (peak)       {result['psnr_standard']:.3f} dB")


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    entries = data.read_manifest(args.manifest)
    cfg = ckpt.model_config
    records = data.load_manifest_records(entries, (cfg.input_height, cfg.input_width), split=args.split)
    if not records:
        raise data.ManifestError(f"{args.manifest}: no records in split {args.split!r}")
    noise = data.NoiseConfig(args.sigma_min, args.sigma_max, seed=args.seed)
    result = evaluate(ckpt, records, noise, seed=args.seed)
    write_metrics_csv(result.rows, args.out)
    for source, agg in result.aggregates.items():
        print(f"{source}: PSNR {agg['psnr_std_noisy']['mean']:.3f} -> {agg['psnr_std_denoised']['mean']:.3f} dB, "
              f"SSIM {agg['ssim_noisy']['mean']:.3f} -> {agg['ssim_denoised']['mean']:.3f}")


def cmd_report(args):
    report(args.inp, args.out, args.format)


def build_parser():
    p = _Parser(prog="resdenoise", description="Residual U-Net denoising for OCT-like images")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic OCT-like phantoms and a manifest")
    s.add_argument("--family", choices=[data.POSTERIOR, data.ANTERIOR], required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--height", type=int, default=200)
    s.add_argument("--width", type=int, default=400)
    s.add_argument("--speckle", type=float, default=0.0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a denoiser from a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--alpha", type=float, default=0.8)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--depth", type=int, default=3)
    t.add_argument("--channels", type=_int_list, default=None)
    t.add_argument("--height", type=int, default=200)
    t.add_argument("--width", type=int, default=400)
    t.add_argument("--sigma-min", type=float, default=0.02)
    t.add_argument("--sigma-max", type=float, default=0.5)
    t.add_argument("--no-augment", action="store_true")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("denoise", help="denoise one image file")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--reference")
    d.set_defaults(func=cmd_denoise)

    e = sub.add_parser("eval", help="write per-image PSNR/SSIM for one manifest split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", choices=["val", "test"], required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--sigma-min", type=float, default=0.02)
    e.add_argument("--sigma-max", type=float, default=0.5)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="summarise a metrics CSV for box plots")
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--format", choices=["csv", "json"], default="csv")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (data.ImageFormatError, data.ManifestError, CheckpointError, ReportError, ShapeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
