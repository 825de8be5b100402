"""Command line entry point: ``canfuse <subcommand> [flags]``.

Every subcommand prints a JSON summary on stdout. Failures print one JSON
error record on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import canlog, sync, videostream
from .dataset import Dataset, atomic_write_bytes, load_dataset, save_dataset
from .errors import CanFuseError, InvalidConfig, UnknownSubcommand, VariantMismatch
from .experiment import ExperimentConfig, compare, evaluate, train, write_report
from .fusionmodel import load_model, save_model
from .synthetic import IMAGE_SHAPE, SPEED_GAIN, generate_synthetic, write_raw_recording

SUBCOMMANDS = ("decode", "frames", "sync", "synth", "build-dataset", "train", "eval", "compare")

# exit statuses
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() owns the exit path."""

    def error(self, message):
        raise UsageError(message, self)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _group_map(text: str | None) -> dict[int, int] | None:
    """``1:1,2:1,3:2`` maps segment ids onto recording groups."""
    if not text:
        return None
    out = {}
    for item in text.split(","):
        seg, _, grp = item.partition(":")
        try:
            out[int(seg)] = int(grp)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad group map entry {item!r}") from None
    return out


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _variant(args) -> str:
    return "vision_only" if args.no_can else "fused"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_decode(args) -> int:
    signals = tuple(s.strip() for s in args.signals.split(",") if s.strip())
    with open(args.input, encoding="utf-8") as fh:
        rows = canlog.decode(fh, signals=signals, tick_ms=args.tick_ms,
                             t_start=args.t_start, t_end=args.t_end)
    report = canlog.validate_rows(rows, args.power_tol)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        canlog.write_rows_csv(fh, rows)
    _emit({"rows": len(rows), "power_check_passed": report.passed,
           "max_power_residual_kw": report.max_residual, "out": str(args.out)})
    return 0


def cmd_frames(args) -> int:
    with open(args.manifest, encoding="utf-8") as fh:
        records = videostream.load_manifest(fh)
    unified = videostream.concatenate_segments(records, args.gap_ms)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        videostream.write_manifest(fh, unified)
    segments = sorted({r.segment_id for r in unified})
    _emit({"frames": len(unified), "segments": len(segments),
           "span_ms": unified[-1].timestamp_ms - unified[0].timestamp_ms if unified else 0.0,
           "out": str(args.out)})
    return 0


def _load_frames(records, frames_dir, shape=IMAGE_SHAPE):
    h, w, _ = shape
    out = []
    for rec in records:
        img = videostream.load_image(Path(frames_dir) / rec.path)
        if (img.height, img.width) != (h, w):
            img = videostream.resize_bilinear(img, h, w)
        out.append((rec, img))
    return out


def _sync_to_dataset(rows, records, frames_dir, args) -> tuple[Dataset, dict]:
    rows = sync.downsample(rows, args.factor)
    frames = _load_frames(records, frames_dir)
    samples, groups = sync.synchronize(frames, rows, _group_map(args.group_map), tol_ms=args.tol_ms,
                                       eps=args.eps, min_run=args.min_run,
                                       delta_thresh=args.delta_thresh, window_ms=args.window_ms)
    if not samples:
        raise InvalidConfig("no frame matched a CAN row within tolerance")
    ds = Dataset.from_samples(samples)
    report = {
        "offset_ms": groups[0].offset_ms,
        "group_offsets_ms": {str(g.group_id): g.offset_ms for g in groups},
        "matched": sum(g.matched for g in groups),
        "dropped": sum(g.dropped for g in groups),
        "groups": {str(k): v for k, v in ds.groups().items()},
    }
    return ds, report


def cmd_sync(args) -> int:
    with open(args.rows, encoding="utf-8") as fh:
        rows = canlog.read_rows_csv(fh)
    with open(args.frames, encoding="utf-8") as fh:
        records = videostream.load_manifest(fh)
    ds, report = _sync_to_dataset(rows, records, args.frames_dir, args)
    save_dataset(args.out, ds)
    report["out"] = str(args.out)
    if args.report:
        atomic_write_bytes(args.report, (json.dumps(report, indent=2, sort_keys=True) + "\n").encode())
    _emit(report)
    return 0


def cmd_build_dataset(args) -> int:
    """decode, frames and sync in one pass over a raw recording directory."""
    raw = Path(args.raw)
    signals = canlog.DEFAULT_SIGNALS
    with open(raw / "can.csv", encoding="utf-8") as fh:
        rows = canlog.decode(fh, signals=signals, tick_ms=args.tick_ms)
    with open(raw / "manifest.csv", encoding="utf-8") as fh:
        records = videostream.concatenate_segments(videostream.load_manifest(fh), args.gap_ms)
    ds, report = _sync_to_dataset(rows, records, raw / "frames", args)
    save_dataset(args.out, ds)
    report["out"] = str(args.out)
    _emit(report)
    return 0


def cmd_synth(args) -> int:
    if args.raw:
        info = write_raw_recording(args.raw, seed=args.seed)
        _emit({"raw": str(args.raw), "segments": info["segments"],
               "true_offsets_ms": {str(k): v for k, v in info["true_offsets_ms"].items()}})
        return 0
    if not args.out:
        raise UsageError("synth needs --out (or --raw)", None)
    ds = generate_synthetic(args.seed, n_per_group=args.n, groups=args.groups, speed_gain=args.speed_gain)
    save_dataset(args.out, ds)
    _emit({"samples": len(ds), "groups": {str(k): v for k, v in ds.groups().items()}, "out": str(args.out)})
    return 0


def _experiment_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig(seed=args.seed, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                           val_groups=args.val_groups, dataset=str(args.dataset))
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _experiment_config(args)
    ds = load_dataset(args.dataset)
    res = train(cfg, ds, _variant(args))
    save_model(args.out, res.model, res.optimizer)
    if args.history:
        atomic_write_bytes(args.history, (json.dumps(res.history, indent=2) + "\n").encode())
    _emit({"variant": _variant(args), "best_epoch": res.best_epoch,
           "val_rmse": res.history[res.best_epoch - 1]["val_rmse"], "out": str(args.out)})
    return 0


def cmd_eval(args) -> int:
    model, _ = load_model(args.model)
    if args.no_can or args.with_can:
        if _variant(args) != model.config.variant:
            raise VariantMismatch(f"model is {model.config.variant}, flags ask for {_variant(args)}")
    ds = load_dataset(args.dataset)
    if args.groups:
        ds = ds.subset(np.isin(ds.group_ids, args.groups))
    _emit({"variant": model.config.variant, "samples": len(ds), "rmse": evaluate(model, ds)})
    return 0


def cmd_compare(args) -> int:
    cfg = _experiment_config(args)
    ds = load_dataset(args.dataset)
    report = compare(cfg, ds)
    out = Path(args.out)
    if out.suffix != ".json":
        out = out / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, report)
    figures = []
    if not args.no_figures:
        from .plotting import write_figures
        figures = [str(p) for p in write_figures(report, out.parent)]
    summary = {k: v for k, v in report.to_dict().items() if k != "history"}
    summary.update({"report": str(out), "figures": figures})
    _emit(summary)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_sync_flags(p) -> None:
    p.add_argument("--factor", type=int, default=sync.DEFAULT_FACTOR, help="CAN rows per block mean")
    p.add_argument("--tol-ms", type=float, default=sync.DEFAULT_TOL_MS, help="join tolerance")
    p.add_argument("--eps", type=float, default=1e-6, help="speed at or below this counts as stopped")
    p.add_argument("--min-run", type=int, default=5, help="shortest landmark run")
    p.add_argument("--delta-thresh", type=float, default=1e-3, help="mean abs pixel change for a still frame")
    p.add_argument("--window-ms", type=float, default=5000.0, help="CAN search margin around each group")
    p.add_argument("--group-map", default=None, help="segment:group pairs, e.g. 1:1,2:1,3:2")


def _add_train_flags(p) -> None:
    p.add_argument("--dataset", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--val-groups", type=_int_list, default=(5,))


def _add_variant_flags(p) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--no-can", action="store_true", help="vision-only model")
    g.add_argument("--with-can", action="store_true", help="vision plus CAN features (default)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="canfuse", description="CAN bus and camera fusion for steering prediction.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("decode", help="CAN log to fixed-tick feature rows")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--signals", default=",".join(canlog.DEFAULT_SIGNALS))
    p.add_argument("--tick-ms", type=float, default=1.0)
    p.add_argument("--t-start", type=float, default=None)
    p.add_argument("--t-end", type=float, default=None)
    p.add_argument("--power-tol", type=float, default=0.01, help="kW tolerance for the power check")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("frames", help="concatenate segments onto one video clock")
    p.add_argument("--manifest", required=True)
    p.add_argument("--gap-ms", type=float, default=videostream.SAVE_GAP_MS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_frames)

    p = sub.add_parser("sync", help="align and join rows with frames into a dataset")
    p.add_argument("--rows", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--frames-dir", required=True)
    _add_sync_flags(p)
    p.add_argument("--report", default=None, help="also write the side report here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sync)

    p = sub.add_parser("build-dataset", help="decode, frames and sync from a raw recording directory")
    p.add_argument("--raw", required=True, help="directory with can.csv, manifest.csv and frames/")
    p.add_argument("--tick-ms", type=float, default=1.0)
    p.add_argument("--gap-ms", type=float, default=videostream.SAVE_GAP_MS)
    _add_sync_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("synth", help="generate a synthetic dataset or raw recording")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=200, help="samples per group")
    p.add_argument("--groups", type=int, default=5)
    p.add_argument("--speed-gain", type=float, default=SPEED_GAIN, help="weight of the CAN-only label term")
    p.add_argument("--raw", default=None, help="write a raw recording directory instead")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one variant")
    _add_train_flags(p)
    _add_variant_flags(p)
    p.add_argument("--history", default=None, help="write per-epoch history JSON here")
    p.add_argument("--out", required=True, help="model checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="RMSE of a saved model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--groups", type=_int_list, default=None, help="restrict to these group ids")
    _add_variant_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train both variants and report the RMSE decrease")
    _add_train_flags(p)
    p.add_argument("--out", default="report.json", help="report path or directory")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_compare)
    return parser


def _fail(record: dict, status: int, usage: str | None = None) -> int:
    if usage:
        sys.stderr.write(usage)
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
    return status


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if argv and not argv[0].startswith("-") and argv[0] not in SUBCOMMANDS:
        err = UnknownSubcommand(f"unknown subcommand {argv[0]!r}", choices=list(SUBCOMMANDS))
        return _fail(err.to_dict(), EXIT_USAGE, parser.format_usage())
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        message, sub_parser = exc.args
        return _fail({"error": "UsageError", "message": message}, EXIT_USAGE,
                     (sub_parser or parser).format_usage())
    if args.command is None:
        return _fail({"error": "UsageError", "message": "a subcommand is required"}, EXIT_USAGE,
                     parser.format_usage())
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail({"error": "UsageError", "message": exc.args[0]}, EXIT_USAGE, parser.format_usage())
    except CanFuseError as exc:
        return _fail(exc.to_dict(), EXIT_FAILURE)
    except (OSError, ValueError) as exc:
        return _fail({"error": type(exc).__name__, "message": str(exc)}, EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
