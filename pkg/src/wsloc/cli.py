"""Command-line entry point: ``wsloc <subcommand> ...``.

Experiment settings come from a flat ``key = value`` config file (``--config``),
optionally overridden with ``--set key=value``. Relative output paths are
placed under ``$WSLOC_OUTPUT_ROOT`` when it is set.

Exit status is 0 on full success, 1 on a runtime failure and 2 on bad
usage or configuration.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness as hx
from .dataset import format_manifest
from .model import load_model
from .qrs import pan_tompkins
from .signal_io import SignalFormatError, list_records, read_record, write_record
from .synth import generate

log = logging.getLogger("wsloc")


def _out_path(path) -> Path:
    p = Path(path)
    root = os.environ.get(hx.OUTPUT_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


def _config(args) -> hx.ExperimentConfig:
    mapping = {}
    if args.config:
        mapping = hx.load_config(args.config).to_mapping()
    for item in args.set or []:
        if "=" not in item:
            raise hx.ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        mapping[k.strip()] = v.strip()
    return hx.ExperimentConfig.from_mapping(mapping)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_fetch(args):
    path = hx.fetch_dataset(args.url, args.sha256, _out_path(args.dest), args.name)
    print(path)


def cmd_ingest(args):
    stems = list_records(args.path)
    out = _out_path(args.out) if args.out else None
    for stem in stems:
        record, beats, rhythm = read_record(stem, args.annotator)
        beat_counts = Counter(beats.codes) if beats is not None else {}
        rhythm_counts = Counter(rhythm.codes) if rhythm is not None else {}
        print(f"{record.record_id}\trate={record.sampling_rate:g}\tsamples={record.n}"
              f"\tchannels={record.channel_count}"
              f"\tbeats={dict(sorted(beat_counts.items()))}\trhythm={dict(sorted(rhythm_counts.items()))}"
              + ("\tgain defaulted" if record.gain_defaulted else ""))
        if out is not None:
            write_record(out, record, beats, rhythm, args.format)


def cmd_segment(args):
    cfg = _config(args)
    segments = hx.build_segments(cfg)
    counts = Counter(s.combination for s in segments)
    text = format_manifest(segments)
    if args.out:
        path = _out_path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    multi = sum(s.multi_label for s in segments)
    print(f"segments={len(segments)} single={len(segments) - multi} multiple={multi}")
    for combo, c in sorted(counts.items()):
        print(f"{combo}\t{c}")


def cmd_synth(args):
    cfg = _config(args)
    out = _out_path(args.out)
    for i in range(cfg.synth_records):
        record, beats, rhythm = generate(cfg.synth_spec(i))
        stem = write_record(out, record, beats, rhythm, args.format)
        print(stem)


def _print_report(report):
    path = report.output_dir / "report.txt" if report.output_dir else None
    if path is not None and path.exists():
        sys.stdout.write(path.read_text())
        print(f"outputs: {report.output_dir}")


def cmd_train(args):
    cfg = _config(args)
    if args.folds:
        cfg = replace(cfg, folds_to_run=hx._ints(args.folds))
    _print_report(hx.run_experiment(cfg))


def cmd_eval(args):
    cfg = _config(args)
    if args.folds:
        cfg = replace(cfg, folds_to_run=hx._ints(args.folds))
    _print_report(hx.run_experiment(cfg, train_missing=False))


def cmd_sweep(args):
    cfg = _config(args)
    header, rows, _ = hx.sweep(cfg, args.axis)
    widths = [max(len(r[i]) for r in [header] + rows) + 2 for i in range(len(header))]
    for r in [header] + rows:
        print("".join(c.rjust(w) for c, w in zip(r, widths)))


def cmd_export_map(args):
    model = load_model(args.model)
    record, beats, rhythm = read_record(args.record, args.annotator)
    fs = record.sampling_rate
    lo = int(round(args.start * fs))
    hi = record.n if args.seconds is None else min(record.n, lo + int(round(args.seconds * fs)))
    if not 0 <= lo < hi:
        raise hx.ConfigError("empty export window")
    x = record.physical(args.channel)[lo:hi]
    peaks = truth = None
    if beats is not None:
        pos = np.asarray(beats.samples)
        sel = (pos >= lo) & (pos < hi)
        peaks = (pos[sel] - lo).tolist()
    elif args.detect_peaks:
        peaks = pan_tompkins(x, fs).tolist()
    if rhythm is not None:
        truth = list(rhythm.per_sample(record.n)[lo:hi])
    elif beats is not None:
        truth = [""] * (hi - lo)
        for p, c in zip(beats.samples, beats.codes):
            if lo <= p < hi:
                truth[p - lo] = c
    path = hx.export_local_map(model, x, _out_path(args.out), args.format, truth, peaks, fs)
    print(path)


def cmd_qrs(args):
    record, _, _ = read_record(args.record, None)
    peaks = pan_tompkins(record.physical(args.channel), record.sampling_rate)
    text = "sample_index\n" + "".join(f"{int(p)}\n" for p in peaks)
    if args.out:
        path = _out_path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_config(p):
    p.add_argument("--config", help="experiment config file (key = value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wsloc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", help="download a file and keep it only if its SHA-256 matches")
    p.add_argument("url")
    p.add_argument("--sha256", required=True, help="expected hex digest")
    p.add_argument("--dest", default="data", help="destination directory")
    p.add_argument("--name", help="file name (default: last URL component)")
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("ingest", help="read records, print a summary, optionally convert them")
    p.add_argument("path", help="record stem, .hea/.csv file, or directory")
    p.add_argument("--annotator", default="atr", help="annotation file extension")
    p.add_argument("--out", help="write converted records to this directory")
    p.add_argument("--format", choices=("212", "csv"), default="212", help="output storage format")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("segment", help="extract segments and print label-combination counts")
    _add_config(p)
    p.add_argument("--out", help="write the segment manifest here")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("synth", help="write synthetic records described by the config")
    _add_config(p)
    p.add_argument("--out", default="synth", help="output directory")
    p.add_argument("--format", choices=("212", "csv"), default="212")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="cross-validated training and evaluation")
    _add_config(p)
    p.add_argument("--folds", help="comma-separated fold indices (default: all)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate previously trained fold models")
    _add_config(p)
    p.add_argument("--folds", help="comma-separated fold indices (default: all)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="one experiment per value along an axis")
    _add_config(p)
    p.add_argument("--axis", choices=hx.SWEEP_AXES, required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-map", help="write a local prediction map as csv, svg or png")
    p.add_argument("--model", required=True, help="saved model file")
    p.add_argument("--record", required=True, help="record stem or file")
    p.add_argument("--annotator", default="atr")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--start", type=float, default=0.0, help="window start (s)")
    p.add_argument("--seconds", type=float, help="window length (s); default to end of record")
    p.add_argument("--detect-peaks", action="store_true",
                   help="mark Pan-Tompkins peaks when the record has no beat annotation")
    p.add_argument("--format", choices=("csv", "svg", "png"), default="csv")
    p.add_argument("--out", required=True, help="output file")
    p.set_defaults(func=cmd_export_map)

    p = sub.add_parser("qrs", help="detect R peaks and write sample_index lines")
    p.add_argument("--record", required=True, help="record stem or file")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(func=cmd_qrs)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (hx.ConfigError, ValueError, SignalFormatError) as exc:
        print(f"wsloc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError) as exc:
        print(f"wsloc {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
