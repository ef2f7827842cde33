"""Experiment orchestration: config files, cross-validated runs, sweeps,
local-map export and dataset retrieval."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import urllib.error
import urllib.request
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import metrics as mt
from .aggregation import AggregationSpec, aggregate
from .model import (
    Model, ModelConfig, TrainParams, load_model, predict_beats, predict_maps, predict_record,
    save_model, train,
)
from .qrs import pan_tompkins
from .signal_io import BeatAnnotation, list_records, read_record
from .synth import SynthSpec, generate

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "WSLOC_OUTPUT_ROOT"
SWEEP_AXES = ("aggregation", "depth", "distribution")


class ConfigError(ValueError):
    pass


class ExperimentError(RuntimeError):
    def __init__(self, fold, checkpoint, cause):
        super().__init__(f"fold {fold} failed: {cause!r}; completed folds are kept under {checkpoint}")
        self.fold = fold
        self.checkpoint = checkpoint


def _ints(text):
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _strs(text):
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _pairs(text, cast=str):
    out = {}
    for item in _strs(text):
        k, _, v = item.partition(":")
        out[k.strip()] = cast(v.strip())
    return out


@dataclass
class ExperimentConfig:
    """Flat key = value experiment description. ``None`` means task default."""

    task: str = "rhythm"
    data: str = "synth"
    annotator: str = "atr"
    labels: tuple | None = None
    channel: int = 0
    window_seconds: float | None = None
    dense_stride_seconds: float = 5.0
    sparse_stride_seconds: float = 250.0
    min_rhythm_seconds: float = 3.0
    peaks: str = "annotations"
    synth_rate: float = 100.0
    synth_seconds: float = 600.0
    synth_noise: float = 0.03
    synth_classes: str = "N:bump,V:notch,S:spike"
    synth_weights: str = ""
    synth_mean_interval: float = 0.7
    synth_records: int = 1
    depth: int | None = None
    filters: int = 32
    kernel: int = 32
    dropout: float = 0.25
    head_filters: int = 32
    aggregation: str | None = None
    lse_r: float = 3.0
    folds: int = 5
    folds_to_run: tuple | None = None
    distribution: str = "Original"
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    threshold: float = 0.5
    dtype: str = "float32"
    figures: bool = True
    output_dir: str = "runs"
    seed: int = 0
    sweep_aggregation: tuple = ("GAP", "GMP", "LSE:3", "LSE:5")
    sweep_depth: tuple = (5, 6, 7, 8, 9)
    sweep_distribution: tuple = ()  # empty: every modification that applies to the task

    def __post_init__(self):
        if self.task not in ("rhythm", "beat"):
            raise ConfigError(f"task must be rhythm or beat, got {self.task!r}")
        if self.peaks not in ("annotations", "pan_tompkins"):
            raise ConfigError("peaks must be 'annotations' or 'pan_tompkins'")
        ds.get_mod(self.distribution)
        self.model_config()  # validates aggregation/depth

    # task-dependent defaults
    @property
    def label_tuple(self) -> tuple:
        if self.labels:
            return tuple(self.labels)
        return ds.LabelVocabulary.rhythm().labels if self.task == "rhythm" else ds.LabelVocabulary.beat().labels

    @property
    def window(self) -> float:
        return self.window_seconds if self.window_seconds is not None else 20.0

    def model_config(self) -> ModelConfig:
        depth = self.depth if self.depth is not None else (7 if self.task == "rhythm" else 5)
        agg = self.aggregation or ("GMP" if self.task == "rhythm" else "GMRP")
        spec = AggregationSpec.parse(agg)
        if spec.base == "LSE" and ":" not in agg and "(" not in agg:
            spec = AggregationSpec(spec.kind, self.lse_r)
        return ModelConfig(
            depth=depth, classes=len(self.label_tuple), channels=1, filters=self.filters,
            kernel=self.kernel, dropout=self.dropout, head_filters=self.head_filters,
            aggregation=spec, seed=self.seed, dtype=self.dtype, labels=self.label_tuple,
        )

    def train_params(self) -> TrainParams:
        return TrainParams(self.lr, self.beta1, self.beta2, self.patience, self.batch_size,
                           self.max_epochs, self.seed)

    def synth_spec(self, index: int = 0) -> SynthSpec:
        classes = _pairs(self.synth_classes)
        if self.task == "rhythm":
            classes = {"N": next(iter(classes.values()), "bump")}
        return SynthSpec(
            rate=self.synth_rate, seconds=self.synth_seconds, classes=classes,
            class_weights=_pairs(self.synth_weights, float) or None,
            mean_interval=self.synth_mean_interval, noise=self.synth_noise,
            rhythm_mode=self.task == "rhythm", record_id=f"synth{index}",
            seed=self.seed * 1000 + index,
        )

    # serialisation ------------------------------------------------------

    def to_mapping(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            out[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_mapping().items())

    def digest(self) -> str:
        """Hash of everything that affects results (not paths or fold selection)."""
        m = self.to_mapping()
        for k in ("output_dir", "folds_to_run", "figures", "sweep_aggregation", "sweep_depth",
                  "sweep_distribution"):
            m.pop(k, None)
        return hashlib.sha256(json.dumps(m, sort_keys=True).encode()).hexdigest()[:12]

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            default = known[key].default
            raw = str(raw).strip()
            if key in ("labels", "sweep_aggregation", "sweep_distribution"):
                kwargs[key] = _strs(raw)
            elif key in ("folds_to_run", "sweep_depth"):
                kwargs[key] = _ints(raw)
            elif key == "figures":
                kwargs[key] = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(default, bool):
                kwargs[key] = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int) or key == "depth":
                kwargs[key] = int(raw)
            elif isinstance(default, float) or key == "window_seconds":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
        return cls(**kwargs)


def parse_config(text: str) -> ExperimentConfig:
    mapping = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        mapping[k.strip()] = v.strip()
    try:
        return ExperimentConfig.from_mapping(mapping)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def resolve_output_dir(config: ExperimentConfig) -> Path:
    out = Path(config.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def load_records(config: ExperimentConfig):
    """List of (record, beats, rhythm) triples per the config's data source."""
    if config.data == "synth":
        return [generate(config.synth_spec(i)) for i in range(config.synth_records)]
    path = Path(config.data)
    if not path.exists() and not path.with_suffix(".hea").exists() and not path.with_suffix(".csv").exists():
        raise ConfigError(f"data path {config.data!r} does not exist")
    out = [read_record(stem, config.annotator) for stem in list_records(path)]
    if not out:
        raise ConfigError(f"no records found under {config.data!r}")
    return out


def build_segments(config: ExperimentConfig, records=None) -> list[ds.Segment]:
    records = records if records is not None else load_records(config)
    labels = config.label_tuple
    segs = []
    for record, beats, rhythm in records:
        detected = None
        if config.peaks == "pan_tompkins" or (config.task == "rhythm" and beats is None):
            detected = pan_tompkins(record.physical(config.channel), record.sampling_rate)
        if config.task == "rhythm":
            if rhythm is None:
                raise ConfigError(f"record {record.record_id} has no rhythm annotation")
            if beats is None:
                beats = BeatAnnotation([int(p) for p in detected], ["N"] * len(detected))
            segs += ds.extract_rhythm_segments(
                record, rhythm, config.window, config.dense_stride_seconds,
                config.sparse_stride_seconds, config.min_rhythm_seconds, beats,
                config.channel, labels,
            )
        else:
            if beats is None:
                raise ConfigError(f"record {record.record_id} has no beat annotation")
            segs += ds.extract_beat_segments(record, beats, config.window, labels, config.channel)
        if config.peaks == "pan_tompkins":
            for s in segs:
                if s.record_id == record.record_id:
                    lo, hi = np.searchsorted(detected, [s.start, s.start + s.length])
                    s.rpeaks = [int(p - s.start) for p in detected[lo:hi]]
    return segs


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def boundary_error(labels_pred: np.ndarray, change: int, left: int, right: int) -> int:
    """Distance from ``change`` to the best single step from ``left`` to ``right``.

    The step position maximises agreement with ``labels_pred``; ties go to
    the earliest position.
    """
    y = np.asarray(labels_pred)
    a = np.concatenate([[0], np.cumsum(y == left)])  # a[k]: matches of left label in [0, k)
    b = np.concatenate([np.cumsum((y == right)[::-1])[::-1], [0]])  # b[k]: matches in [k, n)
    k = int(np.argmax(a + b))
    return abs(k - change)


@dataclass
class FoldResult:
    fold: int
    confusion: mt.ConfusionMatrix
    confusion_transition: mt.ConfusionMatrix | None
    record_correct: int
    record_total: int
    empty_predictions: int
    boundary_errors: list = field(default_factory=list)  # samples
    history: list = field(default_factory=list)


def evaluate_segments(model: Model, segments, labels, threshold=0.5, fold=0) -> FoldResult:
    """Beat-level confusion, record-level set accuracy and boundary errors."""
    spec = model.config.aggregation
    maps = predict_maps(model, [s.signal for s in segments])
    cm = mt.ConfusionMatrix.zeros(labels)
    cm_tr = mt.ConfusionMatrix.zeros(labels)
    correct = empty = 0
    errors = []
    for s, D in zip(segments, maps):
        peaks = s.peaks()
        S = aggregate(D, spec, peaks if len(peaks) else None, training=False)
        pred = {labels[i] for i in predict_record(S, threshold)}
        empty += not pred
        correct += pred == set(s.label_set)
        if s.beat_events:
            positions = [p for p, _ in s.beat_events]
            ref = [lab for _, lab in s.beat_events]
            hyp = [labels[c] for _, c in predict_beats(D, positions)]
            part = mt.confusion_from_beats(ref, hyp, labels)
            cm.counts += part.counts
            if len(s.label_set) >= 2:
                cm_tr.counts += part.counts
        if s.rhythm_truth is not None and len(s.label_set) >= 2:
            truth = np.array([labels.index(v) for v in s.rhythm_truth])
            y = D.argmax(axis=1)
            for c in np.flatnonzero(truth[1:] != truth[:-1]) + 1:
                errors.append(boundary_error(y, int(c), truth[c - 1], truth[c]))
    return FoldResult(fold, cm, cm_tr, correct, len(segments), empty, errors)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    folds: list
    confusion: mt.ConfusionMatrix
    confusion_transition: mt.ConfusionMatrix | None
    record_accuracy: float
    boundary_errors_s: list
    output_dir: Path | None = None

    @property
    def median_boundary_error_s(self) -> float | None:
        return float(np.median(self.boundary_errors_s)) if self.boundary_errors_s else None

    def summary(self) -> dict:
        all_m = mt.overall_metrics(self.confusion) if self.confusion.total else None
        out = {"record_accuracy": self.record_accuracy, "beats": self.confusion.total}
        if all_m:
            out.update(se=all_m.se, ppr=all_m.ppr, acc=all_m.acc)
        if self.median_boundary_error_s is not None:
            out["median_boundary_error_s"] = self.median_boundary_error_s
        return out


def _write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for h in history:
            w.writerow([h["epoch"], f"{h['train_loss']:.6f}", f"{h['val_loss']:.6f}"])


def _read_history(path):
    with open(path) as fh:
        return [{"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
                 "val_loss": float(r["val_loss"])} for r in csv.DictReader(fh)]


def run_fold(config: ExperimentConfig, segments, split, fold: int, fold_dir: Path | None = None,
             train_missing: bool = True) -> FoldResult:
    labels = config.label_tuple
    train_set, val_set, test_set = ds.apply_distribution_mod(
        segments, split, fold, config.distribution, config.seed
    )
    done = fold_dir / "result.json" if fold_dir else None
    model_path = fold_dir / "model.wsm" if fold_dir else None
    if done is not None and done.exists() and model_path.exists():
        log.info("fold %d: reusing %s", fold, fold_dir)
        model = load_model(model_path)
        history = _read_history(fold_dir / "history.csv")
    elif not train_missing:
        raise FileNotFoundError(f"no trained model for fold {fold} under {fold_dir}")
    else:
        model = Model(replace(config.model_config(), seed=config.seed + fold))
        result = train(model, train_set, val_set, config.train_params(), labels)
        history = result.history
    res = evaluate_segments(model, test_set, labels, config.threshold, fold)
    res.history = history
    if fold_dir is not None:
        fold_dir.mkdir(parents=True, exist_ok=True)
        save_model(model, model_path)
        (fold_dir / "confusion.csv").write_text(mt.confusion_csv(res.confusion))
        if config.task == "rhythm":
            (fold_dir / "confusion_transition.csv").write_text(mt.confusion_csv(res.confusion_transition))
        _write_history(fold_dir / "history.csv", history)
        done.write_text(json.dumps({
            "fold": fold, "train": len(train_set), "val": len(val_set), "test": len(test_set),
            "record_correct": res.record_correct, "seed": config.seed,
        }))
    return res


def run_experiment(config: ExperimentConfig, write: bool = True, train_missing: bool = True) -> ExperimentReport:
    """Cross-validated train/evaluate; folds merge into one confusion matrix.

    Folds with persisted artifacts for the same config digest are reloaded
    instead of retrained. With ``train_missing=False`` a fold lacking them is
    an error.
    """
    records = load_records(config)  # fails before anything is written
    segments = build_segments(config, records)
    if len(segments) < config.folds:
        raise ConfigError(f"only {len(segments)} segments for {config.folds} folds")
    split = ds.split_folds(segments, config.folds, config.seed)
    out_dir = resolve_output_dir(config) if write else None
    run_dir = None
    if out_dir is not None:
        run_dir = out_dir / "runs" / config.digest()
        run_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(config.to_text())
        (run_dir / "config.txt").write_text(config.to_text())
        (out_dir / "segments.txt").write_text(ds.format_manifest(segments))

    folds = config.folds_to_run or tuple(range(config.folds))
    results = []
    for fold in folds:
        try:
            results.append(run_fold(config, segments, split, fold,
                                    run_dir / f"fold{fold}" if run_dir else None, train_missing))
        except Exception as exc:
            raise ExperimentError(fold, run_dir, exc) from exc

    labels = config.label_tuple
    merged = mt.merge_folds([r.confusion for r in results])
    merged_tr = mt.merge_folds([r.confusion_transition for r in results]) if config.task == "rhythm" else None
    rate = _rate(config, records)
    report = ExperimentReport(
        config, results, merged, merged_tr,
        sum(r.record_correct for r in results) / max(1, sum(r.record_total for r in results)),
        [e / rate for r in results for e in r.boundary_errors],
        out_dir,
    )
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def _rate(config, records):
    return records[0][0].sampling_rate if records else config.synth_rate


def write_report(report: ExperimentReport, out_dir: Path) -> None:
    cfg = report.config
    text = [f"# task={cfg.task} seed={cfg.seed} aggregation={cfg.model_config().aggregation} "
            f"depth={cfg.model_config().depth} distribution={cfg.distribution}"]
    if report.confusion.total:
        text.append(mt.format_report(report.confusion, "All segments"))
    if report.confusion_transition is not None and report.confusion_transition.total:
        text.append(mt.format_report(report.confusion_transition, "Rhythm transition segments"))
    text.append(f"record-level set accuracy: {100 * report.record_accuracy:.2f}%")
    empty = sum(r.empty_predictions for r in report.folds)
    if empty:
        text.append(f"records with no class above threshold: {empty}")
    if report.median_boundary_error_s is not None:
        text.append(f"median boundary error: {report.median_boundary_error_s:.3f} s "
                    f"over {len(report.boundary_errors_s)} boundaries")
    (out_dir / "report.txt").write_text("\n".join(text) + "\n")
    (out_dir / "confusion.csv").write_text(mt.confusion_csv(report.confusion))
    if report.confusion.total:
        (out_dir / "metrics.csv").write_text(mt.metrics_csv(report.confusion))
    if report.confusion_transition is not None and report.confusion_transition.total:
        (out_dir / "metrics_transition.csv").write_text(mt.metrics_csv(report.confusion_transition))
    if cfg.figures:
        from . import plotting

        plotting.plot_confusion(report.confusion, out_dir / "confusion.png")
        plotting.plot_histories([r.history for r in report.folds], out_dir / "history.png")


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def _sweep_values(config, axis):
    if axis == "aggregation":
        return list(config.sweep_aggregation)
    if axis == "depth":
        return list(config.sweep_depth)
    if axis == "distribution":
        if config.sweep_distribution:
            return list(config.sweep_distribution)
        names = ["Original", "Single50", "Multiple50", "OnlySingle"]
        # two rhythm labels give a single multi-label combination, so OnlyMultiple is uninformative
        return names + (["OnlyMultiple"] if config.task == "beat" else [])
    raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")


def sweep_table(axis: str, rows) -> tuple[list[str], list[list[str]]]:
    """Column headers and formatted rows for a sweep summary table."""
    task = rows[0][1].config.task
    if task == "rhythm":
        header = [axis, "Se%", "Ppr%", "Acc%", "trans Se%", "trans Ppr%", "trans Acc%"]
    else:
        labels = rows[0][1].config.label_tuple
        header = [axis] + [f"{lab} {m}%" for lab in labels for m in ("Se", "Ppr")]
    body = []
    for value, rep in rows:
        if task == "rhythm":
            # AF is the positive class for the rhythm task
            pos = rep.config.label_tuple[0]
            a = mt.class_metrics(rep.confusion, pos)
            line = [str(value), mt.fmt_pct(a.se), mt.fmt_pct(a.ppr), mt.fmt_pct(a.acc)]
            if rep.confusion_transition.total:
                t = mt.class_metrics(rep.confusion_transition, pos)
                line += [mt.fmt_pct(t.se), mt.fmt_pct(t.ppr), mt.fmt_pct(t.acc)]
            else:
                line += ["undef"] * 3
        else:
            line = [str(value)]
            for lab in rep.config.label_tuple:
                m = mt.class_metrics(rep.confusion, lab)
                line += [mt.fmt_pct(m.se), mt.fmt_pct(m.ppr)]
        body.append(line)
    return header, body


def sweep(config: ExperimentConfig, axis: str, values=None, write: bool = True):
    """One experiment per axis value; returns (header, rows, reports)."""
    values = list(values) if values is not None else _sweep_values(config, axis)
    base_out = resolve_output_dir(config).absolute()
    reports = []
    for v in values:
        key = {"aggregation": "aggregation", "depth": "depth", "distribution": "distribution"}[axis]
        sub = replace(config, **{key: v}, output_dir=str(base_out / f"{axis}-{v}".replace(":", "r")))
        reports.append((v, run_experiment(sub, write=write)))
    header, body = sweep_table(axis, reports)
    if write:
        base_out.mkdir(parents=True, exist_ok=True)
        widths = [max(len(r[i]) for r in [header] + body) + 2 for i in range(len(header))]
        lines = ["".join(c.rjust(w) for c, w in zip(r, widths)) for r in [header] + body]
        (base_out / f"sweep_{axis}.txt").write_text("\n".join(lines) + "\n")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(body)
        (base_out / f"sweep_{axis}.csv").write_text(buf.getvalue())
        if config.figures:
            from . import plotting

            plotting.plot_sweep(header, body, base_out / f"sweep_{axis}.png")
    return header, body, [r for _, r in reports]


# ---------------------------------------------------------------------------
# local map export
# ---------------------------------------------------------------------------


def local_map_csv(D, labels, truth=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample"] + [f"p_{lab}" for lab in labels] + (["truth"] if truth is not None else []))
    for i, row in enumerate(D):
        line = [i] + [f"{v:.6f}" for v in row]
        if truth is not None:
            line.append(truth[i])
        w.writerow(line)
    return buf.getvalue()


def _polyline(values, x0, y0, width, height, lo, hi):
    n = len(values)
    xs = x0 + np.arange(n) * (width / max(1, n - 1))
    span = (hi - lo) or 1.0
    ys = y0 + height - (np.asarray(values, dtype=float) - lo) / span * height
    return "M" + " L".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))


_COLOURS = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]


def local_map_svg(signal, D, labels, truth=None, peaks=None) -> str:
    """Stacked traces: signal, truth (class index) and one probability curve per class.

    Exactly one <path> per trace; R peaks are <line> markers.
    """
    n, m = D.shape
    width, row_h, pad = 1000, 90, 20
    rows = 1 + (truth is not None) + m
    height = rows * (row_h + pad) + pad
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width + 2 * pad}" height="{height}" '
             f'viewBox="0 0 {width + 2 * pad} {height}">']
    y = pad
    sig = np.asarray(signal, dtype=float).reshape(n, -1)[:, 0]
    parts.append(f'<path class="signal" d="{_polyline(sig, pad, y, width, row_h, sig.min(), sig.max())}" '
                 'fill="none" stroke="black" stroke-width="1"/>')
    for p in (peaks if peaks is not None else []):
        x = pad + p * width / max(1, n - 1)
        parts.append(f'<line class="rpeak" x1="{x:.2f}" y1="{pad}" x2="{x:.2f}" y2="{height - pad}" '
                     'stroke="green" stroke-dasharray="4,3" stroke-width="0.6"/>')
    y += row_h + pad
    if truth is not None:
        idx = np.array([labels.index(t) if t in labels else -1 for t in truth], dtype=float)
        parts.append(f'<path class="truth" d="{_polyline(idx, pad, y, width, row_h, -1, m - 1)}" '
                     'fill="none" stroke="gray" stroke-width="1.5"/>')
        y += row_h + pad
    for c in range(m):
        parts.append(f'<text x="{pad}" y="{y - 4}" font-size="11">p({labels[c]})</text>')
        parts.append(f'<path class="prob" d="{_polyline(D[:, c], pad, y, width, row_h, 0, 1)}" '
                     f'fill="none" stroke="{_COLOURS[c % len(_COLOURS)]}" stroke-width="1"/>')
        y += row_h + pad
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_local_map(model: Model, signal, path, fmt: str = "csv", truth=None, peaks=None,
                     rate: float | None = None) -> Path:
    """Write the local prediction map of ``signal`` as csv, svg or png."""
    x = np.asarray(signal, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    D = predict_maps(model, [x])[0]
    labels = list(model.config.labels) or [str(i) for i in range(model.config.classes)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        path.write_text(local_map_csv(D, labels, truth))
    elif fmt == "svg":
        path.write_text(local_map_svg(x, D, labels, truth, peaks))
    elif fmt == "png":
        from . import plotting

        plotting.plot_local_map(x[:, 0], D, labels, path, truth=truth, peaks=peaks, rate=rate)
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    return path


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------


class FetchError(RuntimeError):
    pass


def fetch_dataset(url: str, checksum: str, dest, filename: str | None = None, timeout: float = 60.0) -> Path:
    """Download ``url`` and write it under ``dest`` only if its SHA-256 matches."""
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            payload = resp.read()
    except (urllib.error.URLError, OSError) as exc:
        raise FetchError(f"could not retrieve {url}: {exc}") from exc
    digest = hashlib.sha256(payload).hexdigest()
    if digest.lower() != checksum.lower():
        raise FetchError(f"checksum mismatch for {url}: expected {checksum}, got {digest}")
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    target = dest / (filename or Path(urllib.request.url2pathname(url.split("?")[0])).name or "download")
    tmp = target.with_name(target.name + ".part")
    tmp.write_bytes(payload)
    tmp.replace(target)
    return target
