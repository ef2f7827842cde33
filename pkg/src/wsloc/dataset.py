"""Segment extraction, stratified folds and training-set distribution changes."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .signal_io import BeatAnnotation, RhythmAnnotation, SignalRecord

EXCLUDED = "excluded"


@dataclass(frozen=True)
class LabelVocabulary:
    task: str
    labels: tuple

    def __post_init__(self):
        if self.task not in ("rhythm", "beat"):
            raise ValueError(f"task must be 'rhythm' or 'beat', got {self.task!r}")
        if len(self.labels) < 2 or len(set(self.labels)) != len(self.labels):
            raise ValueError("vocabulary needs at least two distinct labels")
        object.__setattr__(self, "labels", tuple(self.labels))

    @classmethod
    def rhythm(cls):
        return cls("rhythm", ("AF", "Other"))

    @classmethod
    def beat(cls):
        return cls("beat", ("N", "L", "R", "A", "V"))

    @property
    def m(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)


@dataclass
class Segment:
    record_id: str
    start: int
    length: int
    label_set: frozenset
    beat_events: list = field(default_factory=list)  # (local index, label)
    rhythm_truth: np.ndarray | None = None  # per-sample labels, evaluation only
    signal: np.ndarray | None = None  # (length, c) physical units
    rpeaks: list | None = None  # detected peaks overriding annotated ones for masking

    @property
    def key(self) -> str:
        return f"{self.record_id}:{self.start}"

    @property
    def combination(self) -> str:
        return "+".join(sorted(self.label_set))

    @property
    def multi_label(self) -> bool:
        return len(self.label_set) > 1

    def peaks(self) -> list[int]:
        if self.rpeaks is not None:
            return list(self.rpeaks)
        return [i for i, _ in self.beat_events]


def _physical(record: SignalRecord, channels):
    return record.physical()[:, channels]


def _signal_window(phys, start, length):
    # copy, so a segment does not keep the whole record alive
    return phys[start : start + length].copy()


def _channels(record, channel):
    if channel is None:
        return list(range(record.channel_count))
    return [channel] if isinstance(channel, int) else list(channel)


def _runs(labels: np.ndarray):
    """Maximal runs as (start, stop, label)."""
    if len(labels) == 0:
        return []
    change = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    bounds = np.concatenate([[0], change, [len(labels)]])
    return [(int(a), int(b), labels[a]) for a, b in zip(bounds[:-1], bounds[1:])]


def rhythm_start_positions(n, change_points, window, dense, sparse) -> list[int]:
    """Sparse grid everywhere plus the dense grid where a window straddles a change."""
    if n < window:
        return []
    last = n - window
    starts = set(range(0, last + 1, sparse))
    for s in range(0, last + 1, dense):
        if any(s < c < s + window for c in change_points):
            starts.add(s)
    return sorted(starts)


def extract_rhythm_segments(
    record: SignalRecord,
    rhythm: RhythmAnnotation,
    window_s: float = 20.0,
    dense_stride_s: float = 5.0,
    sparse_stride_s: float = 250.0,
    min_rhythm_s: float = 3.0,
    beats: BeatAnnotation | None = None,
    channel=0,
    labels: tuple = ("AF", "Other"),
) -> list[Segment]:
    """Windows for the rhythm task.

    Strides are aligned to the record start. A window is kept only if every
    maximal rhythm run inside it lasts at least ``min_rhythm_s``. When beats
    are supplied each one is carried as a beat event labelled with the rhythm
    at its sample.
    """
    fs = record.sampling_rate
    window = int(round(window_s * fs))
    dense = max(1, int(round(dense_stride_s * fs)))
    sparse = max(1, int(round(sparse_stride_s * fs)))
    min_run = int(round(min_rhythm_s * fs))
    n = record.n
    rhythm = rhythm.anchored()
    rhythm.validate(n)
    truth = rhythm.per_sample(n)
    unknown = set(rhythm.codes) - set(labels)
    if unknown:
        raise ValueError(f"rhythm labels {sorted(unknown)} are not in the vocabulary {labels}")
    phys = _physical(record, _channels(record, channel))
    beat_pos = np.asarray(beats.samples if beats is not None else [], dtype=np.int64)

    out = []
    for s in rhythm_start_positions(n, rhythm.change_points(), window, dense, sparse):
        w = truth[s : s + window]
        runs = _runs(w)
        if any(b - a < min_run for a, b, _ in runs):
            continue
        lo, hi = np.searchsorted(beat_pos, [s, s + window])
        events = [(int(p - s), w[p - s]) for p in beat_pos[lo:hi]]
        out.append(Segment(
            record.record_id, s, window, frozenset(lab for _, _, lab in runs), events,
            w.copy(), _signal_window(phys, s, window),
        ))
    return out


def extract_beat_segments(
    record: SignalRecord,
    beats: BeatAnnotation,
    window_s: float = 20.0,
    labels: tuple = ("N", "L", "R", "A", "V"),
    channel=0,
) -> list[Segment]:
    """Non-overlapping windows from sample 0; windows without target beats are dropped.

    Beats of other classes stay in ``beat_events`` labelled ``excluded``.
    """
    window = int(round(window_s * record.sampling_rate))
    targets = set(labels)
    phys = _physical(record, _channels(record, channel))
    pos = np.asarray(beats.samples, dtype=np.int64)
    out = []
    for k in range(record.n // window if window else 0):
        s = k * window
        lo, hi = np.searchsorted(pos, [s, s + window])
        events = []
        present = set()
        for j in range(lo, hi):
            code = beats.codes[j]
            if code in targets:
                present.add(code)
                events.append((int(pos[j] - s), code))
            else:
                events.append((int(pos[j] - s), EXCLUDED))
        if not present:
            continue
        out.append(Segment(
            record.record_id, s, window, frozenset(present), events, None,
            _signal_window(phys, s, window),
        ))
    return out


# ---------------------------------------------------------------------------
# folds and distribution modifications
# ---------------------------------------------------------------------------


@dataclass
class FoldSplit:
    fold_count: int
    assignment: dict  # segment key -> fold index

    def fold_of(self, segment: Segment) -> int:
        return self.assignment[segment.key]

    def members(self, segments, fold: int) -> list[Segment]:
        return [s for s in segments if self.assignment[s.key] == fold]


def split_folds(segments, fold_count: int = 5, seed: int = 0) -> FoldSplit:
    """Stratify by exact label combination, dealing each stratum round-robin."""
    if fold_count < 2:
        raise ValueError("fold_count must be >= 2")
    if len(segments) < fold_count:
        raise ValueError(f"{len(segments)} segments cannot fill {fold_count} folds")
    keys = [s.key for s in segments]
    if len(set(keys)) != len(keys):
        raise ValueError("segment keys (record_id:start) must be unique")
    rng = np.random.default_rng(seed)
    strata: dict[str, list[str]] = {}
    for s in segments:
        strata.setdefault(s.combination, []).append(s.key)
    assignment = {}
    cursor = 0
    for combo in sorted(strata):
        members = sorted(strata[combo])
        for i in rng.permutation(len(members)):
            assignment[members[i]] = cursor % fold_count
            cursor += 1
    return FoldSplit(fold_count, assignment)


@dataclass(frozen=True)
class DistributionMod:
    name: str
    retain_single: float
    retain_multiple: float


DISTRIBUTION_MODS = {
    "Original": DistributionMod("Original", 1.0, 1.0),
    "Single50": DistributionMod("Single50", 0.5, 1.0),
    "Multiple50": DistributionMod("Multiple50", 1.0, 0.5),
    "OnlySingle": DistributionMod("OnlySingle", 1.0, 0.0),
    "OnlyMultiple": DistributionMod("OnlyMultiple", 0.0, 1.0),
}


def get_mod(name) -> DistributionMod:
    if isinstance(name, DistributionMod):
        return name
    try:
        return DISTRIBUTION_MODS[name]
    except KeyError:
        raise ValueError(f"unknown distribution modification {name!r}") from None


def _subsample(segments, fraction, rng):
    keep = math.floor(fraction * len(segments))
    if keep >= len(segments):
        return list(segments)
    idx = sorted(rng.choice(len(segments), size=keep, replace=False))
    return [segments[i] for i in idx]


def _modify(segments, mod, rng):
    single = [s for s in segments if not s.multi_label]
    multi = [s for s in segments if s.multi_label]
    kept = set(id(s) for s in _subsample(single, mod.retain_single, rng))
    kept |= set(id(s) for s in _subsample(multi, mod.retain_multiple, rng))
    return [s for s in segments if id(s) in kept]


def fold_roles(fold_count: int, test_fold: int) -> tuple[int, list[int]]:
    """Validation fold and training folds for a given test fold."""
    val = (test_fold + 1) % fold_count
    return val, [f for f in range(fold_count) if f not in (test_fold, val)]


def apply_distribution_mod(segments, split: FoldSplit, test_fold: int, mod="Original", seed: int = 0):
    """Return (train, val, test) lists with the mod applied to train and val only."""
    mod = get_mod(mod)
    val_fold, train_folds = fold_roles(split.fold_count, test_fold)
    train = [s for s in segments if split.assignment[s.key] in train_folds]
    val = [s for s in segments if split.assignment[s.key] == val_fold]
    test = [s for s in segments if split.assignment[s.key] == test_fold]
    if mod.retain_single == 0:
        combos = {s.combination for s in train + val if s.multi_label}
        if len(combos) <= 1:
            warnings.warn(
                f"{mod.name}: every multiple-label segment has the same combination "
                f"{sorted(combos)}; labels carry no supervision",
                stacklevel=2,
            )
    rng = np.random.default_rng([seed, test_fold])
    return _modify(train, mod, rng), _modify(val, mod, rng), test


def transition_subset(segments) -> list[Segment]:
    return [s for s in segments if len(s.label_set) >= 2]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def format_manifest(segments) -> str:
    """One line per segment: ``record_id,start,length,labels;beat_list``.

    Labels are joined with '+', beats as ``index:label`` joined with ' '.
    """
    lines = []
    for s in segments:
        beats = " ".join(f"{i}:{lab}" for i, lab in s.beat_events)
        lines.append(f"{s.record_id},{s.start},{s.length},{'+'.join(sorted(s.label_set))};{beats}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_manifest(text: str) -> list[Segment]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        head, _, beats = line.partition(";")
        parts = head.split(",")
        if len(parts) != 4:
            raise ValueError(f"manifest line {lineno}: expected record_id,start,length,labels")
        events = []
        for item in beats.split():
            i, lab = item.split(":", 1)
            events.append((int(i), lab))
        out.append(Segment(parts[0], int(parts[1]), int(parts[2]), frozenset(parts[3].split("+")), events))
    return out
