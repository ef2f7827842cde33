"""Synthetic signals with exact event ground truth.

Beat mode places isolated motifs (one class per event) on a jittered grid.
Rhythm mode alternates two regimes: "Other" (regular spacing, small P-wave
before every beat) and "AF" (irregular spacing, no P-wave, continuous
low-amplitude fibrillatory oscillation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .signal_io import DEFAULT_GAIN, BeatAnnotation, RhythmAnnotation, SignalRecord


def _gauss(t, sigma):
    return np.exp(-0.5 * (t / sigma) ** 2)


def motif_bump(t):
    """Monophasic positive bump."""
    return _gauss(t, 0.025)


def motif_spike(t):
    """Biphasic spike (Gaussian derivative), peak-normalised."""
    s = 0.02
    y = -(t / s) * _gauss(t, s)
    return y / np.exp(-0.5)


def motif_notch(t):
    """Wide negative deflection with a small positive shoulder."""
    return -_gauss(t, 0.06) + 0.3 * _gauss(t - 0.12, 0.03)


MOTIFS = {"bump": motif_bump, "spike": motif_spike, "notch": motif_notch}
MOTIF_HALF_WIDTH = 0.2  # seconds of support rendered on each side of a centre


@dataclass
class SynthSpec:
    rate: float = 100.0
    seconds: float = 60.0
    classes: dict = field(default_factory=lambda: {"N": "bump", "V": "notch", "S": "spike"})
    class_weights: dict | None = None
    mean_interval: float = 0.7  # seconds between events
    jitter: float = 0.1  # +- seconds on the interval (beat mode)
    noise: float = 0.02  # white noise sigma, relative to unit motif amplitude
    rhythm_mode: bool = False
    regime_seconds: tuple = (15.0, 45.0)  # rhythm mode: uniform regime duration range
    boundaries: tuple | None = None  # rhythm mode: explicit change times (s)
    first_regime: str = "Other"
    fwave_amplitude: float = 0.12
    record_id: str = "synth"
    seed: int = 0

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.rate <= 0 or self.seconds <= 0:
            raise ValueError("rate and seconds must be positive")
        if self.mean_interval - self.jitter <= 2 * MOTIF_HALF_WIDTH * 0.5:
            raise ValueError("event interval must exceed the motif width")
        for shape in self.classes.values():
            if shape not in MOTIFS:
                raise ValueError(f"unknown motif {shape!r}")


def _render(n, fs, centres, shapes):
    x = np.zeros(n)
    half = int(round(MOTIF_HALF_WIDTH * fs))
    for c, shape in zip(centres, shapes):
        lo, hi = max(0, c - half), min(n, c + half + 1)
        t = (np.arange(lo, hi) - c) / fs
        x[lo:hi] += MOTIFS[shape](t)
    return x


def _quantise(x, record_id, fs):
    raw = np.clip(np.round(x * DEFAULT_GAIN), -2048, 2047).astype(np.int64)
    return SignalRecord(record_id, fs, raw[:, None], DEFAULT_GAIN, 0)


def _beat_mode(spec, rng):
    fs, n = spec.rate, int(round(spec.seconds * spec.rate))
    names = list(spec.classes)
    weights = np.array([spec.class_weights.get(k, 0.0) for k in names] if spec.class_weights
                       else [1.0] * len(names), dtype=float)
    weights /= weights.sum()
    margin = MOTIF_HALF_WIDTH
    centres, labels = [], []
    t = margin + rng.uniform(0, spec.mean_interval)
    while t < spec.seconds - margin:
        centres.append(int(round(t * fs)))
        labels.append(names[rng.choice(len(names), p=weights)])
        t += spec.mean_interval + rng.uniform(-spec.jitter, spec.jitter)
    x = _render(n, fs, centres, [spec.classes[k] for k in labels])
    x += spec.noise * rng.standard_normal(n)
    return _quantise(x, spec.record_id, fs), BeatAnnotation(centres, labels), None


def _rhythm_mode(spec, rng):
    fs, n = spec.rate, int(round(spec.seconds * spec.rate))
    if spec.boundaries is not None:
        times = sorted(spec.boundaries)
    else:
        lo, hi = spec.regime_seconds
        times, t = [], rng.uniform(lo, hi)
        while t < spec.seconds - lo:
            times.append(t)
            t += rng.uniform(lo, hi)
    onsets = [0] + [int(round(b * fs)) for b in times]
    other = "AF" if spec.first_regime == "Other" else "Other"
    codes = [spec.first_regime if i % 2 == 0 else other for i in range(len(onsets))]
    rhythm = RhythmAnnotation(onsets, codes)
    truth = rhythm.per_sample(n)

    qrs = next(iter(spec.classes.values()))
    x = np.zeros(n)
    centres = []
    t = MOTIF_HALF_WIDTH + 0.1
    while t < spec.seconds - MOTIF_HALF_WIDTH:
        c = int(round(t * fs))
        centres.append(c)
        if truth[c] == "AF":
            t += rng.uniform(0.35, 1.0)
        else:
            t += spec.mean_interval + rng.uniform(-0.02, 0.02)
    x += _render(n, fs, centres, [qrs] * len(centres))
    # P waves ahead of every beat outside AF
    p_centres = [c - int(round(0.16 * fs)) for c in centres if truth[c] != "AF"]
    half = int(round(0.06 * fs))
    for c in p_centres:
        lo, hi = max(0, c - half), min(n, c + half + 1)
        x[lo:hi] += 0.15 * _gauss((np.arange(lo, hi) - c) / fs, 0.02)
    # fibrillatory waves confined to AF regimes
    tt = np.arange(n) / fs
    fw = np.zeros(n)
    for f0 in (5.3, 6.7):
        fw += np.sin(2 * np.pi * f0 * tt + rng.uniform(0, 2 * np.pi))
    x += spec.fwave_amplitude * 0.5 * fw * (truth == "AF")
    x += spec.noise * rng.standard_normal(n)
    beats = BeatAnnotation(centres, ["N"] * len(centres))
    return _quantise(x, spec.record_id, fs), beats, rhythm


def generate(spec: SynthSpec):
    """Return ``(record, beats, rhythm)``; ``rhythm`` is None in beat mode.

    Deterministic for a given spec (including its seed).
    """
    rng = np.random.default_rng(spec.seed)
    if spec.rhythm_mode:
        return _rhythm_mode(spec, rng)
    return _beat_mode(spec, rng)


def pulse_train(rate=250.0, seconds=30.0, period=1.0, snr_db=20.0, alternation=0.0, seed=0):
    """Unit bumps at a fixed period with white noise at the given SNR (peak amplitude).

    With ``alternation`` every other pulse is scaled by (1 - alternation).
    Returns ``(signal, true_peak_indices)``.
    """
    rng = np.random.default_rng(seed)
    n = int(round(seconds * rate))
    centres = np.arange(period / 2, seconds - MOTIF_HALF_WIDTH, period)
    idx = np.round(centres * rate).astype(int)
    x = np.zeros(n)
    half = int(round(MOTIF_HALF_WIDTH * rate))
    for k, c in enumerate(idx):
        lo, hi = max(0, c - half), min(n, c + half + 1)
        amp = 1.0 - alternation if k % 2 else 1.0
        x[lo:hi] += amp * motif_bump((np.arange(lo, hi) - c) / rate)
    sigma = 10 ** (-snr_db / 20)
    return x + sigma * rng.standard_normal(n), idx
