"""R-peak positions for masked aggregation: from annotations or Pan-Tompkins."""

from __future__ import annotations

import numpy as np
from scipy.signal import find_peaks, lfilter

BASE_RATE = 200.0


def peaks_from_annotations(segment) -> np.ndarray:
    """Every annotated beat position, including beats excluded from scoring."""
    return np.asarray(sorted(i for i, _ in segment.beat_events), dtype=np.intp)


def _bandpass(x, fs):
    """Integer-coefficient Pan-Tompkins filters with delays scaled from 200 Hz.

    low-pass:  y(n) = 2y(n-1) - y(n-2) + x(n) - 2x(n-d) + x(n-2d),  d = 6 @ 200 Hz
    high-pass: y(n) = x(n-D) - (1/2D) * sum_{i<2D} x(n-i),          D = 16 @ 200 Hz
    Returns the filtered signal and its group delay in samples.
    """
    d = max(1, int(round(6 * fs / BASE_RATE)))
    b = np.zeros(2 * d + 1)
    b[0], b[d], b[2 * d] = 1, -2, 1
    lp = lfilter(b, [1, -2, 1], x) / (d * d)
    D = max(2, int(round(16 * fs / BASE_RATE)))
    hb = -np.ones(2 * D) / (2 * D)
    hb[D] += 1
    hp = lfilter(hb, [1], lp)
    return hp, (d - 1) + D


def _derivative(x, fs):
    """Five-point derivative (1/8)(2x(n) + x(n-1) - x(n-3) - 2x(n-4)), scaled to fs."""
    return lfilter(np.array([2, 1, 0, -1, -2]) * fs / 8.0, [1], x), 2


def pan_tompkins(signal, fs: float, refractory_s: float = 0.2, window_s: float = 0.15,
                 fiducial_s: float = 0.04) -> np.ndarray:
    """Detect QRS complexes and return R-peak sample indices.

    Band-pass, derivative, squaring and a moving-window integrator feed an
    adaptive two-level threshold with a refractory period, a T-wave check
    and search-back over missed beats. Each detection is moved to the
    largest deflection of the raw signal within ``fiducial_s``.
    """
    x = np.asarray(signal, dtype=float).ravel()
    if not 100 <= fs <= 1000:
        raise ValueError("sampling rate must lie in [100, 1000] Hz")
    if len(x) < 2 * fs:
        raise ValueError("signal must be at least 2 s long")
    if np.ptp(x) == 0:
        return np.zeros(0, dtype=np.intp)

    x = x - np.median(x)
    bp, delay_bp = _bandpass(x, fs)
    der, delay_d = _derivative(bp, fs)
    sq = der * der
    w = max(1, int(round(window_s * fs)))
    mwi = lfilter(np.ones(w) / w, [1], sq)
    # align the integrator with the raw signal: filter delays plus half a window
    shift = delay_bp + delay_d + (w - 1) // 2
    mwi = np.concatenate([mwi[shift:], np.zeros(shift)])
    slope = np.abs(np.concatenate([der[delay_bp + delay_d:], np.zeros(delay_bp + delay_d)]))

    refractory = int(round(refractory_s * fs))
    cand, _ = find_peaks(mwi, distance=refractory)
    if cand.size == 0:
        return np.zeros(0, dtype=np.intp)

    learn = int(2 * fs)
    spk = 0.25 * mwi[:learn].max()
    npk = 0.5 * mwi[:learn].mean()
    thr1 = npk + 0.25 * (spk - npk)

    def local_slope(p):
        lo, hi = max(0, p - w), min(len(slope), p + w // 2 + 1)
        return slope[lo:hi].max()

    qrs: list[int] = []
    qrs_slope: list[float] = []
    rr: list[int] = []
    for p in cand:
        peak = mwi[p]
        # search back for a missed beat when the gap grows past 166% of the mean RR
        if qrs and rr:
            mean_rr = np.mean(rr[-8:])
            if p - qrs[-1] > 1.66 * mean_rr:
                lo = qrs[-1] + refractory
                back = cand[(cand > lo) & (cand < p - refractory)]
                thr2 = 0.5 * thr1
                if back.size:
                    best = back[np.argmax(mwi[back])]
                    if mwi[best] > thr2:
                        rr.append(best - qrs[-1])
                        qrs.append(int(best))
                        qrs_slope.append(local_slope(best))
                        spk = 0.25 * mwi[best] + 0.75 * spk
                        thr1 = npk + 0.25 * (spk - npk)
        if qrs and p - qrs[-1] < refractory:
            continue
        if peak > thr1:
            s = local_slope(p)
            if qrs and p - qrs[-1] < 0.36 * fs and s < 0.5 * qrs_slope[-1]:
                npk = 0.125 * peak + 0.875 * npk
            else:
                if qrs:
                    rr.append(p - qrs[-1])
                qrs.append(int(p))
                qrs_slope.append(s)
                spk = 0.125 * peak + 0.875 * spk
        else:
            npk = 0.125 * peak + 0.875 * npk
        thr1 = npk + 0.25 * (spk - npk)

    # fiducial refinement on the raw signal
    half = int(round(fiducial_s * fs))
    wide = int(round(0.3 * fs))
    out = []
    for p in qrs:
        lo, hi = max(0, p - half), min(len(x), p + half + 1)
        base = np.median(x[max(0, p - wide) : p + wide + 1])
        r = lo + int(np.argmax(np.abs(x[lo:hi] - base)))
        if out and r - out[-1] < refractory:
            if abs(x[r]) > abs(x[out[-1]]):
                out[-1] = r
            continue
        out.append(r)
    return np.asarray(out, dtype=np.intp)
