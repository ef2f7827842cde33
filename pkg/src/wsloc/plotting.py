"""Matplotlib figures written straight to files (Agg backend, no display)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_local_map(signal, D, labels, path, truth=None, peaks=None, rate=None):
    """Signal on top, per-class probability curves below, optional truth band."""
    n = len(signal)
    t = np.arange(n) / rate if rate else np.arange(n)
    fig, axes = plt.subplots(2, 1, figsize=(11, 5), sharex=True,
                             gridspec_kw={"height_ratios": [1.2, 1]})
    axes[0].plot(t, signal, color="black", lw=0.7)
    if peaks is not None and len(peaks):
        pk = np.asarray(peaks)
        axes[0].plot(t[pk], np.asarray(signal)[pk], "v", color="tab:green", ms=5, label="R peak")
        axes[0].legend(loc="upper right", fontsize=8)
    axes[0].set_ylabel("signal")
    for c, lab in enumerate(labels):
        axes[1].plot(t, D[:, c], lw=1.0, label=f"p({lab})")
    if truth is not None:
        idx = np.array([labels.index(v) if v in labels else -1 for v in truth])
        for c in range(len(labels)):
            on = idx == c
            axes[1].fill_between(t, 0, 1, where=on, alpha=0.08, step="mid", color=f"C{c}")
    axes[1].set_ylim(-0.02, 1.02)
    axes[1].set_ylabel("probability")
    axes[1].set_xlabel("time (s)" if rate else "sample")
    axes[1].legend(loc="upper right", fontsize=8, ncol=len(labels))
    return _save(fig, path)


def plot_confusion(cm, path):
    counts = cm.counts
    fig, ax = plt.subplots(figsize=(1.2 * len(cm.labels) + 2, 1.1 * len(cm.labels) + 1.5))
    ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(len(cm.labels)), cm.labels)
    ax.set_yticks(range(len(cm.labels)), cm.labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("reference")
    hi = counts.max() if counts.size else 0
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            ax.text(j, i, str(counts[i, j]), ha="center", va="center",
                    color="white" if counts[i, j] > hi / 2 else "black", fontsize=9)
    return _save(fig, path)


def plot_histories(histories, path):
    fig, ax = plt.subplots(figsize=(7, 4))
    for k, h in enumerate(histories):
        if not h:
            continue
        ep = [r["epoch"] for r in h]
        ax.plot(ep, [r["train_loss"] for r in h], color=f"C{k}", lw=1, label=f"fold {k} train")
        ax.plot(ep, [r["val_loss"] for r in h], color=f"C{k}", lw=1, ls="--", label=f"fold {k} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def plot_sweep(header, rows, path):
    """Grouped bars: one group per swept value, one bar per metric column."""
    values = [r[0] for r in rows]
    cols = header[1:]
    data = np.array([[np.nan if v == "undef" else float(v) for v in r[1:]] for r in rows])
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(values) * max(1, len(cols)) / 3), 4))
    width = 0.8 / max(1, len(cols))
    x = np.arange(len(values))
    for j, name in enumerate(cols):
        ax.bar(x + j * width - 0.4 + width / 2, data[:, j], width, label=name)
    ax.set_xticks(x, values)
    ax.set_xlabel(header[0])
    ax.set_ylabel("%")
    lo = np.nanmin(data) if np.isfinite(data).any() else 0
    ax.set_ylim(max(0, lo - 5), 100.5)
    ax.legend(fontsize=7, ncol=3)
    return _save(fig, path)
