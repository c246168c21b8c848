"""Figure rendering for reports: SDR bars, piano roll vs spectrogram, loss curves."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _figure(width=6.0, height=None, nrows=1, **kw):
    golden = (np.sqrt(5) - 1) / 2
    height = height or width * golden
    with plt.rc_context(STYLE):
        return plt.subplots(nrows=nrows, figsize=(width, height), **kw)


def _save(fig, path):
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)
    return path


def plot_sdr_report(report, path, baseline=None, title=None):
    """Per-instrument median SDR bars; ``baseline`` adds a second series (e.g. the mixture)."""
    names = sorted(report.instrument_medians)
    values = [report.instrument_medians[n] for n in names]
    fig, ax = _figure()
    x = np.arange(len(names))
    width = 0.38 if baseline is not None else 0.6
    ax.bar(x - (width / 2 if baseline is not None else 0), values, width, label="estimate", color="#3a6ea5")
    if baseline is not None:
        base = [baseline.instrument_medians.get(n, np.nan) for n in names]
        ax.bar(x + width / 2, base, width, label="mixture", color="#b0b0b0")
        ax.legend(frameon=False)
    ax.axhline(0, color="k", lw=0.6)
    ax.set_xticks(x, names, rotation=30, ha="right")
    ax.set_ylabel("median SDR [dB]")
    ax.set_title(title or f"mean of instrument medians: {report.overall_mean:.2f} dB")
    return _save(fig, path)


def plot_roll(roll, path, mag=None, title=None):
    """Piano roll on top, optional log-magnitude spectrogram below on a shared frame axis."""
    data = roll.data
    active = np.flatnonzero(data.any(axis=0))
    lo, hi = (active.min() - 2, active.max() + 3) if active.size else (0, 128)
    lo, hi = max(lo, 0), min(hi, 128)
    nrows = 2 if mag is not None else 1
    fig, axes = _figure(6.0, 2.2 * nrows + 0.4, nrows=nrows, sharex=True, squeeze=False)
    ax = axes[0, 0]
    ax.imshow(data[:, lo:hi].T, aspect="auto", origin="lower", cmap="Greys",
              interpolation="nearest", extent=(0, data.shape[0], lo, hi))
    ax.set_ylabel("MIDI pitch")
    ax.set_title(title or "piano roll")
    if mag is not None:
        ax2 = axes[1, 0]
        db = 20 * np.log10(np.maximum(mag, 1e-6))
        ax2.imshow(db.T, aspect="auto", origin="lower", cmap="magma",
                   vmin=db.max() - 80, vmax=db.max(), extent=(0, mag.shape[0], 0, mag.shape[1]))
        loud = np.flatnonzero((db > db.max() - 60).any(axis=0))
        if loud.size:
            ax2.set_ylim(0, min(mag.shape[1], int(loud.max() * 1.2) + 1))
        ax2.set_ylabel("bin")
        ax2.set_xlabel("frame")
    else:
        ax.set_xlabel("frame")
    return _save(fig, path)


def plot_loss_curve(records, path):
    """Step losses (thin) and epoch means (markers) from training-log records."""
    steps = [r["step"] for r in records]
    totals = [r["total"] for r in records]
    fig, ax = _figure()
    ax.plot(steps, totals, lw=0.8, color="#3a6ea5", label="step")
    epochs = sorted({r["epoch"] for r in records})
    means = [np.mean([r["total"] for r in records if r["epoch"] == e]) for e in epochs]
    last = [max(r["step"] for r in records if r["epoch"] == e) for e in epochs]
    ax.plot(last, means, "o", color="#c44e52", ms=3, label="epoch mean")
    ax.set_xlabel("step")
    ax.set_ylabel("combination loss")
    ax.legend(frameon=False)
    return _save(fig, path)
