"""Static figures for reports: pick overlays on wiggle plots and hit-rate curves."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .types import UNLABELED  # noqa: E402

# fixed ids and no timestamp keep SVG output byte-stable between runs
_RC = {"svg.hashsalt": "sprpick", "svg.fonttype": "none", "font.size": 9}
_SVG_META = {"Date": None, "Creator": None}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = _SVG_META if path.suffix == ".svg" else None
    fig.savefig(path, metadata=meta, bbox_inches="tight")
    plt.close(fig)
    return path


def wiggle_overlay(
    amplitude,
    ref_picks,
    pred_picks=None,
    path="overlay.svg",
    noisy_picks=None,
    sample_rate_ms: float = 1.0,
    title: str = "",
    gain: float = 0.8,
    max_samples: int | None = None,
) -> Path:
    """Wiggle traces with reference picks as red circles and predictions as blue dots.

    ``noisy_picks``, if given, are drawn as green circles.
    """
    amp = np.asarray(amplitude, dtype=np.float64)
    m, n = amp.shape
    if max_samples is not None:
        m = min(m, max_samples)
        amp = amp[:m]
    peak = np.abs(amp).max(axis=0)
    amp = amp / np.where(peak > 0, peak, 1.0) * gain
    t_ms = np.arange(m) * sample_rate_ms

    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.12 * n + 2), 5))
        for k in range(n):
            ax.plot(k + amp[:, k], t_ms, color="black", lw=0.4)
            ax.fill_betweenx(t_ms, k, k + amp[:, k], where=amp[:, k] > 0, color="black", lw=0)

        def scatter(picks, **kw):
            p = np.asarray(picks)
            keep = (p != UNLABELED) & (p < m)
            ax.scatter(np.flatnonzero(keep), p[keep] * sample_rate_ms, **kw)

        scatter(ref_picks, s=28, facecolors="none", edgecolors="red", linewidths=0.9, label="reference")
        if noisy_picks is not None:
            scatter(noisy_picks, s=28, facecolors="none", edgecolors="green", linewidths=0.9, label="noisy label")
        if pred_picks is not None:
            scatter(pred_picks, s=8, color="blue", label="predicted")
        ax.set_ylim(t_ms[-1], t_ms[0])
        ax.set_xlim(-1, n)
        ax.set_xlabel("trace")
        ax.set_ylabel("time (ms)")
        if title:
            ax.set_title(title)
        ax.legend(loc="lower left", fontsize=7, frameon=False)
        return _save(fig, path)


def hit_rate_curves(rows: list[dict], path="hit_rates.svg", deltas=(0, 1, 2, 3, 5)) -> Path:
    """One line per report row: hit rate (%) against the tolerance in samples."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for row in rows:
            hr = [100 * float(row[f"HR{d}"]) for d in deltas]
            label = row["method"] + (f" / {row['condition']}" if row.get("condition") else "")
            ax.plot(list(deltas), hr, marker="o", ms=3, label=label)
        ax.set_xlabel("tolerance (samples)")
        ax.set_ylabel("hit rate (%)")
        ax.set_xticks(list(deltas))
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7, frameon=False)
        return _save(fig, path)
