"""Aggregate attack results into success rates, distortion statistics and exports.

CSV schemas (header rows exactly as written):

* summary:    ``model,mode,n,prob,mean,sd,n_success``
* trend:      ``generation,best_fitness,loss_term_zero``
* mean trend: ``generation,mean_best_fitness``
* histogram:  ``bin_left,bin_right,count``

Floats are written with ``repr`` so they parse back exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class BatchSummary:
    mode: str
    model: str
    n: int
    n_success: int
    success_prob: float
    distance_mean: float | None  # None when nothing succeeded
    distance_sd: float | None  # population SD (divides by the number of successes)
    trend_mean: list = field(default_factory=list)
    hist_counts: list = field(default_factory=list)
    hist_edges: list = field(default_factory=list)


def _mean_sd(values):
    values = sorted(values)
    mean = math.fsum(values) / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / len(values)
    return mean, math.sqrt(var)


def summarize(results, model: str = "", bins=10) -> BatchSummary:
    """Success probability, distance mean/SD over successes, mean trend and fitness histogram.

    Order of ``results`` does not affect any field. Trends shorter than the
    longest (early stopping) are padded with their final value.
    """
    results = list(results)
    if not results:
        raise ValueError("cannot summarise an empty result list")
    modes = {r.mode for r in results}
    ok = sorted(r.distance for r in results if r.success)
    mean, sd = _mean_sd(ok) if ok else (None, None)

    trends = [r.trend.best_fitness for r in results if len(r.trend)]
    trend_mean = []
    if trends:
        length = max(map(len, trends))
        padded = [t + [t[-1]] * (length - len(t)) for t in trends]
        trend_mean = [math.fsum(sorted(col)) / len(col) for col in zip(*padded)]

    finals = np.array(sorted(r.best_fitness for r in results), dtype=np.float64)
    finite = finals[np.isfinite(finals)]
    counts, edges = np.histogram(finite, bins=bins) if finite.size else (np.zeros(0, int), np.zeros(0))
    return BatchSummary(
        mode=modes.pop() if len(modes) == 1 else "mixed",
        model=model, n=len(results), n_success=len(ok),
        success_prob=len(ok) / len(results),
        distance_mean=mean, distance_sd=sd, trend_mean=trend_mean,
        hist_counts=[int(c) for c in counts], hist_edges=[float(e) for e in edges],
    )


def perturbation(x, x_adv) -> np.ndarray:
    """Signed per-pixel change ``x_adv - x``, in [-1, 1] for images in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x.shape != x_adv.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_adv.shape}")
    return x_adv - x


def _fmt(v):
    return "" if v is None else repr(float(v))


def _parent(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _open(path):
    return open(_parent(path), "w", newline="")


def export_summary_csv(summaries, path) -> None:
    if isinstance(summaries, BatchSummary):
        summaries = [summaries]
    with _open(path) as fh:
        w = csv.writer(fh)
        w.writerow(["model", "mode", "n", "prob", "mean", "sd", "n_success"])
        for s in summaries:
            w.writerow([s.model, s.mode, s.n, _fmt(s.success_prob), _fmt(s.distance_mean),
                        _fmt(s.distance_sd), s.n_success])


def export_trend_csv(trend, path) -> None:
    """One row per executed generation."""
    with _open(path) as fh:
        w = csv.DictWriter(fh, fieldnames=["generation", "best_fitness", "loss_term_zero"])
        w.writeheader()
        w.writerows(trend.rows())


def export_mean_trend_csv(summary: BatchSummary, path) -> None:
    with _open(path) as fh:
        w = csv.writer(fh)
        w.writerow(["generation", "mean_best_fitness"])
        for g, v in enumerate(summary.trend_mean, start=1):
            w.writerow([g, _fmt(v)])


def export_histogram_csv(summary: BatchSummary, path) -> None:
    with _open(path) as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "count"])
        for i, c in enumerate(summary.hist_counts):
            w.writerow([_fmt(summary.hist_edges[i]), _fmt(summary.hist_edges[i + 1]), c])


def export_csv(obj, path) -> None:
    """Write a summary (or list of summaries) or a trend log, by type."""
    if isinstance(obj, BatchSummary) or (isinstance(obj, list) and obj and isinstance(obj[0], BatchSummary)):
        export_summary_csv(obj, path)
    elif hasattr(obj, "rows"):
        export_trend_csv(obj, path)
    else:
        raise TypeError(f"don't know how to export {type(obj).__name__}")


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- raw and viewable image exports --------------------------------------------------

def write_raw(values, path) -> None:
    """Little-endian float64, C order, no header."""
    np.ascontiguousarray(values, dtype="<f8").tofile(_parent(path))


def read_raw(path, shape=None) -> np.ndarray:
    arr = np.fromfile(path, dtype="<f8").astype(np.float64)
    return arr.reshape(shape) if shape is not None else arr


def write_image(pixels, shape, path) -> None:
    """8-bit binary PGM (one channel) or PPM (three channels)."""
    h, w, c = shape
    data = np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    kind = {1: b"P5", 3: b"P6"}.get(c)
    if kind is None:
        raise ValueError("PGM/PPM export needs 1 or 3 channels")
    _parent(path).write_bytes(kind + b"\n%d %d\n255\n" % (w, h) + data.reshape(h, w, c).tobytes())


def diverging_rgb(delta, shape, scale: float | None = None) -> np.ndarray:
    """Map a signed delta image to RGB: blue for negative, white for zero, red for positive.

    Colour images are reduced to the per-pixel mean over channels first.
    ``scale`` defaults to the largest magnitude present (1 if all zero).
    """
    h, w, c = shape
    d = np.asarray(delta, dtype=np.float64).reshape(h, w, c).mean(axis=2)
    if scale is None:
        scale = float(np.abs(d).max()) or 1.0
    t = np.clip(d / scale, -1.0, 1.0)
    rgb = np.ones((h, w, 3))
    pos, neg = np.clip(t, 0, 1), np.clip(-t, 0, 1)
    rgb[..., 1] -= pos + neg
    rgb[..., 2] -= pos
    rgb[..., 0] -= neg
    return rgb


def write_delta_image(delta, shape, path, scale: float | None = None) -> None:
    h, w, _ = shape
    write_image(diverging_rgb(delta, shape, scale).ravel(), (h, w, 3), path)
