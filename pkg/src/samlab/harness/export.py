"""Histogram export of |w| per parameter tag."""

import csv

import numpy as np

from ..nn import TAGS


def param_histograms(model, bins):
    """Rows ``(tag, bin_lo, bin_hi, count)`` with uniform edges on [0, max|w|] per tag.

    A tag whose values are all zero uses edges on [0, 1]; a tag with no
    parameters yields no rows.
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    rows = []
    for tag in TAGS:
        parts = [model.params[v.offset:v.stop] for v in model.registry if v.tag == tag]
        if not parts:
            continue
        a = np.abs(np.concatenate(parts))
        hi = float(a.max())
        if hi == 0.0:
            hi = 1.0
        counts, edges = np.histogram(a, bins=bins, range=(0.0, hi))
        for i in range(bins):
            rows.append((tag, float(edges[i]), float(edges[i + 1]), int(counts[i])))
    return rows


def export_param_histograms(checkpoint, bins, out_path):
    """Write the histogram CSV for a loaded checkpoint (or a model)."""
    model = getattr(checkpoint, "model", checkpoint)
    rows = param_histograms(model, bins)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["tag", "bin_lo", "bin_hi", "count"])
        for tag, lo, hi, n in rows:
            w.writerow([tag, f"{lo:.17g}", f"{hi:.17g}", n])
    return rows
