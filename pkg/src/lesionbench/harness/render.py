"""Figures: an example montage (PNG) and metric box plots (SVG).

Both writers are byte-deterministic for fixed inputs: the montage is built
pixel by pixel with Pillow, and the SVG is written with a fixed hash salt and
no date metadata.
"""
from __future__ import annotations

import numpy as np

from ..xmetrics import METRICS

METRIC_LABELS = {"roc_auc": "ROC-AUC", "ap": "mAP", "prec99": "PREC99"}
GT_COLOR = (230, 60, 40)


class RenderError(ValueError):
    pass


def _diverging_lut():
    from matplotlib import colormaps

    return (colormaps["RdBu_r"](np.linspace(0, 1, 256))[:, :3] * 255).round().astype(np.uint8)


def gray_tile(image):
    v = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    g = np.round(v * 255).astype(np.uint8)
    return np.stack([g, g, g], axis=-1)


def truth_tile(mask):
    """Lesion pixels in color on a black background."""
    m = np.asarray(mask).astype(bool)
    out = np.zeros((*m.shape, 3), dtype=np.uint8)
    out[m] = GT_COLOR
    return out


def heatmap_tile(relevance, lut=None):
    """Symmetric diverging colors: white at 0, red positive, blue negative."""
    lut = _diverging_lut() if lut is None else lut
    r = np.asarray(relevance, dtype=np.float64)
    scale = np.abs(r).max()
    t = np.full(r.shape, 0.5) if scale == 0 else 0.5 + 0.5 * r / scale
    return lut[np.clip(np.round(t * 255), 0, 255).astype(int)]


def montage_array(rows, tile_scale=2):
    """Stack rows of RGB tiles (all the same shape) into one image array."""
    if not rows or not rows[0]:
        raise RenderError("montage needs at least one row and one column")
    shape = rows[0][0].shape
    for row in rows:
        if len(row) != len(rows[0]) or any(t.shape != shape for t in row):
            raise RenderError("montage tiles must share one shape and every row the same length")
    grid = np.concatenate([np.concatenate(row, axis=1) for row in rows], axis=0)
    return np.repeat(np.repeat(grid, tile_scale, axis=0), tile_scale, axis=1)


def render_montage(path, samples, tile_scale=2):
    """Write a PNG with one row per sample.

    ``samples`` is a list of dicts with ``image``, ``ground_truth`` and
    ``heatmaps`` (method name -> relevance), all sharing one raster shape.
    Columns: input, ground truth, then one heatmap per method in the order
    of the first sample.  Returns the (height, width) of the written image.
    """
    from PIL import Image

    if not samples:
        raise RenderError("empty montage selection")
    methods = list(samples[0]["heatmaps"])
    lut = _diverging_lut()
    rows = []
    for s in samples:
        if list(s["heatmaps"]) != methods:
            raise RenderError("every montage row needs the same methods")
        rows.append([gray_tile(s["image"]), truth_tile(s["ground_truth"]),
                     *(heatmap_tile(s["heatmaps"][m], lut) for m in methods)])
    arr = montage_array(rows, tile_scale)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)
    return arr.shape[:2]


def box_stats(values):
    """Tukey box statistics: median, quartiles, 1.5 IQR whiskers, outliers."""
    from matplotlib.cbook import boxplot_stats

    st = boxplot_stats(np.asarray(values, dtype=np.float64), whis=1.5)[0]
    return {"med": float(st["med"]), "q1": float(st["q1"]), "q3": float(st["q3"]),
            "whislo": float(st["whislo"]), "whishi": float(st["whishi"]),
            "fliers": [float(v) for v in st["fliers"]]}


def render_boxplots(path, reports, min_samples=5):
    """Three panels (ROC-AUC, mAP, PREC99) with one box per method and dataset.

    ``reports`` maps a dataset name to its MetricsReport.  Returns the box
    statistics as ``{dataset: {method: {metric: stats}}}``.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    reports = dict(reports)
    if not reports:
        raise RenderError("no metrics to plot")
    for name, rep in reports.items():
        if not rep.methods:
            raise RenderError(f"{name}: no methods")
        for m in rep.methods:
            if len(rep.values(m, "roc_auc")) < min_samples:
                raise RenderError(f"{name}/{m}: box plots need at least {min_samples} samples")

    names = list(reports)
    methods = list(dict.fromkeys(m for rep in reports.values() for m in rep.methods))
    colors = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"]
    width = 0.8 / len(names)
    stats = {n: {m: {} for m in reports[n].methods} for n in names}

    with plt.rc_context({"svg.hashsalt": "lesionbench", "svg.fonttype": "path"}):
        fig, axes = plt.subplots(1, len(METRICS), figsize=(4.2 * len(METRICS), 4.2))
        for ax, metric in zip(axes, METRICS):
            for k, name in enumerate(names):
                rep = reports[name]
                bxp, pos = [], []
                for i, m in enumerate(methods):
                    if m not in rep.methods:
                        continue
                    st = box_stats(rep.values(m, metric))
                    stats[name][m][metric] = st
                    bxp.append({**st, "label": m})
                    pos.append(i + (k - (len(names) - 1) / 2) * width)
                art = ax.bxp(bxp, positions=pos, widths=width * 0.85, patch_artist=True,
                             flierprops={"marker": "o", "markersize": 2.5})
                for box in art["boxes"]:
                    box.set_facecolor(colors[k % len(colors)])
                    box.set_alpha(0.75)
            ax.set_xticks(range(len(methods)))
            ax.set_xticklabels(methods, rotation=60, ha="right", fontsize=8)
            ax.set_title(METRIC_LABELS[metric])
            ax.set_ylabel(METRIC_LABELS[metric])
            ax.set_xlabel("method")
            ax.set_ylim(-0.02, 1.02)
        if len(names) > 1:
            handles = [plt.Rectangle((0, 0), 1, 1, color=colors[k % len(colors)]) for k in range(len(names))]
            axes[-1].legend(handles, names, fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return stats
