"""Rendered outputs: metric figures for reports and per-task overlay PNGs.

Overlay color legend is fixed: red = cue boxes from the editor, green =
final predicted box, blue = ground truth.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image, ImageDraw

from .evaluation import MetricsReport
from .geometry import BBox, BinaryMask
from .imaging import ImageBuffer

CUE_COLOR = (255, 0, 0)
FINAL_COLOR = (0, 200, 0)
TRUTH_COLOR = (0, 80, 255)


def draw_overlay(image: ImageBuffer, cue_boxes=(), final_box: BBox | None = None,
                 truth_box: BBox | None = None, path: str | Path | None = None,
                 red_mask: BinaryMask | None = None) -> ImageBuffer:
    """Draw the cue/final/truth box legend onto a copy of the image."""
    im = Image.fromarray(image.pixels.copy())
    if red_mask is not None:
        # tint detected red pixels so threshold misses are visible
        arr = np.asarray(im).copy()
        arr[red_mask.bits] = (255, 160, 160)
        im = Image.fromarray(arr)
    drawer = ImageDraw.Draw(im)

    def outline(box: BBox, color, width=2):
        # PIL's rectangle is corner-inclusive; -1 keeps the half-open edge
        drawer.rectangle([box.x_min, box.y_min, box.x_max - 1, box.y_max - 1],
                         outline=color, width=width)

    for b in cue_boxes:
        outline(b, CUE_COLOR)
    if truth_box is not None:
        outline(truth_box, TRUTH_COLOR)
    if final_box is not None:
        outline(final_box, FINAL_COLOR)
    out = ImageBuffer(np.asarray(im))
    if path is not None:
        im.save(path, format="PNG")
    return out


def render_metrics_figure(reports: dict[str, dict[str, MetricsReport]],
                          path: str | Path) -> None:
    """Grouped bar chart of mIoU / Acc@0.5 / Acc@0.7 per model and dataset,
    with a per-task IoU histogram underneath when per-task values exist."""
    models = list(reports.keys())
    datasets: list[str] = []
    for per_model in reports.values():
        for ds in per_model:
            if ds not in datasets:
                datasets.append(ds)

    have_per_task = any(
        rep.per_task for per_model in reports.values() for rep in per_model.values()
    )
    n_rows = 2 if have_per_task else 1
    fig, axes = plt.subplots(n_rows, len(datasets), squeeze=False,
                             figsize=(5.0 * len(datasets), 3.2 * n_rows))

    metric_names = ["mIoU", "Acc@0.5", "Acc@0.7"]
    for col, ds in enumerate(datasets):
        ax = axes[0][col]
        x = np.arange(len(metric_names))
        width = 0.8 / max(len(models), 1)
        for mi, model in enumerate(models):
            rep = reports[model].get(ds)
            if rep is None:
                continue
            vals = [rep.miou, rep.acc_at.get(0.5, 0.0), rep.acc_at.get(0.7, 0.0)]
            ax.bar(x + mi * width, vals, width, label=model)
        ax.set_xticks(x + 0.4 - width / 2)
        ax.set_xticklabels(metric_names)
        ax.set_ylim(0.0, 1.05)
        ax.set_title(ds)
        ax.legend(fontsize=8)
        if have_per_task:
            hx = axes[1][col]
            for model in models:
                rep = reports[model].get(ds)
                if rep is None or not rep.per_task:
                    continue
                values = [v for _, v, _ in rep.per_task]
                hx.hist(values, bins=20, range=(0.0, 1.0), alpha=0.6, label=model)
            hx.set_xlabel("per-task IoU")
            hx.set_ylabel("tasks")
            hx.legend(fontsize=8)

    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
