"""Spatial distribution maps of boxes over the normalized image plane.

Each box paints its normalized extent onto a fixed grid, fractionally on
boundary cells, so a full-image box adds exactly 1 to every cell.
Difference maps compare a prediction map against a ground-truth map after
normalizing each by its box count; the log scale compresses the heavy tails.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .datamodel import Box, Dataset, DetectionSet
from .errors import DetboundError


@dataclass
class GridMap:
    cells: np.ndarray
    scale: str = "linear"
    box_count: int = 0

    @property
    def resolution(self) -> int:
        return self.cells.shape[0]


def _axis_coverage(lo: float, hi: float, resolution: int) -> np.ndarray:
    # cell j spans [j/R, (j+1)/R); coverage is the covered fraction of the cell
    edges = np.arange(resolution + 1) / resolution
    overlap = np.minimum(hi, edges[1:]) - np.maximum(lo, edges[:-1])
    return np.clip(overlap * resolution, 0.0, 1.0)


def box_distribution_map(
    boxes: Iterable[tuple[Box, int, int]], resolution: int = 256
) -> GridMap:
    """Accumulate (box, image width, image height) triples onto the grid."""
    if resolution < 1:
        raise DetboundError(f"grid resolution must be >= 1, got {resolution}")
    cells = np.zeros((resolution, resolution), dtype=np.float64)
    count = 0
    for box, width, height in boxes:
        x0 = max(box.x / width, 0.0)
        x1 = min(box.x2 / width, 1.0)
        y0 = max(box.y / height, 0.0)
        y1 = min(box.y2 / height, 1.0)
        if x1 <= x0 or y1 <= y0:
            continue
        cov_x = _axis_coverage(x0, x1, resolution)
        cov_y = _axis_coverage(y0, y1, resolution)
        cells += np.outer(cov_y, cov_x)
        count += 1
    return GridMap(cells=cells, scale="linear", box_count=count)


def diff_map(pred: GridMap, gt: GridMap, scale: str = "linear") -> GridMap:
    """pred minus gt after per-map normalization by box count."""
    if pred.cells.shape != gt.cells.shape:
        raise DetboundError("grid resolutions differ")
    if scale not in ("linear", "log"):
        raise DetboundError(f"scale must be 'linear' or 'log', got {scale!r}")
    p = pred.cells / pred.box_count if pred.box_count else pred.cells
    g = gt.cells / gt.box_count if gt.box_count else gt.cells
    diff = p - g
    if scale == "log":
        n = diff.size
        diff = np.sign(diff) * np.log1p(np.abs(diff) * n)
    return GridMap(cells=diff, scale=scale, box_count=pred.box_count)


def annotation_boxes(ds: Dataset) -> Iterable[tuple[Box, int, int]]:
    for ann in ds.annotations:
        img = ds.image(ann.image_id)
        yield ann.bbox, img.width, img.height


def detection_boxes(dets: DetectionSet, ds: Dataset) -> Iterable[tuple[Box, int, int]]:
    for det in dets.detections:
        img = ds.image(det.image_id)
        yield det.bbox, img.width, img.height


def grid_to_csv(grid: GridMap, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        for row in grid.cells:
            writer.writerow([f"{v:.6f}" for v in row])


def render_heatmap(grid: GridMap, path: str | Path, title: str = "") -> None:
    """Render the grid as a PNG heatmap (diverging palette for signed maps)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 6))
    signed = bool((grid.cells < 0).any())
    if signed:
        bound = float(np.abs(grid.cells).max()) or 1.0
        im = ax.imshow(grid.cells, cmap="coolwarm", vmin=-bound, vmax=bound)
    else:
        im = ax.imshow(grid.cells, cmap="viridis")
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": "detbound"})
    plt.close(fig)
