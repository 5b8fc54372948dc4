"""BEV figure rendering: radar points, ground truth and predictions.

Ground-truth boxes are drawn filled (blue), predictions as outlines (red),
radar points as white dots on a dark background.  Forward x points up.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import BevBox
from .radar_io import RadarPointCloud
from .spg import GridSpec

BACKGROUND = (24, 24, 28)
POINT_COLOR = (235, 235, 235)
GT_COLOR = (70, 100, 230)
PRED_COLOR = (230, 60, 50)


def _to_px(x: float, z: float, grid: GridSpec, scale: int, height: int):
    col = (z - grid.z_range[0]) / grid.cell_z * scale
    row = height - 1 - (x - grid.x_range[0]) / grid.cell_x * scale
    return row, col


def _draw_segment(img, r0, c0, r1, c1, color):
    h, w = img.shape[:2]
    steps = max(int(math.hypot(r1 - r0, c1 - c0) * 2), 1)
    ts = np.linspace(0.0, 1.0, steps + 1)
    rr = np.rint(r0 + (r1 - r0) * ts).astype(int)
    cc = np.rint(c0 + (c1 - c0) * ts).astype(int)
    keep = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    img[rr[keep], cc[keep]] = color


def _fill_polygon(img, corners_rc, color, alpha=0.55):
    h, w = img.shape[:2]
    rows = corners_rc[:, 0]
    cols = corners_rc[:, 1]
    r_lo, r_hi = max(0, int(rows.min())), min(h - 1, int(math.ceil(rows.max())))
    c_lo, c_hi = max(0, int(cols.min())), min(w - 1, int(math.ceil(cols.max())))
    if r_lo > r_hi or c_lo > c_hi:
        return
    rr, cc = np.meshgrid(np.arange(r_lo, r_hi + 1), np.arange(c_lo, c_hi + 1),
                         indexing="ij")
    inside = np.ones(rr.shape, dtype=bool)
    sign = 0.0
    n = len(corners_rc)
    for i in range(n):
        ar, ac = corners_rc[i]
        br, bc = corners_rc[(i + 1) % n]
        cross = (bc - ac) * (rr - ar) - (br - ar) * (cc - ac)
        if sign == 0.0:
            sign = 1.0 if cross.mean() >= 0 else -1.0
        inside &= (sign * cross) >= 0
    region = img[r_lo:r_hi + 1, c_lo:c_hi + 1]
    blended = (1 - alpha) * region + alpha * np.array(color)
    region[inside] = blended[inside].astype(np.uint8)


def _box_pixels(box: BevBox, grid: GridSpec, scale: int, height: int):
    return np.array([_to_px(x, z, grid, scale, height) for x, z in box.corners()])


def render_bev(cloud: RadarPointCloud, gts: list[BevBox], dets: list[BevBox],
               grid: GridSpec, scale: int = 4) -> np.ndarray:
    """Rasterize one frame; returns an H x W x 3 uint8 image."""
    height = grid.cells_x * scale
    width = grid.cells_z * scale
    img = np.empty((height, width, 3), dtype=np.uint8)
    img[:] = BACKGROUND

    for gt in gts:
        corners = _box_pixels(gt, grid, scale, height)
        _fill_polygon(img, corners, GT_COLOR)

    for p in cloud:
        r, c = _to_px(p.position.x, p.position.z, grid, scale, height)
        ri, ci = int(round(r)), int(round(c))
        if 0 <= ri < height and 0 <= ci < width:
            img[ri, ci] = POINT_COLOR

    for det in dets:
        corners = _box_pixels(det, grid, scale, height)
        for i in range(4):
            r0, c0 = corners[i]
            r1, c1 = corners[(i + 1) % 4]
            _draw_segment(img, r0, c0, r1, c1, PRED_COLOR)
    return img
