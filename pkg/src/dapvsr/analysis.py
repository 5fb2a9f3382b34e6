"""Offset analytics and the temporal-propagation study.

Offset dumps are level-0 fields in LR pixel units; analysis converts to the
high-resolution domain via the mandatory ``scale_to_hr`` metadata (x4). The
1-D magnitude histogram is derived from the 2-D displacement histogram by
re-binning each cell at its center magnitude, so the two are consistent by
construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import cell as cell_mod
from . import metrics as metrics_mod
from . import tensor as T
from .errors import ShapeError

MAG_BINS = 64
MAG_RANGE = (0.0, 40.0)
GRID_BINS = 81
GRID_RANGE = (-40.0, 40.0)


def offset_magnitudes(grid: np.ndarray, scale_to_hr: float = 1.0) -> np.ndarray:
    """Flat per-sample displacement magnitudes of one (2k,H,W) field."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or grid.shape[0] % 2:
        raise ShapeError(f"expected a (2k,H,W) offset grid, got {grid.shape}")
    dx = grid[0::2] * scale_to_hr
    dy = grid[1::2] * scale_to_hr
    return np.hypot(dx, dy).reshape(-1)


def _bin_index(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


@dataclass
class OffsetHistograms:
    hist2d: np.ndarray     # (GRID_BINS, GRID_BINS), [dx_bin, dy_bin]
    hist1d: np.ndarray     # (MAG_BINS,), derived from hist2d
    dx_centers: np.ndarray
    dy_centers: np.ndarray
    mag_edges: np.ndarray
    total: int

    @property
    def mode_2d(self):
        i, j = np.unravel_index(int(np.argmax(self.hist2d)), self.hist2d.shape)
        return float(self.dx_centers[i]), float(self.dy_centers[j])

    def to_dict(self) -> dict:
        return {
            "schema_version": cell_mod.SCHEMA_VERSION,
            "total": self.total,
            "hist2d": self.hist2d.tolist(),
            "hist1d": self.hist1d.tolist(),
            "dx_centers": self.dx_centers.tolist(),
            "dy_centers": self.dy_centers.tolist(),
            "mag_edges": self.mag_edges.tolist(),
            "mode_2d": list(self.mode_2d),
        }


def rebin_magnitude(hist2d: np.ndarray, dx_centers: np.ndarray, dy_centers: np.ndarray,
                    mag_bins: int = MAG_BINS, mag_range=MAG_RANGE) -> np.ndarray:
    """Collapse a 2-D displacement histogram onto magnitude bins."""
    mags = np.hypot(dx_centers[:, None], dy_centers[None, :])
    idx = _bin_index(mags.reshape(-1), mag_range[0], mag_range[1], mag_bins)
    out = np.zeros(mag_bins, dtype=np.int64)
    np.add.at(out, idx, hist2d.reshape(-1).astype(np.int64))
    return out


def offset_histograms(grids, scale_to_hr: float | None,
                      mag_bins: int = MAG_BINS, mag_range=MAG_RANGE,
                      grid_bins: int = GRID_BINS, grid_range=GRID_RANGE) -> OffsetHistograms:
    """Accumulate displacement statistics over dumped offset fields.

    Counts cover every pixel, point and frame; out-of-range displacements
    land in the edge bins so the total stays exact.
    """
    if scale_to_hr is None:
        raise ValueError("offset dumps need scale metadata (scale_to_hr)")
    lo, hi = grid_range
    hist2d = np.zeros((grid_bins, grid_bins), dtype=np.int64)
    total = 0
    for grid in grids:
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 3 or grid.shape[0] % 2:
            raise ShapeError(f"expected a (2k,H,W) offset grid, got {grid.shape}")
        dx = (grid[0::2] * scale_to_hr).reshape(-1)
        dy = (grid[1::2] * scale_to_hr).reshape(-1)
        ix = _bin_index(dx, lo, hi, grid_bins)
        iy = _bin_index(dy, lo, hi, grid_bins)
        np.add.at(hist2d, (ix, iy), 1)
        total += dx.size
    width = (hi - lo) / grid_bins
    centers = lo + (np.arange(grid_bins) + 0.5) * width
    hist1d = rebin_magnitude(hist2d, centers, centers, mag_bins, mag_range)
    mag_edges = np.linspace(mag_range[0], mag_range[1], mag_bins + 1)
    return OffsetHistograms(hist2d=hist2d, hist1d=hist1d, dx_centers=centers,
                            dy_centers=centers, mag_edges=mag_edges, total=total)


# ---------------------------------------------------------------------------
# Sampling-location export
# ---------------------------------------------------------------------------

def export_sample_points(x_t, x_prev, weights, cfg, pixels) -> dict:
    """Sampled key/value coordinates in the previous frame per query pixel.

    ``pixels`` are LR ``(x, y)`` pairs. Coordinates come out clamped to the
    frame rectangle, in both LR and HR (x4) units, JSON-ready.
    """
    field = cell_mod.compute_offsets(x_t, x_prev, weights, cfg)
    grid = field.grid.data.astype(np.float64)
    k2, h, w = grid.shape
    k = k2 // 2
    queries = []
    for px, py in pixels:
        if not (0 <= px < w and 0 <= py < h):
            raise ShapeError(f"query pixel ({px}, {py}) outside {w}x{h}")
        points_lr = []
        for i in range(k):
            cx = float(np.clip(px + grid[2 * i, py, px], 0.0, w - 1.0))
            cy = float(np.clip(py + grid[2 * i + 1, py, px], 0.0, h - 1.0))
            points_lr.append([cx, cy])
        queries.append({
            "pixel": [int(px), int(py)],
            "pixel_hr": [int(px) * cfg.r, int(py) * cfg.r],
            "points_lr": points_lr,
            "points_hr": [[c * cfg.r for c in pt] for pt in points_lr],
        })
    return {
        "schema_version": cell_mod.SCHEMA_VERSION,
        "k": k,
        "scale_to_hr": cfg.r,
        "units": "hr_pixels",
        "queries": queries,
    }


# ---------------------------------------------------------------------------
# Temporal propagation
# ---------------------------------------------------------------------------

def propagation_study(lr_frames, gt_frames, weights, cfg,
                      interval: int) -> list:
    """PSNR curves from cold starts at every ``interval`` frames.

    For each start ``s`` the model runs from a fresh hidden state at frame
    ``s`` to the end; rows are ``(start, frame, psnr)`` with outputs clamped
    to [0,1] before scoring.
    """
    if interval < 1:
        raise ValueError("interval must be positive")
    if len(lr_frames) != len(gt_frames):
        raise ShapeError(f"{len(lr_frames)} LR vs {len(gt_frames)} GT frames")
    rows = []
    total = len(lr_frames)
    for start in range(0, total, interval):
        outputs = cell_mod.run_sequence(lr_frames[start:], weights, cfg, "forward")
        for offset, y in enumerate(outputs):
            pred = np.clip(y.data, 0.0, 1.0)
            rows.append((start, start + offset,
                         metrics_mod.psnr(gt_frames[start + offset], pred)))
    return rows
