"""Scalar kernels on 3D grids: per-region medians, box filtering, masked correlation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nifti_io import LabelMap, Volume3D, require_same_geometry

__all__ = [
    "RegionStats",
    "ZeroVarianceError",
    "region_medians",
    "box_filter",
    "box_filter_array",
    "pearson_correlation",
]


class ZeroVarianceError(ValueError):
    pass


@dataclass(frozen=True)
class RegionStats:
    label: int
    voxel_count: int
    median_intensity: float


def region_medians(intensity: Volume3D, seg: LabelMap) -> list[RegionStats]:
    """Exact median intensity of every nonzero label, sorted by label.

    Even-sized regions take the mean of the two middle order statistics.
    """
    require_same_geometry(intensity.geometry, seg.geometry)
    lab = seg.labels.ravel()
    val = intensity.voxels.ravel()
    idx = np.flatnonzero(lab)
    if idx.size == 0:
        raise ValueError("segmentation has no nonzero labels")
    lab = lab[idx]
    val = val[idx].astype(np.float64)
    order = np.lexsort((val, lab))
    lab = lab[order]
    val = val[order]
    labels, starts, counts = np.unique(lab, return_index=True, return_counts=True)
    hi = starts + counts // 2
    lo = starts + (counts - 1) // 2
    med = 0.5 * (val[lo] + val[hi])
    return [
        RegionStats(int(l), int(c), float(m)) for l, c, m in zip(labels, counts, med)
    ]


def _box_mean_1d(a: np.ndarray, radius: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    a = np.moveaxis(a, axis, 0)
    csum = np.zeros((n + 1,) + a.shape[1:], dtype=np.float64)
    np.cumsum(a, axis=0, out=csum[1:])
    i = np.arange(n)
    hi = np.minimum(i + radius, n - 1) + 1
    lo = np.maximum(i - radius, 0)
    count = (hi - lo).astype(np.float64)
    out = (csum[hi] - csum[lo]) / count.reshape((n,) + (1,) * (a.ndim - 1))
    return np.moveaxis(out, 0, axis)


def box_filter_array(a: np.ndarray, radius: int) -> np.ndarray:
    """Mean over the (2r+1)^3 cube clipped to the grid, as float64.

    The clipped cube is a box, so its mean factorises into three 1D running
    means each normalised by its own in-bounds count.
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    out = np.asarray(a, dtype=np.float64)
    if radius == 0:
        return out.copy()
    for axis in range(out.ndim):
        out = _box_mean_1d(out, radius, axis)
    return np.ascontiguousarray(out)


def box_filter(v: Volume3D, radius: int) -> Volume3D:
    return Volume3D(v.geometry, box_filter_array(v.voxels, int(radius)))


def pearson_correlation(a: Volume3D, b: Volume3D, mask: LabelMap) -> float:
    """Sample Pearson correlation of ``a`` and ``b`` over ``mask > 0``."""
    require_same_geometry(a.geometry, b.geometry)
    require_same_geometry(a.geometry, mask.geometry)
    sel = mask.labels > 0
    if np.count_nonzero(sel) < 2:
        raise ValueError("mask has fewer than 2 voxels")
    x = a.voxels[sel].astype(np.float64)
    y = b.voxels[sel].astype(np.float64)
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ZeroVarianceError("zero variance over mask")
    x -= x.mean()
    y -= y.mean()
    sxx = np.dot(x, x)
    syy = np.dot(y, y)
    r = np.dot(x, y) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))
