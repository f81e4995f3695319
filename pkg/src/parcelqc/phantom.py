"""Synthetic parcellated phantoms for exercising the QC and metric code.

A phantom is an ellipsoidal "brain" split into Voronoi parcels around
seed voxels drawn inside the ellipsoid, with a FLAIR-like intensity per
parcel plus Gaussian noise.

Randomness comes from numpy's PCG64. ``SeedSequence(seed).spawn(2)`` yields
two independent streams: the first draws the parcel seeds, the second the
voxel noise. Lesion injection takes its own seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .nifti_io import LabelMap, Volume3D, VolumeGeometry, require_same_geometry

__all__ = [
    "PhantomSpec",
    "ellipsoid_mask",
    "generate_phantom",
    "inject_misalignment",
    "inject_lesions",
]


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (96, 112, 96)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_parcels: int = 132
    semi_axes: tuple[float, float, float] = (42.0, 50.0, 42.0)
    intensity_table: tuple[tuple[int, float, float], ...] | None = None
    noise_stddev: float = 5.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "semi_axes", tuple(float(a) for a in self.semi_axes))
        if self.intensity_table is not None:
            table = tuple((int(l), float(m), float(s)) for l, m, s in self.intensity_table)
            object.__setattr__(self, "intensity_table", table)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        if self.n_parcels < 1:
            raise ValueError("n_parcels must be >= 1")
        if self.noise_stddev < 0:
            raise ValueError("noise_stddev must be >= 0")
        for a, d in zip(self.semi_axes, self.dims):
            if not 0 < a <= (d - 1) / 2 + 0.5:
                raise ValueError(f"semi-axes {self.semi_axes} do not fit within dims {self.dims}")

    @classmethod
    def from_json(cls, path) -> "PhantomSpec":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError(f"{path}: phantom spec must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"{path}: unknown field(s) {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["spacing"] = list(self.spacing)
        d["semi_axes"] = list(self.semi_axes)
        if self.intensity_table is not None:
            d["intensity_table"] = [list(r) for r in self.intensity_table]
        return d

    def label_means(self) -> np.ndarray:
        """Per-label mean intensity, index 0 unused."""
        means = np.zeros(self.n_parcels + 1)
        means[1:] = np.linspace(10.0, 250.0, self.n_parcels)
        for label, mean, _ in self.intensity_table or ():
            if 1 <= label <= self.n_parcels:
                means[label] = mean
        return means

    def label_stddevs(self) -> np.ndarray:
        sd = np.zeros(self.n_parcels + 1)
        for label, _, s in self.intensity_table or ():
            if 1 <= label <= self.n_parcels:
                sd[label] = s
        return sd


def ellipsoid_mask(dims, semi_axes) -> np.ndarray:
    """Ellipsoid centred on the grid centre, semi-axes in voxels."""
    centre = [(d - 1) / 2.0 for d in dims]
    grids = np.ogrid[tuple(slice(0, d) for d in dims)]
    r2 = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, centre, semi_axes))
    return r2 <= 1.0


def _nearest_seed(points: np.ndarray, seeds: np.ndarray) -> np.ndarray:
    """Index of the nearest seed per point, ties to the lowest index."""
    n = len(seeds)
    k = min(n, 4)
    dist, idx = cKDTree(seeds).query(points, k=k)
    if k == 1:
        return idx.astype(np.int64)
    tied = dist == dist[:, :1]
    best = np.where(tied, idx, n).min(axis=1)
    if k < n:
        unresolved = np.flatnonzero(tied[:, -1])
        for j in unresolved:
            d2 = ((seeds - points[j]) ** 2).sum(axis=1)
            best[j] = int(np.flatnonzero(d2 == d2.min())[0])
    return best


def generate_phantom(spec: PhantomSpec) -> tuple[LabelMap, Volume3D]:
    """Voronoi-parcellated label map and matching noisy intensity volume."""
    mask = ellipsoid_mask(spec.dims, spec.semi_axes)
    inside = np.flatnonzero(mask.ravel())
    if spec.n_parcels > inside.size:
        raise ValueError(
            f"n_parcels={spec.n_parcels} exceeds the {inside.size} voxels inside the mask"
        )
    seed_stream, noise_stream = np.random.SeedSequence(spec.seed).spawn(2)
    rng = np.random.Generator(np.random.PCG64(seed_stream))
    seed_vox = rng.choice(inside, size=spec.n_parcels, replace=False)

    spacing = np.asarray(spec.spacing)
    pts = np.column_stack(np.unravel_index(inside, spec.dims)) * spacing
    seeds = np.column_stack(np.unravel_index(seed_vox, spec.dims)) * spacing
    labels = np.zeros(int(np.prod(spec.dims)), dtype=np.int32)
    labels[inside] = _nearest_seed(pts, seeds) + 1
    labels = labels.reshape(spec.dims)

    means = spec.label_means()
    spread = np.hypot(spec.label_stddevs(), spec.noise_stddev)
    noise = np.random.Generator(np.random.PCG64(noise_stream)).standard_normal(inside.size)
    lab_in = labels.ravel()[inside]
    vox = np.zeros(labels.size, dtype=np.float64)
    vox[inside] = means[lab_in] + spread[lab_in] * noise
    geom = VolumeGeometry(spec.dims, spec.spacing)
    return LabelMap(geom, labels), Volume3D(geom, vox.reshape(spec.dims).astype(np.float32))


def inject_misalignment(m: LabelMap, shift=(0, 0, 0), rot_z_degrees: float = 0.0) -> LabelMap:
    """Translate then rotate about the grid centre (z axis), nearest neighbour.

    Output voxel ``p`` takes the source label at
    ``R^-1 (p - c) + c - shift``; sources outside the grid give 0.
    """
    dims = np.asarray(m.geometry.dims)
    c = (dims - 1) / 2.0
    theta = math.radians(rot_z_degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    x, y, z = np.indices(m.geometry.dims, dtype=np.float64)
    dx, dy = x - c[0], y - c[1]
    # inverse rotation
    sx = cos * dx + sin * dy + c[0] - shift[0]
    sy = -sin * dx + cos * dy + c[1] - shift[1]
    sz = z - shift[2]
    src = [np.rint(a).astype(np.int64) for a in (sx, sy, sz)]
    valid = np.ones(m.geometry.dims, dtype=bool)
    for a, d in zip(src, dims):
        valid &= (a >= 0) & (a < d)
    out = np.zeros(m.geometry.dims, dtype=np.int32)
    out[valid] = m.labels[src[0][valid], src[1][valid], src[2][valid]]
    return LabelMap(m.geometry, out)


def inject_lesions(
    v: Volume3D,
    m: LabelMap,
    host_labels,
    n_lesions: int,
    radius_vox: int,
    delta: float,
    seed: int = 0,
) -> Volume3D:
    """Add ``delta`` inside spherical blobs centred in, and clipped to, host labels.

    Overlapping blobs raise a voxel only once.
    """
    require_same_geometry(v.geometry, m.geometry)
    host = np.isin(m.labels, np.asarray(sorted(host_labels), dtype=np.int64))
    if n_lesions <= 0:
        return v
    candidates = np.flatnonzero(host.ravel())
    if candidates.size == 0:
        raise ValueError(f"no voxels carry host labels {sorted(host_labels)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    centres = rng.choice(candidates, size=n_lesions, replace=n_lesions > candidates.size)
    dims = m.geometry.dims
    r = int(radius_vox)
    lesion = np.zeros(dims, dtype=bool)
    for centre in np.column_stack(np.unravel_index(centres, dims)):
        lo = np.maximum(centre - r, 0)
        hi = np.minimum(centre + r + 1, dims)
        box = tuple(slice(a, b) for a, b in zip(lo, hi))
        grid = np.ogrid[box]
        d2 = sum((g - c) ** 2 for g, c in zip(grid, centre))
        lesion[box] |= d2 <= r * r
    lesion &= host
    out = v.voxels.astype(np.float64)
    out[lesion] += delta
    return Volume3D(v.geometry, out.astype(v.voxels.dtype))
