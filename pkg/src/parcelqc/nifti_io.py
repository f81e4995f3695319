"""NIfTI-1 reading and writing for intensity volumes and label maps.

Only single-file NIfTI-1 (``.nii`` / ``.nii.gz``) 3D images are handled.
Arrays are held in memory indexed ``[x, y, z]``; on disk the payload is
x-fastest, i.e. flat index ``x + nx * (y + ny * z)``.
"""

from __future__ import annotations

import gzip
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NiftiError",
    "GeometryMismatchError",
    "VolumeGeometry",
    "Volume3D",
    "LabelMap",
    "read_volume",
    "read_labelmap",
    "write_volume",
    "geometry_match",
    "require_same_geometry",
]

HEADER_SIZE = 348
VOX_OFFSET = 352

# datatype code -> numpy dtype (byte order applied at read time)
DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    512: np.dtype(np.uint16),
}
DTYPE_CODES = {dt: code for code, dt in DATATYPES.items()}

HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "i4"),
        ("session_error", "i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "i2", (8,)),
        ("intent_p1", "f4"),
        ("intent_p2", "f4"),
        ("intent_p3", "f4"),
        ("intent_code", "i2"),
        ("datatype", "i2"),
        ("bitpix", "i2"),
        ("slice_start", "i2"),
        ("pixdim", "f4", (8,)),
        ("vox_offset", "f4"),
        ("scl_slope", "f4"),
        ("scl_inter", "f4"),
        ("slice_end", "i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "f4"),
        ("cal_min", "f4"),
        ("slice_duration", "f4"),
        ("toffset", "f4"),
        ("glmax", "i4"),
        ("glmin", "i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "i2"),
        ("sform_code", "i2"),
        ("quatern_b", "f4"),
        ("quatern_c", "f4"),
        ("quatern_d", "f4"),
        ("qoffset_x", "f4"),
        ("qoffset_y", "f4"),
        ("qoffset_z", "f4"),
        ("srow_x", "f4", (4,)),
        ("srow_y", "f4", (4,)),
        ("srow_z", "f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert HEADER_DTYPE.itemsize == HEADER_SIZE


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI file."""


class GeometryMismatchError(ValueError):
    """Two grids that must coincide do not."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class VolumeGeometry:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    affine: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")
        if self.affine is None:
            affine = np.diag([*spacing, 1.0])
        else:
            affine = np.array(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        if not np.array_equal(affine[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("affine last row must be (0, 0, 0, 1)")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", _readonly(affine))

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def __eq__(self, other):
        if not isinstance(other, VolumeGeometry):
            return NotImplemented
        return geometry_match(self, other, 0.0)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar intensity grid.

    Voxels read from disk are float32. Kernels that derive new volumes
    (filtering, synthesis) return float64 so downstream comparisons are not
    limited by single-precision rounding.
    """

    geometry: VolumeGeometry
    voxels: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if not np.issubdtype(v.dtype, np.floating):
            v = v.astype(np.float32)
        if v.shape != self.geometry.dims:
            raise ValueError(f"voxel array shape {v.shape} != dims {self.geometry.dims}")
        if not np.all(np.isfinite(v)):
            raise ValueError("volume contains non-finite values")
        c = np.ascontiguousarray(v)
        if c is v and c.flags.writeable:
            c = c.copy()
        object.__setattr__(self, "voxels", _readonly(c))

    @classmethod
    def from_array(cls, voxels, spacing=(1.0, 1.0, 1.0), affine=None) -> "Volume3D":
        v = np.asarray(voxels)
        return cls(VolumeGeometry(v.shape, spacing, affine), v)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer label grid; 0 is background."""

    geometry: VolumeGeometry
    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.shape != self.geometry.dims:
            raise ValueError(f"label array shape {lab.shape} != dims {self.geometry.dims}")
        if not np.issubdtype(lab.dtype, np.integer):
            raise ValueError(f"labels must be integers, got {lab.dtype}")
        if lab.size and (lab.min() < 0 or lab.max() > 0xFFFF):
            raise ValueError("label values must lie in [0, 65535]")
        c = np.ascontiguousarray(lab, dtype=np.int32)
        if c is lab and c.flags.writeable:
            c = c.copy()
        object.__setattr__(self, "labels", _readonly(c))

    @classmethod
    def from_array(cls, labels, spacing=(1.0, 1.0, 1.0), affine=None) -> "LabelMap":
        lab = np.asarray(labels)
        return cls(VolumeGeometry(lab.shape, spacing, affine), lab)

    def present_labels(self) -> np.ndarray:
        """Sorted distinct nonzero labels."""
        counts = np.bincount(self.labels.ravel())
        nz = np.flatnonzero(counts)
        return nz[nz > 0]


def geometry_match(a: VolumeGeometry, b: VolumeGeometry, tol: float = 1e-6) -> bool:
    if a.dims != b.dims:
        return False
    if not np.allclose(a.spacing, b.spacing, rtol=0.0, atol=tol):
        return False
    return bool(np.allclose(a.affine, b.affine, rtol=0.0, atol=tol))


def require_same_geometry(a: VolumeGeometry, b: VolumeGeometry, tol: float = 1e-6) -> None:
    if not geometry_match(a, b, tol):
        raise GeometryMismatchError(
            f"geometry mismatch: dims {a.dims} vs {b.dims}, spacing {a.spacing} vs {b.spacing}"
        )


# ---------------------------------------------------------------------------
# reading


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise NiftiError(f"{path}: truncated or corrupt gzip stream") from exc
    return raw


def _parse_header(raw: bytes, path) -> np.ndarray:
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: truncated header ({len(raw)} bytes)")
    for order in ("<", ">"):
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE.newbyteorder(order))[0]
        if hdr["sizeof_hdr"] == HEADER_SIZE:
            break
    else:
        raise NiftiError(f"{path}: sizeof_hdr is not 348")
    if hdr["magic"] not in (b"n+1", b"ni1"):
        # numpy strips trailing NULs from S4 fields
        raise NiftiError(f"{path}: bad magic {bytes(raw[344:348])!r}")
    if hdr["magic"] == b"ni1":
        raise NiftiError(f"{path}: two-file NIfTI (.hdr/.img) is not supported")
    return hdr


def quaternion_affine(hdr) -> np.ndarray:
    """Voxel-to-world matrix from the qform fields (NIfTI-1 method 2)."""
    b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
    a2 = 1.0 - (b * b + c * c + d * d)
    a = 0.0 if a2 < 1e-7 else np.sqrt(a2)
    if a2 < 1e-7:
        # normalise (b, c, d) for a 180 degree rotation
        n = np.sqrt(b * b + c * c + d * d)
        b, c, d = b / n, c / n, d / n
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    pixdim = hdr["pixdim"].astype(np.float64)
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    zooms = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    aff = np.eye(4)
    aff[:3, :3] = rot * zooms
    aff[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return aff


def _geometry_from_header(hdr, dims) -> VolumeGeometry:
    spacing = tuple(abs(float(p)) for p in hdr["pixdim"][1:4])
    spacing = tuple(s if s > 0 else 1.0 for s in spacing)
    if hdr["sform_code"] > 0:
        aff = np.eye(4)
        aff[0] = hdr["srow_x"]
        aff[1] = hdr["srow_y"]
        aff[2] = hdr["srow_z"]
    elif hdr["qform_code"] > 0:
        aff = quaternion_affine(hdr)
    else:
        aff = np.diag([*spacing, 1.0])
    return VolumeGeometry(dims, spacing, aff)


def _read_raw(path):
    raw = _read_bytes(path)
    hdr = _parse_header(raw, path)
    dim = [int(x) for x in hdr["dim"]]
    ndim = dim[0]
    if not 3 <= ndim <= 7 or any(x != 1 for x in dim[4 : ndim + 1]):
        raise NiftiError(f"{path}: dimensionality {ndim} is not 3")
    dims = tuple(dim[1:4])
    if any(x < 1 for x in dims):
        raise NiftiError(f"{path}: invalid dim field {dims}")
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise NiftiError(f"{path}: unsupported datatype code {code}")
    dtype = DATATYPES[code].newbyteorder(hdr.dtype["sizeof_hdr"].byteorder)
    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE:
        offset = VOX_OFFSET
    nbytes = int(np.prod(dims)) * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise NiftiError(f"{path}: truncated payload ({len(raw) - offset} of {nbytes} bytes)")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=offset)
    data = data.reshape(dims, order="F")
    return hdr, dims, data


def _scaling(hdr):
    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if slope == 0.0 or not np.isfinite(slope):
        return None
    if not np.isfinite(inter):
        inter = 0.0
    if slope == 1.0 and inter == 0.0:
        return None
    return slope, inter


def read_volume(path) -> Volume3D:
    hdr, dims, data = _read_raw(path)
    scale = _scaling(hdr)
    if scale is None:
        voxels = data.astype(np.float32)
    else:
        voxels = (data.astype(np.float64) * scale[0] + scale[1]).astype(np.float32)
    if not np.all(np.isfinite(voxels)):
        raise NiftiError(f"{path}: volume contains non-finite values")
    return Volume3D(_geometry_from_header(hdr, dims), voxels)


def read_labelmap(path) -> LabelMap:
    hdr, dims, data = _read_raw(path)
    scale = _scaling(hdr)
    if scale is not None:
        data = data.astype(np.float64) * scale[0] + scale[1]
    if np.issubdtype(data.dtype, np.floating):
        if not np.all(np.isfinite(data)):
            raise NiftiError(f"{path}: non-finite label value")
        rounded = np.rint(data)
        bad = np.abs(data - rounded) > 1e-6
        if bad.any():
            v = data[bad].flat[0]
            raise NiftiError(f"{path}: non-integral label {v!r}")
        data = rounded
    if data.size and data.min() < 0:
        raise NiftiError(f"{path}: negative label {data.min()}")
    if data.size and data.max() > 0xFFFF:
        raise NiftiError(f"{path}: label {data.max()} does not fit in 16 bits")
    return LabelMap(_geometry_from_header(hdr, dims), data.astype(np.int32))


# ---------------------------------------------------------------------------
# writing


def _header_bytes(geom: VolumeGeometry, dtype: np.dtype, data) -> bytes:
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *geom.dims, 1, 1, 1, 1]
    hdr["datatype"] = DTYPE_CODES[dtype]
    hdr["bitpix"] = dtype.itemsize * 8
    hdr["pixdim"] = [1.0, *geom.spacing, 0.0, 0.0, 0.0, 0.0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    if data.size:
        hdr["cal_min"] = float(data.min())
        hdr["cal_max"] = float(data.max())
    hdr["qform_code"] = 0
    hdr["sform_code"] = 2  # aligned to a common space
    hdr["srow_x"] = geom.affine[0]
    hdr["srow_y"] = geom.affine[1]
    hdr["srow_z"] = geom.affine[2]
    hdr["magic"] = b"n+1"
    return hdr.tobytes()


def write_volume(v: Volume3D | LabelMap, path, dtype=None) -> None:
    """Write a volume (default float32) or label map (default uint16)."""
    if isinstance(v, LabelMap):
        data = v.labels
        dtype = np.dtype(dtype or np.uint16)
    elif isinstance(v, Volume3D):
        data = v.voxels
        dtype = np.dtype(dtype or np.float32)
    else:
        raise TypeError(f"cannot write {type(v).__name__}")
    if dtype not in DTYPE_CODES:
        raise ValueError(f"unsupported output datatype {dtype}")
    if np.issubdtype(dtype, np.integer):
        info = np.iinfo(dtype)
        if data.size and (data.min() < info.min or data.max() > info.max):
            raise ValueError(f"values do not fit in {dtype}")
    payload = np.asarray(data).astype(dtype.newbyteorder("<")).ravel(order="F").tobytes()
    blob = _header_bytes(v.geometry, dtype, data) + b"\x00" * 4 + payload
    path = os.fspath(path)
    try:
        if path.endswith(".gz"):
            # mtime=0 keeps gzip output byte-reproducible
            with open(path, "wb") as raw, gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as fh:
                fh.write(blob)
        else:
            with open(path, "wb") as fh:
                fh.write(blob)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}", path) from exc
