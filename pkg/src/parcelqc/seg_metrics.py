"""Per-structure Dice and SD95, label-protocol remapping, group aggregation.

SD95 is the 95th percentile (linear interpolation) of the pooled symmetric
nearest-neighbour distances between the two boundary sets, in mm. Boundary
voxels are label voxels with at least one 6-neighbour carrying another label
or lying outside the grid.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .nifti_io import LabelMap, require_same_geometry

__all__ = [
    "StructureMetrics",
    "ProtocolMap",
    "GroupMap",
    "GroupSummary",
    "dice",
    "boundary_mask",
    "boundary_voxels",
    "sd95",
    "remap_protocol",
    "evaluate_pair",
    "aggregate_groups",
    "write_metrics_csv",
    "read_metrics_csv",
    "default_protocol_map",
    "default_group_map",
]

UNGROUPED = "ungrouped"


@dataclass(frozen=True)
class StructureMetrics:
    subject_id: str
    label: int
    dice: float | None
    sd95_mm: float | None
    gt_voxels: int
    pred_voxels: int

    @property
    def dice_defined(self) -> bool:
        return self.dice is not None

    @property
    def sd95_defined(self) -> bool:
        return self.sd95_mm is not None


# ---------------------------------------------------------------------------
# single-label metrics


def dice(gt: LabelMap, pred: LabelMap, label: int) -> float | None:
    """``2|A∩B| / (|A|+|B|)``; None when the label is absent from both."""
    require_same_geometry(gt.geometry, pred.geometry)
    a = gt.labels == label
    b = pred.labels == label
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if total == 0:
        return None
    return 2.0 * int(np.count_nonzero(a & b)) / total


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Voxels whose 6-neighbourhood contains a different value or the grid edge.

    Computed for all labels at once; intersect with ``labels == l`` to get
    the boundary of a single label.
    """
    b = np.zeros(labels.shape, dtype=bool)
    for axis in range(labels.ndim):
        lo = [slice(None)] * labels.ndim
        hi = [slice(None)] * labels.ndim
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        diff = labels[tuple(lo)] != labels[tuple(hi)]
        b[tuple(lo)] |= diff
        b[tuple(hi)] |= diff
        first = [slice(None)] * labels.ndim
        last = [slice(None)] * labels.ndim
        first[axis] = 0
        last[axis] = -1
        b[tuple(first)] = True
        b[tuple(last)] = True
    return b


def boundary_voxels(m: LabelMap, label: int) -> np.ndarray:
    """``(k, 3)`` integer coordinates of the boundary of ``label``."""
    sel = m.labels == label
    if not sel.any():
        raise ValueError(f"label {label} absent")
    return np.argwhere(sel & boundary_mask(m.labels))


def _pooled_sd95(pts_a: np.ndarray, pts_b: np.ndarray) -> float:
    d_ab, _ = cKDTree(pts_b).query(pts_a, k=1)
    d_ba, _ = cKDTree(pts_a).query(pts_b, k=1)
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95.0))


def sd95(gt: LabelMap, pred: LabelMap, label: int) -> float | None:
    """SD95 in mm; None if the label is empty in either map."""
    require_same_geometry(gt.geometry, pred.geometry)
    if not (gt.labels == label).any() or not (pred.labels == label).any():
        return None
    spacing = np.asarray(gt.geometry.spacing)
    a = boundary_voxels(gt, label) * spacing
    b = boundary_voxels(pred, label) * spacing
    return _pooled_sd95(a, b)


# ---------------------------------------------------------------------------
# whole-map evaluation


def _boundary_points_by_label(labels: np.ndarray, spacing: np.ndarray):
    flat = np.flatnonzero((boundary_mask(labels) & (labels > 0)).ravel())
    lab = labels.ravel()[flat]
    order = np.argsort(lab, kind="stable")
    flat = flat[order]
    lab = lab[order]
    uniq, starts, counts = np.unique(lab, return_index=True, return_counts=True)
    coords = np.column_stack(np.unravel_index(flat, labels.shape)).astype(np.float64)
    coords *= spacing
    return {int(l): coords[s : s + c] for l, s, c in zip(uniq, starts, counts)}


def evaluate_pair(
    gt: LabelMap, pred: LabelMap, subject_id: str = "", threads: int = 1
) -> list[StructureMetrics]:
    """One record per nonzero label present in either map, sorted by label."""
    require_same_geometry(gt.geometry, pred.geometry)
    g = gt.labels
    p = pred.labels
    size = int(max(g.max(), p.max())) + 1
    gt_count = np.bincount(g.ravel(), minlength=size)
    pred_count = np.bincount(p.ravel(), minlength=size)
    same = g == p
    inter = np.bincount(g[same], minlength=size)
    present = np.flatnonzero(gt_count + pred_count)
    present = present[present > 0]

    spacing = np.asarray(gt.geometry.spacing, dtype=np.float64)
    gt_pts = _boundary_points_by_label(g, spacing)
    pred_pts = _boundary_points_by_label(p, spacing)

    def one(label):
        label = int(label)
        ng, np_ = int(gt_count[label]), int(pred_count[label])
        d = 2.0 * int(inter[label]) / (ng + np_)
        s = None
        if ng > 0 and np_ > 0:
            s = _pooled_sd95(gt_pts[label], pred_pts[label])
        return StructureMetrics(subject_id, label, d, s, ng, np_)

    if threads > 1 and len(present) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, present))
    return [one(l) for l in present]


# ---------------------------------------------------------------------------
# label protocols and groups


def _tsv_rows(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].rstrip("\r\n")
            if not line.strip():
                continue
            yield lineno, [c.strip() for c in line.split("\t")]


def _parse_int(cell, path, lineno, fieldname):
    try:
        return int(cell)
    except ValueError:
        raise ValueError(f"{path}:{lineno}: field {fieldname} is not an integer: {cell!r}") from None


@dataclass(frozen=True)
class ProtocolMap:
    pairs: tuple[tuple[int, int, str], ...]

    def __post_init__(self):
        pairs = tuple((int(s), int(t), str(n)) for s, t, n in self.pairs)
        sources = [s for s, _, _ in pairs]
        if len(set(sources)) != len(sources):
            raise ValueError("protocol map source labels must be unique")
        if any(not 0 <= v <= 0xFFFF for s, t, _ in pairs for v in (s, t)):
            raise ValueError("protocol map labels must lie in [0, 65535]")
        object.__setattr__(self, "pairs", pairs)

    @classmethod
    def from_tsv(cls, path) -> "ProtocolMap":
        pairs = []
        for lineno, cells in _tsv_rows(path):
            if len(cells) < 2:
                raise ValueError(f"{path}:{lineno}: expected source_label<TAB>target_label<TAB>name")
            src = _parse_int(cells[0], path, lineno, "source_label")
            dst = _parse_int(cells[1], path, lineno, "target_label")
            pairs.append((src, dst, cells[2] if len(cells) > 2 else ""))
        return cls(tuple(pairs))

    def lookup(self) -> np.ndarray:
        lut = np.zeros(0x10000, dtype=np.int32)
        for s, t, _ in self.pairs:
            lut[s] = t
        return lut

    def target_names(self) -> dict[int, str]:
        names: dict[int, str] = {}
        for _, t, n in self.pairs:
            names.setdefault(t, n)
        return names


def remap_protocol(m: LabelMap, pm: ProtocolMap) -> LabelMap:
    """Replace each label by its mapped target; unmapped labels become 0."""
    return LabelMap(m.geometry, pm.lookup()[m.labels])


@dataclass(frozen=True)
class GroupMap:
    pairs: tuple[tuple[int, str], ...]

    def __post_init__(self):
        pairs = tuple((int(l), str(g)) for l, g in self.pairs)
        labels = [l for l, _ in pairs]
        if len(set(labels)) != len(labels):
            raise ValueError("a label may belong to at most one group")
        object.__setattr__(self, "pairs", pairs)

    @classmethod
    def from_tsv(cls, path) -> "GroupMap":
        pairs = []
        for lineno, cells in _tsv_rows(path):
            if len(cells) < 2 or not cells[1]:
                raise ValueError(f"{path}:{lineno}: expected label<TAB>group")
            pairs.append((_parse_int(cells[0], path, lineno, "label"), cells[1]))
        return cls(tuple(pairs))

    def as_dict(self) -> dict[int, str]:
        return dict(self.pairs)

    def group_order(self) -> list[str]:
        return list(dict.fromkeys(g for _, g in self.pairs))


@dataclass(frozen=True)
class GroupSummary:
    group: str
    mean_dice: float | None
    mean_sd95: float | None
    n: int
    n_dice: int
    n_sd95: int


def _mean(values):
    return math.fsum(values) / len(values) if values else None


def aggregate_groups(metrics, gm: GroupMap | None = None) -> list[GroupSummary]:
    """Unweighted means of defined values per group.

    Groups come out in the group map's order, with ``ungrouped`` last;
    groups without any record are omitted.
    """
    lookup = gm.as_dict() if gm is not None else {}
    order = gm.group_order() if gm is not None else []
    buckets: dict[str, list[StructureMetrics]] = {}
    for rec in metrics:
        buckets.setdefault(lookup.get(rec.label, UNGROUPED), []).append(rec)
    out = []
    for group in order + [UNGROUPED]:
        recs = buckets.get(group)
        if not recs:
            continue
        d = [r.dice for r in recs if r.dice is not None]
        s = [r.sd95_mm for r in recs if r.sd95_mm is not None]
        out.append(GroupSummary(group, _mean(d), _mean(s), len(recs), len(d), len(s)))
    return out


def default_protocol_map(name: str = "neuromorphometrics") -> ProtocolMap:
    """Bundled map onto the common structure set (``neuromorphometrics`` or ``freesurfer``)."""
    ref = resources.files("parcelqc.data") / f"{name}_to_common.tsv"
    with resources.as_file(ref) as path:
        return ProtocolMap.from_tsv(path)


def default_group_map() -> GroupMap:
    ref = resources.files("parcelqc.data") / "neuromorphometrics_groups.tsv"
    with resources.as_file(ref) as path:
        return GroupMap.from_tsv(path)


# ---------------------------------------------------------------------------
# CSV surface

METRIC_FIELDS = ("subject_id", "label", "dice", "sd95_mm", "gt_voxels", "pred_voxels")


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_metrics_csv(metrics, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in metrics:
            w.writerow([r.subject_id, r.label, _fmt(r.dice), _fmt(r.sd95_mm), r.gt_voxels, r.pred_voxels])


def read_metrics_csv(path) -> list[StructureMetrics]:
    path = Path(path)
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != METRIC_FIELDS:
            raise ValueError(f"{path}: header must be {','.join(METRIC_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            vals = {}
            for name in ("dice", "sd95_mm"):
                cell = row[name].strip()
                try:
                    vals[name] = float(cell) if cell else None
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: field {name} is not a number: {cell!r}") from None
            ints = {}
            for name in ("label", "gt_voxels", "pred_voxels"):
                ints[name] = _parse_int(row[name], path, lineno, name)
            out.append(StructureMetrics(row["subject_id"], ints["label"], vals["dice"],
                                        vals["sd95_mm"], ints["gt_voxels"], ints["pred_voxels"]))
    return out
