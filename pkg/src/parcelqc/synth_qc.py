"""Segmentation-to-FLAIR misalignment scoring.

A synthetic FLAIR-like image is rebuilt from the segmentation alone: each
structure is painted with the median FLAIR intensity observed inside it and
the result is box-filtered to mimic partial-volume blur. The Pearson
correlation between that image and the real FLAIR, taken over labeled
voxels, is the alignment score; well-aligned pairs score close to 1.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nifti_io import LabelMap, Volume3D, read_labelmap, read_volume, require_same_geometry
from .volume_core import box_filter_array, pearson_correlation, region_medians

__all__ = [
    "ScoreRecord",
    "QcScoreSet",
    "synthesize_reference",
    "alignment_score",
    "batch_scores",
    "read_cohort_manifest",
    "write_scores_csv",
    "read_scores_csv",
]


@dataclass(frozen=True)
class ScoreRecord:
    subject_id: str
    score: float | None
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class QcScoreSet:
    """Per-subject alignment scores in cohort order, failures included."""

    records: list[ScoreRecord] = field(default_factory=list)

    def __post_init__(self):
        ids = [r.subject_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate subject ids in score set")
        for r in self.records:
            if r.ok and (r.score is None or not math.isfinite(r.score)):
                raise ValueError(f"{r.subject_id}: score must be finite")

    @classmethod
    def from_scores(cls, ids, scores) -> "QcScoreSet":
        return cls([ScoreRecord(str(i), float(s)) for i, s in zip(ids, scores)])

    @property
    def entries(self) -> list[tuple[str, float]]:
        return [(r.subject_id, r.score) for r in self.records if r.ok]

    @property
    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.records if r.ok], dtype=np.float64)

    @property
    def errors(self) -> list[ScoreRecord]:
        return [r for r in self.records if not r.ok]

    @property
    def partial_failure(self) -> bool:
        return bool(self.errors)

    def __len__(self):
        return len(self.records)


def synthesize_reference(flair: Volume3D, seg: LabelMap, filter_radius: int = 1) -> Volume3D:
    stats = region_medians(flair, seg)
    lut = np.zeros(int(seg.labels.max()) + 1, dtype=np.float64)
    for s in stats:
        lut[s.label] = s.median_intensity
    synthetic = lut[seg.labels]
    return Volume3D(flair.geometry, box_filter_array(synthetic, int(filter_radius)))


def alignment_score(flair: Volume3D, seg: LabelMap, filter_radius: int = 1) -> float:
    require_same_geometry(flair.geometry, seg.geometry)
    ref = synthesize_reference(flair, seg, filter_radius)
    return pearson_correlation(flair, ref, seg)


def _score_one(item, filter_radius):
    subject_id, flair_path, seg_path = item
    try:
        flair = read_volume(flair_path)
        seg = read_labelmap(seg_path)
        return ScoreRecord(subject_id, alignment_score(flair, seg, filter_radius))
    except (OSError, ValueError) as exc:
        msg = " ".join(str(exc).split())
        return ScoreRecord(subject_id, None, f"error: {type(exc).__name__}: {msg}")


def batch_scores(cohort, filter_radius: int = 1, threads: int = 1) -> QcScoreSet:
    """Score every ``(subject_id, flair_path, seg_path)`` triple.

    Unreadable or inconsistent subjects become error records; the batch
    keeps going. Output order is the input order regardless of ``threads``.
    """
    cohort = list(cohort)
    if threads > 1 and len(cohort) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(lambda it: _score_one(it, filter_radius), cohort))
    else:
        records = [_score_one(it, filter_radius) for it in cohort]
    return QcScoreSet(records)


# ---------------------------------------------------------------------------
# CSV surfaces

MANIFEST_FIELDS = ("subject_id", "flair_path", "seg_path")
SCORE_FIELDS = ("subject_id", "score", "status")


def _check_header(reader, expected, path):
    if reader.fieldnames is None or tuple(reader.fieldnames[: len(expected)]) != expected:
        raise ValueError(f"{path}: header must be {','.join(expected)}, got {reader.fieldnames}")


def read_cohort_manifest(path) -> list[tuple[str, Path, Path]]:
    """Rows of ``subject_id,flair_path,seg_path``; relative paths resolve
    against the manifest's directory."""
    path = Path(path)
    base = path.parent
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader, MANIFEST_FIELDS, path)
        for lineno, row in enumerate(reader, start=2):
            sid = (row["subject_id"] or "").strip()
            if not sid:
                raise ValueError(f"{path}:{lineno}: empty subject_id")
            if not row["flair_path"] or not row["seg_path"]:
                raise ValueError(f"{path}:{lineno}: missing flair_path or seg_path")
            rows.append((sid, base / row["flair_path"], base / row["seg_path"]))
    ids = [r[0] for r in rows]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate subject_id")
    return rows


def write_scores_csv(scores: QcScoreSet, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_FIELDS)
        for r in scores.records:
            w.writerow([r.subject_id, "" if r.score is None else repr(float(r.score)), r.status])


def read_scores_csv(path) -> QcScoreSet:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader, SCORE_FIELDS[:2], path)
        has_status = "status" in (reader.fieldnames or ())
        for lineno, row in enumerate(reader, start=2):
            status = (row.get("status") or "ok").strip() if has_status else "ok"
            cell = (row["score"] or "").strip()
            if status == "ok":
                try:
                    score = float(cell)
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: field score is not a number: {cell!r}")
                records.append(ScoreRecord(row["subject_id"], score))
            else:
                records.append(ScoreRecord(row["subject_id"], None, status))
    return QcScoreSet(records)
