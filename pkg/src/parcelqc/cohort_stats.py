"""Paired Wilcoxon test, cohort summaries and age/sex-stratified splitting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "EXACT_MAX_N",
    "WilcoxonResult",
    "wilcoxon_signed_rank",
    "signed_rank_null_counts",
    "CohortSummary",
    "cohort_summary",
    "SubjectRecord",
    "stratified_split",
    "read_subjects_csv",
]

EXACT_MAX_N = 25


class WilcoxonResult(NamedTuple):
    statistic: float
    p_two_sided: float


def signed_rank_null_counts(doubled_ranks) -> np.ndarray:
    """Number of sign assignments giving each positive-rank sum.

    Ranks are passed doubled so tied (half-integer) ranks stay integral;
    entry ``k`` counts the subsets whose doubled ranks sum to ``k``.
    """
    r = [int(v) for v in doubled_ranks]
    counts = np.zeros(sum(r) + 1, dtype=np.int64)
    counts[0] = 1
    for v in r:
        counts[v:] = counts[v:] + counts[: counts.size - v].copy()
    return counts


def wilcoxon_signed_rank(x, y, mode: str = "auto") -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are discarded and tied magnitudes share their average
    rank. The statistic is ``min(W+, W-)``. With ``mode="auto"`` the exact
    permutation distribution is used up to 25 nonzero pairs, otherwise the
    normal approximation with tie and continuity corrections.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    d = x - y
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ValueError("no nonzero differences")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)

    if mode not in ("auto", "exact", "approx"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "exact" or (mode == "auto" and n <= EXACT_MAX_N):
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = signed_rank_null_counts(doubled)
        tail = counts[: int(round(2 * stat)) + 1].sum()
        p = min(1.0, 2.0 * float(tail) / float(2**n))
    else:
        mean = n * (n + 1) / 4.0
        _, t = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float((t**3 - t).sum()) / 48.0
        z = max(0.0, abs(stat - mean) - 0.5) / math.sqrt(var)
        p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return WilcoxonResult(stat, p)


@dataclass(frozen=True)
class CohortSummary:
    mean: float
    std: float
    min: float
    median: float
    max: float
    n: int

    def format_row(self, decimals: int = 2) -> str:
        """``mean ± std | min | median | max``."""
        f = f"{{:.{decimals}f}}"
        return " | ".join(
            [f"{f.format(self.mean)} ± {f.format(self.std)}",
             f.format(self.min), f.format(self.median), f.format(self.max)]
        )


def cohort_summary(values) -> CohortSummary:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("cohort_summary of empty input")
    v = np.sort(v)
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return CohortSummary(
        mean=math.fsum(v) / v.size,
        std=std,
        min=float(v[0]),
        median=float(np.percentile(v, 50.0)),
        max=float(v[-1]),
        n=int(v.size),
    )


# ---------------------------------------------------------------------------
# stratified split


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    age: float
    sex: str
    site: str | None = None

    def __post_init__(self):
        if self.sex not in ("F", "M"):
            raise ValueError(f"{self.subject_id}: sex must be F or M, got {self.sex!r}")
        if not (self.age >= 0 and math.isfinite(self.age)):
            raise ValueError(f"{self.subject_id}: age must be a non-negative number")


def _quotas(sizes: list[int], fraction: Fraction) -> list[int]:
    # largest remainder: floors first, then the biggest fractional parts
    ideal = [s * fraction for s in sizes]
    base = [math.floor(q) for q in ideal]
    target = math.floor(sum(sizes) * fraction + Fraction(1, 2))
    order = sorted(range(len(sizes)), key=lambda i: (-(ideal[i] - base[i]), i))
    for i in order[: target - sum(base)]:
        base[i] += 1
    return base


def stratified_split(records, test_fraction: float, age_bin_years: int = 10, seed: int = 0):
    """Split into ``(train_ids, test_ids)`` balanced over (age bin, sex) strata.

    Each stratum contributes its proportional share of test subjects,
    rounded by largest remainder so the total is ``round(n * test_fraction)``.
    Within a stratum, subjects (ordered by id) are drawn uniformly with an
    independent PCG64 stream spawned from ``seed``. Both id lists follow the
    input order.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to split")
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    if age_bin_years < 1:
        raise ValueError("age_bin_years must be >= 1")
    ids = [r.subject_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate subject ids")

    strata: dict[tuple[int, str], list[str]] = {}
    for r in records:
        strata.setdefault((math.floor(r.age / age_bin_years), r.sex), []).append(r.subject_id)
    keys = sorted(strata)
    quotas = _quotas([len(strata[k]) for k in keys], Fraction(test_fraction).limit_denominator(10**9))
    streams = np.random.SeedSequence(seed).spawn(len(keys))

    test: set[str] = set()
    for key, quota, ss in zip(keys, quotas, streams):
        members = sorted(strata[key])
        rng = np.random.Generator(np.random.PCG64(ss))
        picked = rng.choice(len(members), size=quota, replace=False)
        test.update(members[i] for i in picked)
    train_ids = [i for i in ids if i not in test]
    test_ids = [i for i in ids if i in test]
    return train_ids, test_ids


SUBJECT_FIELDS = ("subject_id", "age", "sex", "site")


def read_subjects_csv(path) -> list[SubjectRecord]:
    path = Path(path)
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        names = tuple(reader.fieldnames or ())
        if names[:3] != SUBJECT_FIELDS[:3]:
            raise ValueError(f"{path}: header must be {','.join(SUBJECT_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                age = float(row["age"])
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{lineno}: field age is not a number: {row['age']!r}") from None
            sex = (row["sex"] or "").strip().upper()
            if sex not in ("F", "M"):
                raise ValueError(f"{path}:{lineno}: field sex must be F or M, got {row['sex']!r}")
            site = (row.get("site") or "").strip() or None
            try:
                out.append(SubjectRecord(row["subject_id"].strip(), age, sex, site))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out
