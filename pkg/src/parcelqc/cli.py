"""``parcelqc`` command line.

Exit codes: 0 success, 1 partial failure (some subjects could not be
processed), 2 invalid input (nothing written).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

from . import __version__
from .cohort_stats import read_subjects_csv, stratified_split
from .gmm_threshold import fit_gmm2
from .nifti_io import NiftiError, read_labelmap, write_volume
from .phantom import PhantomSpec, generate_phantom, inject_lesions, inject_misalignment
from .report import comparison_report, emit_fit_report, emit_report, ensure_dir, write_json, write_sidecar
from .seg_metrics import GroupMap, ProtocolMap, aggregate_groups, evaluate_pair, read_metrics_csv, remap_protocol
from .synth_qc import batch_scores, read_cohort_manifest, read_scores_csv, write_scores_csv

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_INVALID = 2


class InputError(Exception):
    """Invalid invocation or input file; maps to exit code 2."""


def default_threads() -> int:
    env = os.environ.get("PARCELQC_THREADS", "").strip()
    if env:
        try:
            n = int(env)
        except ValueError:
            raise InputError(f"PARCELQC_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise InputError("PARCELQC_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def _existing(path, what: str) -> Path:
    if path is None:
        raise InputError(f"missing {what}")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def _load(fn, path, *args):
    try:
        return fn(path, *args)
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise InputError(str(exc)) from exc
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_qc_score(args) -> int:
    manifest = _existing(args.manifest, "cohort manifest")
    cohort = _load(read_cohort_manifest, manifest)
    scores = batch_scores(cohort, args.filter_radius, args.threads)
    out = ensure_dir(args.out)
    write_scores_csv(scores, out / "scores.csv")
    write_sidecar(out, "qc score")
    for rec in scores.errors:
        print(f"{rec.subject_id}: {rec.status}", file=sys.stderr)
    return EXIT_PARTIAL if scores.partial_failure else EXIT_OK


def cmd_qc_fit(args) -> int:
    path = _existing(args.scores, "scores CSV")
    scores = _load(read_scores_csv, path)
    try:
        fit = fit_gmm2(scores, tol=args.tol, max_iter=args.max_iter, seed=args.seed)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    out = ensure_dir(args.out)
    emit_fit_report(out, fit, scores, args.bin_width)
    write_sidecar(out, "qc fit")
    print(f"threshold={fit.threshold!r}")
    return EXIT_PARTIAL if scores.partial_failure else EXIT_OK


def _read_eval_manifest(path):
    rows = []
    base = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ())[:3] != ("subject_id", "gt_path", "pred_path"):
            raise ValueError(f"{path}: header must be subject_id,gt_path,pred_path")
        for lineno, row in enumerate(reader, start=2):
            if not row["subject_id"] or not row["gt_path"] or not row["pred_path"]:
                raise ValueError(f"{path}:{lineno}: empty field")
            rows.append((row["subject_id"], base / row["gt_path"], base / row["pred_path"]))
    return rows


def cmd_eval(args) -> int:
    pm = _load(ProtocolMap.from_tsv, _existing(args.protocol_map, "protocol map")) if args.protocol_map else None
    pred_pm = (_load(ProtocolMap.from_tsv, _existing(args.pred_protocol_map, "pred protocol map"))
               if args.pred_protocol_map else pm)
    gm = _load(GroupMap.from_tsv, _existing(args.group_map, "group map")) if args.group_map else None
    if args.manifest:
        pairs = _load(_read_eval_manifest, _existing(args.manifest, "eval manifest"))
        single = False
    elif args.gt and args.pred:
        pairs = [(args.subject_id, _existing(args.gt, "ground-truth map"), _existing(args.pred, "predicted map"))]
        single = True
    else:
        raise InputError("eval needs --gt and --pred, or --manifest")

    metrics, errors = [], []
    for sid, gt_path, pred_path in pairs:
        try:
            gt = read_labelmap(gt_path)
            pred = read_labelmap(pred_path)
            if pm is not None:
                gt = remap_protocol(gt, pm)
            if pred_pm is not None:
                pred = remap_protocol(pred, pred_pm)
            metrics.extend(evaluate_pair(gt, pred, sid, threads=args.threads))
        except (OSError, ValueError) as exc:
            if single:
                raise InputError(str(exc)) from exc
            errors.append((sid, " ".join(str(exc).split())))
    groups = aggregate_groups(metrics, gm)
    out = ensure_dir(args.out)
    summary = emit_report(out, metrics, groups, errors)
    write_sidecar(out, "eval")
    for sid, msg in errors:
        print(f"{sid}: {msg}", file=sys.stderr)
    print(f"mean_dice={summary['mean_dice']!r}")
    return EXIT_PARTIAL if errors else EXIT_OK


def cmd_compare(args) -> int:
    if len(args.metrics) < 2:
        raise InputError("compare needs at least two metric CSVs")
    names = args.names or [Path(p).stem for p in args.metrics]
    if len(names) != len(args.metrics) or len(set(names)) != len(names):
        raise InputError("--names must give one distinct name per metrics file")
    named = {n: _load(read_metrics_csv, _existing(p, "metrics CSV")) for n, p in zip(names, args.metrics)}
    report = comparison_report(named)
    out = ensure_dir(args.out)
    write_json(report, out / "comparison.json")
    write_sidecar(out, "compare")
    return EXIT_OK


def cmd_split(args) -> int:
    subjects = _load(read_subjects_csv, _existing(args.subjects, "subject manifest"))
    try:
        train, test = stratified_split(subjects, args.test_fraction, args.age_bin, args.seed)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = ensure_dir(args.out)
    for name, ids in (("train_ids.txt", train), ("test_ids.txt", test)):
        with open(out / name, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(f"{i}\n" for i in ids)
    write_sidecar(out, "split")
    print(f"train={len(train)} test={len(test)}")
    return EXIT_OK


def cmd_phantom(args) -> int:
    spec = _load(PhantomSpec.from_json, _existing(args.spec, "phantom spec")) if args.spec else PhantomSpec()
    if args.seed is not None:
        spec = PhantomSpec(**{**spec.to_json(), "seed": args.seed})
    try:
        labels, flair = generate_phantom(spec)
        seg = labels
        if args.shift or args.rot_z:
            seg = inject_misalignment(labels, tuple(args.shift or (0, 0, 0)), args.rot_z)
        if args.lesions:
            hosts = args.lesion_labels or [int(labels.labels.max())]
            flair = inject_lesions(flair, labels, hosts, args.lesions, args.lesion_radius,
                                   args.lesion_delta, args.lesion_seed)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = ensure_dir(args.out)
    write_volume(flair, out / "flair.nii.gz")
    write_volume(seg, out / "seg.nii.gz")
    if seg is not labels:
        write_volume(labels, out / "seg_true.nii.gz")
    write_json(spec.to_json(), out / "phantom.json")
    write_sidecar(out, "phantom")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parcelqc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $PARCELQC_THREADS or all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    qc = sub.add_parser("qc", help="segmentation/FLAIR alignment QC")
    qc_sub = qc.add_subparsers(dest="qc_command", required=True)
    p = qc_sub.add_parser("score", parents=[common], help="score a cohort manifest")
    p.add_argument("--manifest", required=True, help="CSV subject_id,flair_path,seg_path")
    p.add_argument("--filter-radius", type=int, default=1)
    p.set_defaults(func=cmd_qc_score)
    p = qc_sub.add_parser("fit", parents=[common], help="fit the 2-component GMM and threshold")
    p.add_argument("--scores", required=True, help="CSV subject_id,score,status")
    p.add_argument("--bin-width", type=float, default=0.01)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_qc_fit)

    p = sub.add_parser("eval", parents=[common], help="per-structure Dice / SD95")
    p.add_argument("--gt")
    p.add_argument("--pred")
    p.add_argument("--subject-id", default="subject")
    p.add_argument("--manifest", help="CSV subject_id,gt_path,pred_path")
    p.add_argument("--protocol-map", help="TSV applied to both maps")
    p.add_argument("--pred-protocol-map", help="TSV applied to predictions instead of --protocol-map")
    p.add_argument("--group-map", help="TSV label<TAB>group")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", parents=[common], help="paired Wilcoxon tests between methods")
    p.add_argument("metrics", nargs="+", help="metrics CSVs, one per method")
    p.add_argument("--names", nargs="+")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("split", parents=[common], help="age/sex-stratified train/test split")
    p.add_argument("--subjects", required=True, help="CSV subject_id,age,sex,site")
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--age-bin", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("phantom", parents=[common], help="write a synthetic phantom pair")
    p.add_argument("--spec", help="phantom spec JSON (defaults if omitted)")
    p.add_argument("--seed", type=int, default=None, help="override the seed in the phantom JSON")
    p.add_argument("--shift", type=int, nargs=3, metavar=("DX", "DY", "DZ"))
    p.add_argument("--rot-z", type=float, default=0.0)
    p.add_argument("--lesions", type=int, default=0)
    p.add_argument("--lesion-labels", type=int, nargs="+")
    p.add_argument("--lesion-radius", type=int, default=3)
    p.add_argument("--lesion-delta", type=float, default=100.0)
    p.add_argument("--lesion-seed", type=int, default=0)
    p.set_defaults(func=cmd_phantom)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    try:
        if args.threads is None:
            args.threads = default_threads()
        elif args.threads < 1:
            raise InputError("--threads must be >= 1")
        return args.func(args)
    except (InputError, NiftiError) as exc:
        print(f"parcelqc: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
