import csv
import json
import subprocess
import sys

import numpy as np

from parcelqc.cli import main
from parcelqc.gmm_threshold import fit_gmm2
from parcelqc.nifti_io import LabelMap, read_labelmap, read_volume, write_volume
from parcelqc.phantom import PhantomSpec, generate_phantom
from parcelqc.seg_metrics import evaluate_pair, read_metrics_csv
from parcelqc.synth_qc import QcScoreSet, alignment_score, read_scores_csv, write_scores_csv

SPEC = PhantomSpec(dims=(28, 30, 26), semi_axes=(12, 13, 11), n_parcels=12)


def make_cohort(tmp_path, n=3):
    rows = []
    for i in range(n):
        labels, flair = generate_phantom(PhantomSpec(**{**SPEC.to_json(), "seed": i}))
        write_volume(flair, tmp_path / f"s{i}_flair.nii.gz")
        write_volume(labels, tmp_path / f"s{i}_seg.nii.gz")
        rows.append((f"s{i}", f"s{i}_flair.nii.gz", f"s{i}_seg.nii.gz"))
    with open(tmp_path / "cohort.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "flair_path", "seg_path"])
        w.writerows(rows)
    return tmp_path / "cohort.csv"


def test_qc_score(tmp_path):
    manifest = make_cohort(tmp_path)
    assert main(["qc", "score", "--manifest", str(manifest), "--out", str(tmp_path / "o"), "--threads", "2"]) == 0
    scores = read_scores_csv(tmp_path / "o" / "scores.csv")
    assert [r.subject_id for r in scores.records] == ["s0", "s1", "s2"]
    # CLI equals library bit for bit
    lib = alignment_score(read_volume(tmp_path / "s1_flair.nii.gz"), read_labelmap(tmp_path / "s1_seg.nii.gz"), 1)
    assert scores.records[1].score == lib


def test_qc_score_partial_failure(tmp_path):
    manifest = make_cohort(tmp_path)
    (tmp_path / "s1_flair.nii.gz").write_bytes(b"garbage")
    assert main(["qc", "score", "--manifest", str(manifest), "--out", str(tmp_path / "o")]) == 1
    scores = read_scores_csv(tmp_path / "o" / "scores.csv")
    assert [r.ok for r in scores.records] == [True, False, True]


def test_qc_score_geometry_mismatch_is_partial(tmp_path):
    manifest = make_cohort(tmp_path)
    write_volume(LabelMap.from_array(np.ones((4, 4, 4), int)), tmp_path / "s2_seg.nii.gz")
    assert main(["qc", "score", "--manifest", str(manifest), "--out", str(tmp_path / "o")]) == 1
    assert "geometry mismatch" in read_scores_csv(tmp_path / "o" / "scores.csv").records[2].status


def test_qc_score_malformed_manifest(tmp_path):
    (tmp_path / "m.csv").write_text("who,what\nx,y\n")
    out = tmp_path / "o"
    assert main(["qc", "score", "--manifest", str(tmp_path / "m.csv"), "--out", str(out)]) == 2
    assert not out.exists()


def _scores_file(tmp_path):
    rng = np.random.default_rng(11)
    n = 3577
    low = rng.random(n) < 0.10
    x = np.where(low, rng.normal(0.40, 0.05, n), rng.normal(0.80, 0.03, n))
    s = QcScoreSet.from_scores([f"sub{i}" for i in range(n)], x)
    write_scores_csv(s, tmp_path / "scores.csv")
    return s


def test_qc_fit_threshold_equals_library(tmp_path):
    s = _scores_file(tmp_path)
    assert main(["qc", "fit", "--scores", str(tmp_path / "scores.csv"), "--out", str(tmp_path / "o")]) == 0
    fit = json.loads((tmp_path / "o" / "fit.json").read_text())
    assert fit["threshold"] == fit_gmm2(s).threshold
    hist = list(csv.reader(open(tmp_path / "o" / "histogram.csv")))
    assert hist[0] == ["bin_left", "count"]
    assert sum(int(c) for _, c in hist[1:]) == 3577
    cls = list(csv.DictReader(open(tmp_path / "o" / "classification.csv")))
    assert len(cls) == 3577
    assert all((float(r["score"]) > fit["threshold"]) == (r["pass"] == "true") for r in cls)


def test_qc_fit_degenerate_is_invalid(tmp_path):
    write_scores_csv(QcScoreSet.from_scores([str(i) for i in range(10)], [0.9] * 10), tmp_path / "s.csv")
    assert main(["qc", "fit", "--scores", str(tmp_path / "s.csv"), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_qc_fit_bad_number_names_field(tmp_path, capsys):
    (tmp_path / "s.csv").write_text("subject_id,score,status\na,zero,ok\n")
    assert main(["qc", "fit", "--scores", str(tmp_path / "s.csv"), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "s.csv" in err and "score" in err


def _pair(tmp_path):
    labels, _ = generate_phantom(SPEC)
    write_volume(labels, tmp_path / "gt.nii.gz")
    shifted = np.roll(labels.labels, 1, axis=0)
    write_volume(LabelMap.from_array(shifted), tmp_path / "pred.nii.gz")
    return tmp_path / "gt.nii.gz", tmp_path / "pred.nii.gz"


def test_eval_identity_mean_dice_one(tmp_path):
    gt, _ = _pair(tmp_path)
    assert main(["eval", "--gt", str(gt), "--pred", str(gt), "--out", str(tmp_path / "o")]) == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["mean_dice"] == 1.0
    assert summary["mean_sd95"] == 0.0
    table = (tmp_path / "o" / "table.txt").read_text().splitlines()
    assert table[0] == "Metric | Mean ± Std | Min | 50% | Max"
    assert table[1] == "Dice | 1.00 ± 0.00 | 1.00 | 1.00 | 1.00"


def test_eval_equals_library(tmp_path):
    gt, pred = _pair(tmp_path)
    assert main(["eval", "--gt", str(gt), "--pred", str(pred), "--subject-id", "p1",
                 "--out", str(tmp_path / "o")]) == 0
    lib = evaluate_pair(read_labelmap(gt), read_labelmap(pred), "p1")
    assert read_metrics_csv(tmp_path / "o" / "metrics.csv") == lib


def test_eval_missing_protocol_map_writes_nothing(tmp_path):
    gt, pred = _pair(tmp_path)
    out = tmp_path / "o"
    rc = main(["eval", "--gt", str(gt), "--pred", str(pred), "--protocol-map", str(tmp_path / "nope.tsv"),
               "--out", str(out)])
    assert rc == 2
    assert not out.exists()


def test_eval_geometry_mismatch_invalid(tmp_path, capsys):
    gt, _ = _pair(tmp_path)
    write_volume(LabelMap.from_array(np.ones((5, 5, 5), int)), tmp_path / "small.nii")
    assert main(["eval", "--gt", str(gt), "--pred", str(tmp_path / "small.nii"), "--out", str(tmp_path / "o")]) == 2
    assert "geometry mismatch" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_eval_protocol_and_group_maps(tmp_path):
    gt, pred = _pair(tmp_path)
    (tmp_path / "pm.tsv").write_text("# merge\n" + "".join(f"{l}\t{1 + (l - 1) // 4}\tg{l}\n" for l in range(1, 13)))
    (tmp_path / "gm.tsv").write_text("1\tlow\n2\tlow\n")
    assert main(["eval", "--gt", str(gt), "--pred", str(pred), "--protocol-map", str(tmp_path / "pm.tsv"),
                 "--group-map", str(tmp_path / "gm.tsv"), "--out", str(tmp_path / "o")]) == 0
    labels = [r.label for r in read_metrics_csv(tmp_path / "o" / "metrics.csv")]
    assert labels == [1, 2, 3]
    groups = list(csv.DictReader(open(tmp_path / "o" / "groups.csv")))
    assert [g["group"] for g in groups] == ["low", "ungrouped"]
    assert [g["n"] for g in groups] == ["2", "1"]


def test_eval_manifest_partial(tmp_path):
    gt, pred = _pair(tmp_path)
    (tmp_path / "m.csv").write_text(f"subject_id,gt_path,pred_path\na,{gt.name},{pred.name}\nb,{gt.name},missing.nii\n")
    assert main(["eval", "--manifest", str(tmp_path / "m.csv"), "--out", str(tmp_path / "o")]) == 1
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["n_subjects"] == 1 and summary["errors"][0]["subject_id"] == "b"


def test_reports_byte_identical(tmp_path):
    gt, pred = _pair(tmp_path)
    for name in ("o1", "o2"):
        assert main(["eval", "--gt", str(gt), "--pred", str(pred), "--out", str(tmp_path / name)]) == 0
    for f in ("metrics.csv", "groups.csv", "summary.json", "table.txt"):
        assert (tmp_path / "o1" / f).read_bytes() == (tmp_path / "o2" / f).read_bytes()
    assert (tmp_path / "o1" / "run.json").exists()
    for name in ("f1", "f2"):
        _scores_file(tmp_path)
        assert main(["qc", "fit", "--scores", str(tmp_path / "scores.csv"), "--out", str(tmp_path / name)]) == 0
    for f in ("fit.json", "histogram.csv", "classification.csv"):
        assert (tmp_path / "f1" / f).read_bytes() == (tmp_path / "f2" / f).read_bytes()


def test_compare(tmp_path):
    rng = np.random.default_rng(0)
    for name, shift in (("a", 0.0), ("b", 0.05)):
        with open(tmp_path / f"{name}.csv", "w") as fh:
            fh.write("subject_id,label,dice,sd95_mm,gt_voxels,pred_voxels\n")
            for s in range(15):
                for label in (1, 2):
                    fh.write(f"s{s},{label},{0.8 + shift + 0.01 * rng.normal()!r},{1.0 + rng.random()!r},10,10\n")
    assert main(["compare", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"), "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "comparison.json").read_text())
    assert set(report["methods"]) == {"a", "b"}
    dice_row = [p for p in report["pairwise"] if p["metric"] == "dice"][0]
    assert dice_row["n"] == 15
    assert dice_row["p_two_sided"] == 2 / 2**15  # every subject improves
    assert report["methods"]["a"]["dice"]["row"].count("|") == 3


def test_compare_malformed_csv(tmp_path):
    (tmp_path / "a.csv").write_text("subject_id,label,dice,sd95_mm,gt_voxels,pred_voxels\ns,1,high,,1,1\n")
    (tmp_path / "b.csv").write_text("subject_id,label,dice,sd95_mm,gt_voxels,pred_voxels\n")
    assert main(["compare", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"), "--out", str(tmp_path / "o")]) == 2


def test_split(tmp_path):
    with open(tmp_path / "subjects.csv", "w") as fh:
        fh.write("subject_id,age,sex,site\n")
        for i in range(100):
            fh.write(f"sub{i:03d},{30 + i % 7},{'F' if i < 73 else 'M'},siteA\n")
    args = ["split", "--subjects", str(tmp_path / "subjects.csv"), "--test-fraction", "0.1",
            "--age-bin", "100", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "o1")]) == 0
    assert main(args + ["--out", str(tmp_path / "o2")]) == 0
    test = (tmp_path / "o1" / "test_ids.txt").read_text().split()
    assert len(test) == 10
    assert sum(int(t[3:]) < 73 for t in test) == 7
    assert (tmp_path / "o1" / "test_ids.txt").read_bytes() == (tmp_path / "o2" / "test_ids.txt").read_bytes()
    assert len((tmp_path / "o1" / "train_ids.txt").read_text().split()) == 90


def test_phantom_command(tmp_path):
    (tmp_path / "spec.json").write_text(json.dumps(SPEC.to_json()))
    assert main(["phantom", "--spec", str(tmp_path / "spec.json"), "--shift", "3", "0", "0",
                 "--lesions", "2", "--lesion-labels", "1", "2", "--out", str(tmp_path / "o")]) == 0
    labels, flair = generate_phantom(SPEC)
    seg = read_labelmap(tmp_path / "o" / "seg.nii.gz")
    np.testing.assert_array_equal(read_labelmap(tmp_path / "o" / "seg_true.nii.gz").labels, labels.labels)
    np.testing.assert_array_equal(seg.labels[3:], labels.labels[:-3])
    changed = read_volume(tmp_path / "o" / "flair.nii.gz").voxels != flair.voxels
    assert changed.any() and np.all(np.isin(labels.labels[changed], [1, 2]))


def test_phantom_bad_spec(tmp_path):
    (tmp_path / "spec.json").write_text('{"n_parcels": 0}')
    assert main(["phantom", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_usage_errors_exit_2(tmp_path):
    assert main(["eval", "--out", str(tmp_path / "o")]) == 2
    assert main(["nonsense"]) == 2
    assert main(["split", "--subjects", "x.csv", "--out", str(tmp_path / "o"), "--threads", "0"]) == 2


def test_threads_env_fallback(tmp_path, monkeypatch):
    manifest = make_cohort(tmp_path, n=2)
    monkeypatch.setenv("PARCELQC_THREADS", "bogus")
    assert main(["qc", "score", "--manifest", str(manifest), "--out", str(tmp_path / "o")]) == 2
    monkeypatch.setenv("PARCELQC_THREADS", "2")
    assert main(["qc", "score", "--manifest", str(manifest), "--out", str(tmp_path / "o")]) == 0


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "parcelqc.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "parcelqc" in proc.stdout
