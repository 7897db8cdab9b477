import json

import numpy as np
import pytest

from sbprobe.backends import FunctionAutoencoder
from sbprobe.errors import MetricError, SplitError
from sbprobe.harness import (Dataset, ExperimentPlan, build_splits, emit_reports, load_report, recompute_check,
                             report_dict, reports_from_json, run_detection_experiment, run_robustness_experiment,
                             validate_report, verification_pairs)
from sbprobe.imaging import FaceImage
from sbprobe.metrics import arr, suppression_rate
from sbprobe.privacy import PrivacyKind, PrivacyModel, identity_model
from sbprobe.recovery import RecoveryPipeline, RecoveryTransform, TransformKind


def tiny_dataset(per_class, images_per_subject=2, partitions=None):
    """``per_class`` = (n negative subjects, n positive subjects)."""
    images, subj, labels = [], [], []
    for c, n in enumerate(per_class):
        for s in range(n):
            k = images_per_subject if np.isscalar(images_per_subject) else images_per_subject[c][s]
            for j in range(k):
                images.append(FaceImage(np.full((2, 2, 3), 0.1 * c), source_id=f"c{c}s{s}i{j}"))
                subj.append(f"c{c}s{s}")
                labels.append(c)
    parts = partitions or [""] * len(images)
    return Dataset(images, np.array(subj), np.array(labels), ("f", "m"), parts, "tiny")


def split_subjects(ds, idx):
    return set(ds.subjects[idx].tolist())


def test_four_subjects_two_splits_have_mated_pairs():
    ds = tiny_dataset((2, 2))
    sp = build_splits(ds, n_splits=2, train_fraction=0.0)
    for t, p in zip(sp.tests, sp.pairs):
        assert p.n_mated >= 1
        assert set(ds.labels[t]) == {0, 1}


def test_splits_are_deterministic_and_seed_dependent():
    ds = tiny_dataset((12, 12), 3)
    a = build_splits(ds, seed=5)
    b = build_splits(ds, seed=5)
    assert np.array_equal(a.train, b.train)
    assert all(np.array_equal(x, y) for x, y in zip(a.tests, b.tests))
    assert all(np.array_equal(x.a, y.a) and np.array_equal(x.b, y.b) for x, y in zip(a.pairs, b.pairs))
    c = build_splits(ds, seed=6)
    assert not all(np.array_equal(x, y) for x, y in zip(a.tests, c.tests))


def test_balancing_ten_vs_six():
    ds = tiny_dataset((10, 6))
    sp = build_splits(ds, n_splits=2, seed=1)
    used = np.r_[sp.train, sp.test_union]
    kept = split_subjects(ds, used)
    per_class = [sum(1 for s in kept if s.startswith(f"c{c}")) for c in (0, 1)]
    assert per_class == [6, 6]
    assert len(sp.excluded_subjects) == 4 and all(s.startswith("c0") for s in sp.excluded_subjects)


def test_subject_disjointness_and_class_presence():
    ds = tiny_dataset((20, 20), 3)
    sp = build_splits(ds, n_splits=4, seed=3)
    groups = [split_subjects(ds, sp.train)] + [split_subjects(ds, t) for t in sp.tests]
    for i in range(len(groups)):
        for j in range(i + 1, len(groups)):
            assert not groups[i] & groups[j]
    for t in sp.tests:
        assert set(ds.labels[t]) == {0, 1}


def test_single_image_subjects_go_to_training():
    counts = [[1, 1, 3, 3, 3, 3], [1, 3, 3, 3, 3, 3]]
    ds = tiny_dataset((6, 6), counts)
    sp = build_splits(ds, n_splits=2, train_fraction=0.34, seed=0)
    for t in sp.tests:
        _, n = np.unique(ds.subjects[t], return_counts=True)
        assert n.min() >= 2
    assert {"c0s0", "c0s1", "c1s0"} <= split_subjects(ds, sp.train)


def test_partition_hints_are_honoured():
    ds = tiny_dataset((4, 4))
    hint = {"c0s0": "train", "c1s0": "train", "c0s1": "test0", "c1s1": "test0", "c0s2": "test1", "c1s2": "test1",
            "c0s3": "test", "c1s3": "test"}
    ds.partitions = [hint[s] for s in ds.subjects]
    sp = build_splits(ds, n_splits=2)
    assert split_subjects(ds, sp.train) == {"c0s0", "c1s0"}
    assert {"c0s1", "c1s1"} <= split_subjects(ds, sp.tests[0])
    assert {"c0s2", "c1s2"} <= split_subjects(ds, sp.tests[1])
    ds.partitions = ["holdout"] * len(ds)
    with pytest.raises(SplitError):
        build_splits(ds, n_splits=2)


def test_insufficient_subjects():
    with pytest.raises(SplitError):
        build_splits(tiny_dataset((1, 3)))
    with pytest.raises(SplitError):
        build_splits(tiny_dataset((3, 3)), n_splits=4)


def test_verification_pairs_cap():
    subj = np.repeat(np.arange(10).astype(str), 3)
    full = verification_pairs(subj, None, np.random.default_rng(0))
    assert full.n_mated == 30 and full.n_nonmated == 435 - 30
    capped = verification_pairs(subj, 50, np.random.default_rng(0))
    assert capped.n_mated == 30 and capped.n_nonmated == 50


# ---- experiments on the toy benchmark ----------------------------------------

def fn_prober(name, fn):
    return RecoveryPipeline(name, (RecoveryTransform(TransformKind.AUTOENCODE, FunctionAutoencoder(fn, name)),))


def plan_for(comp, pm, probers=(), detection=(), **kw):
    return ExperimentPlan(comp.dataset, comp.splits, pm, list(probers), comp.classifier, comp.verifier,
                          detection_probers=list(detection), **kw)


def test_identity_model_and_identity_probers(toy_components):
    res = run_robustness_experiment(plan_for(toy_components, identity_model(), [fn_prober("id", lambda p: p)]))
    v, r = res.vanilla, res.reports["id"]
    assert v.il.mean == 0 and r.arr.mean == 0
    for a, b in zip(v.auc["auc_go"].values, v.auc["auc_gp"].values):
        assert a == b
    # no-op enhancement, literal formula, non-inverted branch: SR = (go - (go - 0.5)) / go
    want = np.mean([suppression_rate(a, a, False) for a in v.auc["auc_go"].values])
    assert v.sr.mean == pytest.approx(want, abs=1e-15)
    # read as an inverted decision, the same AUCs give SR = 0
    flipped = run_robustness_experiment(plan_for(toy_components, PrivacyModel("id", PrivacyKind.EXTERNAL,
                                                                              inverted=True)))
    assert flipped.vanilla.sr.mean == 0 and flipped.vanilla.pic.mean == 0


def test_identity_probers_collapse_to_enhanced(toy_cfg, toy_components, fgsm_result):
    from sbprobe.harness import build_privacy_model
    c = toy_components
    pm = build_privacy_model("fgsm", toy_cfg["privacy_models"]["fgsm"], toy_cfg, c.dataset, c.splits.train,
                             c.classifier, c.verifier)
    res = run_robustness_experiment(plan_for(c, pm, [fn_prober("id", lambda p: p)]))
    r = res.reports["id"]
    go, gp = r.auc["auc_go"].values, r.auc["auc_gp"].values
    assert r.auc["auc_gr"].values == gp
    want = [arr(a, b, b, r.inverted) for a, b in zip(go, gp)]
    assert r.arr.values == pytest.approx(want, abs=0)


def test_fgsm_less_robust_than_synthesis(fgsm_result, san_result):
    assert fgsm_result.vanilla.sr.mean >= 0.9
    assert fgsm_result.reports["PP-D"].arr.mean < san_result.reports["PP-D"].arr.mean


def test_detection_controls(identity_result, fgsm_result):
    assert identity_result.detection.auc.mean == 0.5
    assert fgsm_result.detection.auc.mean > 0.9


def test_detection_experiment_matches_full_run(toy_components, fgsm_result):
    plan = fgsm_result.record.plan
    det = run_detection_experiment(plan)
    assert det.auc.values == fgsm_result.detection.auc.values


def test_report_schema_and_roundtrip(fgsm_result, tmp_path):
    d = report_dict(fgsm_result)
    validate_report(d)
    files = emit_reports(fgsm_result, tmp_path)
    assert {"report.json", "scores.csv", "delta_auc.csv", "detection_scores.csv", "roc/auc_go.csv",
            "roc/auc_gr__PP-D.csv"} <= set(files)
    back = load_report(tmp_path / "report.json")
    assert back == json.loads(json.dumps(d))
    assert recompute_check(back) == []
    vanilla, per = reports_from_json(back)
    assert vanilla.recompute().to_dict() == vanilla.to_dict()
    for name, rep in per.items():
        assert rep.to_dict() == fgsm_result.reports[name].to_dict()


def test_tampered_report_is_caught(fgsm_result):
    d = json.loads(json.dumps(report_dict(fgsm_result)))
    d["probers"]["PP-D"]["arr"]["mean"] += 0.01
    assert recompute_check(d) == ["probers.PP-D.arr"]


def test_empty_record_writes_nothing(tmp_path):
    with pytest.raises(MetricError):
        emit_reports(None, tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_without_probers_only_base_conditions(toy_components, tmp_path):
    res = run_robustness_experiment(plan_for(toy_components, identity_model()))
    d = report_dict(res)
    assert d["probers"] == {} and "detection" not in d
    assert {k for k in d["vanilla"] if k.startswith("auc_")} == {"auc_go", "auc_gp", "auc_vo", "auc_vp"}
    files = emit_reports(res, tmp_path)
    assert not any("auc_gr" in f for f in files)
    assert (tmp_path / "delta_auc.csv").read_text() == "prober,split,delta_auc_v,delta_auc_g\n"


def test_prober_failures_are_logged(toy_components, tmp_path):
    ds = toy_components.dataset
    bad = set(toy_components.splits.tests[0][:3].tolist())
    bad_ids = {ds.images[i].pixels.tobytes() for i in bad}

    def flaky(p):
        if p.tobytes() in bad_ids:
            raise RuntimeError("no face")
        return p
    res = run_robustness_experiment(plan_for(toy_components, identity_model(), [fn_prober("flaky", flaky)]))
    fails = res.record.failures
    assert len(fails) == 3 and {f["stage"] for f in fails} == {"flaky"}
    assert {f["image"] for f in fails} == {ds.images[i].source_id for i in bad}
    comp = res.reports["flaky"].completed
    assert comp["images"] - comp["complete"] == 3
    emit_reports(res, tmp_path)
    rows = [ln for ln in (tmp_path / "scores.csv").read_text().splitlines() if ",r,flaky," in ln]
    assert sum(ln.endswith(",") for ln in rows) == 3


def test_parallel_workers_match_serial(toy_components):
    pm = identity_model()
    probers = [fn_prober("dark", lambda p: np.clip(p * 0.9, 0, 1))]
    a = run_robustness_experiment(plan_for(toy_components, pm, probers))
    b = run_robustness_experiment(plan_for(toy_components, pm, probers, workers=4))
    assert report_dict(a) == report_dict(b)
