"""Experiment orchestration: splits, robustness and detection runs, reports.

For every test image the privacy model is applied, every prober is run on
the enhanced image, and the scoring classifier and the verifier are applied
under the original (o), enhanced (p) and recovered (r) conditions. AUCs are
computed per test split and turned into SR / IL / PIC / ARR. Detection runs
APEND on the original and enhanced versions of the same test images.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import jsonschema
import numpy as np

from .backends import make_backend
from .classifiers import PCAVerifier, SoftmaxClassifier, cosine_scores, train_toy_classifier
from .config import cache_dir, config_digest, derive_seed, load_schema
from .data import DatasetManifest, ToySample, generate_toy_dataset, read_manifest
from .detection import combine, dds_chi_square_rows, evaluate_detector, fuse_with_supervised
from .errors import ConfigurationError, MetricError, NotReadyError, PipelineStageError, SplitError
from .imaging import FaceImage, quantize
from .masks import ChessPatternConfig
from .metrics import AUC_KEYS, RobustnessReport, auc, roc_curve, split_statistics
from .privacy import PrivacyKind, PrivacyModel, SynthesisModel
from .recovery import RecoveryPipeline, RecoveryToolkit

log = logging.getLogger(__name__)

REPORT_FORMAT = "sbprobe-report/1"


# ---------------------------------------------------------------------------
# datasets and splits
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    images: list[FaceImage]
    subjects: np.ndarray  # subject id per image (str)
    labels: np.ndarray  # 1 = positive class
    classes: tuple[str, str]  # (negative, positive)
    partitions: list[str]
    name: str = "dataset"

    def __len__(self) -> int:
        return len(self.images)

    def fingerprint(self, idx: Sequence[int]) -> str:
        h = hashlib.sha256()
        for i in idx:
            h.update(self.images[i].source_id.encode())
            h.update(self.images[i].pixels.tobytes())
        return h.hexdigest()[:16]


def _class_order(classes: Sequence[str], positive: str) -> tuple[str, str]:
    neg = [c for c in classes if c != positive]
    if len(neg) != 1:
        raise ConfigurationError("binary attribute experiments need exactly two classes")
    return neg[0], positive


def dataset_from_manifest(manifest: DatasetManifest, classes: Sequence[str], positive_class: str) -> Dataset:
    order = _class_order(classes, positive_class)
    bad = sorted({r.attribute for r in manifest.records} - set(order))
    if bad:
        raise ConfigurationError(f"manifest labels {bad} are not in the configured classes {list(order)}")
    images = [manifest.load(r) for r in manifest.records]
    return Dataset(images, np.array([r.subject_id for r in manifest.records]),
                   np.array([order.index(r.attribute) for r in manifest.records], dtype=np.int64),
                   order, [r.partition for r in manifest.records], manifest.name)


def dataset_from_samples(samples: Sequence[ToySample], name: str = "toy") -> Dataset:
    return Dataset([s.image for s in samples], np.array([s.subject_id for s in samples]),
                   np.array([s.label for s in samples], dtype=np.int64), ("f", "m"),
                   [""] * len(samples), name)


@dataclass
class PairSet:
    a: np.ndarray  # positions within the split's index array
    b: np.ndarray
    mated: np.ndarray

    @property
    def n_mated(self) -> int:
        return int(self.mated.sum())

    @property
    def n_nonmated(self) -> int:
        return int((~self.mated).sum())


def verification_pairs(subjects: np.ndarray, cap: int | None, rng: np.random.Generator) -> PairSet:
    """All within-subject pairs plus all (or ``cap`` sampled) cross-subject pairs."""
    a, b = np.triu_indices(len(subjects), 1)
    same = subjects[a] == subjects[b]
    nm = np.flatnonzero(~same)
    if cap is not None and nm.size > cap:
        nm = np.sort(rng.choice(nm, size=cap, replace=False))
    keep = np.sort(np.r_[np.flatnonzero(same), nm])
    return PairSet(a[keep], b[keep], same[keep])


@dataclass
class Splits:
    train: np.ndarray
    tests: list[np.ndarray]
    pairs: list[PairSet]
    excluded_subjects: tuple[str, ...] = ()
    seed: int = 0

    @property
    def test_union(self) -> np.ndarray:
        return np.sort(np.concatenate(self.tests)) if self.tests else np.zeros(0, dtype=np.int64)


def _subject_table(ds: Dataset) -> dict[str, tuple[int, list[int]]]:
    table: dict[str, tuple[int, list[int]]] = {}
    for i, (s, y) in enumerate(zip(ds.subjects, ds.labels)):
        if s in table and table[s][0] != y:
            raise ConfigurationError(f"subject {s!r} carries both attribute labels")
        table.setdefault(s, (int(y), []))[1].append(i)
    return table


def build_splits(ds: Dataset, n_splits: int = 4, train_fraction: float = 0.5, min_test_images: int = 2,
                 nonmated_cap: int | None = 50000, seed: int = 0) -> Splits:
    """Class-balanced, subject-disjoint train/test partition with ``n_splits`` test splits.

    Subjects of the larger class are dropped at random until both classes have
    the same number of subjects. Within each class a ``train_fraction`` share of
    the subjects goes to training (subjects with fewer than ``min_test_images``
    images first); the rest are dealt round-robin into the test splits.
    Manifest partition hints (``train``, ``test`` or ``test<k>``) override the
    random assignment.
    """
    if n_splits < 1:
        raise SplitError("need at least one test split")
    rng = np.random.default_rng(seed)
    table = _subject_table(ds)
    by_class = {c: sorted(s for s, (y, _) in table.items() if y == c) for c in (0, 1)}
    if any(len(v) < 2 for v in by_class.values()):
        raise SplitError("need at least 2 subjects per class")

    hinted = any(ds.partitions)
    excluded: list[str] = []
    test_groups: list[list[str]] = [[] for _ in range(n_splits)]
    train_subj: list[str] = []
    if hinted:
        part = {}
        for s, p in zip(ds.subjects, ds.partitions):
            p = (p or "train").lower()
            if part.setdefault(s, p) != p:
                raise SplitError(f"subject {s!r} has inconsistent partition hints")
        for c in (0, 1):
            loose = []
            for s in by_class[c]:
                p = part[s]
                if p == "train":
                    train_subj.append(s)
                elif p.startswith("test") and p[4:].isdigit():
                    k = int(p[4:])
                    if k >= n_splits:
                        raise SplitError(f"partition {p!r} exceeds {n_splits} test splits")
                    test_groups[k].append(s)
                elif p == "test":
                    loose.append(s)
                else:
                    raise SplitError(f"unknown partition hint {p!r}")
            for j, s in enumerate(rng.permutation(loose)):
                test_groups[j % n_splits].append(str(s))
    else:
        n = min(len(v) for v in by_class.values())
        for c in (0, 1):
            subj = by_class[c]
            if len(subj) > n:
                keep = set(rng.choice(subj, size=n, replace=False).tolist())
                excluded += [s for s in subj if s not in keep]
                subj = [s for s in subj if s in keep]
            order = [str(s) for s in rng.permutation(subj)]
            # subjects too small for testing go to training first
            order.sort(key=lambda s: len(table[s][1]) >= min_test_images)
            n_train = int(round(train_fraction * n))
            testable = [s for s in order[n_train:] if len(table[s][1]) >= min_test_images]
            train_subj += order[:n_train] + [s for s in order[n_train:] if s not in testable]
            if len(testable) < n_splits:
                raise SplitError(f"class {ds.classes[c]!r}: {len(testable)} test subjects for {n_splits} splits")
            for j, s in enumerate(testable):
                test_groups[j % n_splits].append(s)

    train = np.array(sorted(i for s in train_subj for i in table[s][1]), dtype=np.int64)
    tests = [np.array(sorted(i for s in g for i in table[s][1]), dtype=np.int64) for g in test_groups]
    seen = set(train_subj)
    for k, g in enumerate(test_groups):
        if seen & set(g):
            raise SplitError(f"test split {k} shares subjects with training or another split")
        seen |= set(g)
        if len({table[s][0] for s in g}) < 2:
            raise SplitError(f"test split {k} lacks one of the attribute classes")
    pairs = [verification_pairs(ds.subjects[t], nonmated_cap, np.random.default_rng(derive_seed(seed, f"pairs{k}")))
             for k, t in enumerate(tests)]
    return Splits(train, tests, pairs, tuple(sorted(excluded)), seed)


# ---------------------------------------------------------------------------
# experiment plan and per-image evaluation
# ---------------------------------------------------------------------------


@dataclass
class ExperimentPlan:
    dataset: Dataset
    splits: Splits
    privacy_model: PrivacyModel
    probers: list[RecoveryPipeline]
    classifier: SoftmaxClassifier
    verifier: Any
    scorer: SoftmaxClassifier | None = None
    detection_probers: list[RecoveryPipeline] = field(default_factory=list)
    detection_weights: Sequence[float] | None = None
    alpha: float = 0.5
    external_scores: Mapping[tuple[str, str], float] | None = None
    quantize_enhanced: bool = False
    seed: int = 0
    workers: int = 1

    @property
    def score_model(self) -> SoftmaxClassifier:
        return self.scorer or self.classifier


class _PrefixRunner:
    """Runs pipelines on one image, reusing shared leading stages."""

    def __init__(self, image: FaceImage):
        self.image = image
        self.memo: dict[tuple[str, ...], FaceImage] = {(): image}

    def run(self, pipeline: RecoveryPipeline) -> FaceImage:
        key: tuple[str, ...] = ()
        out = self.image
        for i, st in enumerate(pipeline.stages):
            key = key + (st.label,)
            if key not in self.memo:
                try:
                    if not st.ready:
                        raise NotReadyError(f"{st.label} is not ready")
                    self.memo[key] = st(out)
                except Exception as exc:
                    raise PipelineStageError(pipeline.name, i, exc) from exc
            out = self.memo[key]
        return out


@dataclass
class ImageResult:
    post: dict[str, np.ndarray]  # condition key -> posterior (o, p, r:<prober>, c:<prober>)
    emb: dict[str, np.ndarray]
    failures: list[dict] = field(default_factory=list)


def _evaluate_image(plan: ExperimentPlan, i: int) -> ImageResult:
    img = plan.dataset.images[i]
    scorer = plan.score_model
    res = ImageResult({}, {})

    def record(key: str, im: FaceImage, embed: bool = True) -> None:
        res.post[key] = scorer.predict_proba(im)[0]
        if embed:
            res.emb[key] = plan.verifier.embed(im)[0]

    record("o", img)
    try:
        enh = plan.privacy_model.enhance(img)
        if plan.quantize_enhanced:
            enh = quantize(enh)
    except Exception as exc:
        log.warning("enhancement failed on %s: %s", img.source_id, exc)
        res.failures.append({"image": img.source_id, "stage": "enhance", "error": str(exc)})
        return res
    record("p", enh)

    enh_runner, clean_runner = _PrefixRunner(enh), _PrefixRunner(img)
    for pl in plan.probers:
        try:
            record(f"r:{pl.name}", enh_runner.run(pl))
        except Exception as exc:
            log.warning("prober %s failed on %s: %s", pl.name, img.source_id, exc)
            res.failures.append({"image": img.source_id, "stage": pl.name, "error": str(exc)})
    det_scorer = plan.classifier
    for pl in plan.detection_probers:
        for tag, runner in (("dc", clean_runner), ("dp", enh_runner)):
            try:
                res.post[f"{tag}:{pl.name}"] = det_scorer.predict_proba(runner.run(pl))[0]
            except Exception as exc:
                log.warning("detection prober %s failed on %s: %s", pl.name, img.source_id, exc)
                res.failures.append({"image": img.source_id, "stage": f"detect:{pl.name}", "error": str(exc)})
    if plan.detection_probers:
        res.post["do"] = det_scorer.predict_proba(img)[0]
        res.post["dp"] = det_scorer.predict_proba(enh)[0]
    return res


@dataclass
class ExperimentRecord:
    """Per-image posteriors / embeddings for every condition, indexed by dataset position."""

    plan: ExperimentPlan
    index: np.ndarray  # dataset indices of evaluated test images
    post: dict[str, np.ndarray]  # key -> (n, K), NaN rows for failures
    emb: dict[str, np.ndarray]
    failures: list[dict]

    def rows(self, split: int) -> np.ndarray:
        return np.searchsorted(self.index, self.plan.splits.tests[split])


def collect_records(plan: ExperimentPlan) -> ExperimentRecord:
    idx = plan.splits.test_union
    if idx.size == 0:
        raise SplitError("no test images")
    if plan.workers > 1:
        with ThreadPoolExecutor(max_workers=plan.workers) as ex:
            results = list(ex.map(lambda i: _evaluate_image(plan, int(i)), idx))
    else:
        results = [_evaluate_image(plan, int(i)) for i in idx]
    K = len(plan.dataset.classes)
    keys = sorted({k for r in results for k in r.post})
    ekeys = sorted({k for r in results for k in r.emb})
    dim = next(len(v) for r in results for v in r.emb.values())
    post = {k: np.array([r.post.get(k, np.full(K, np.nan)) for r in results]) for k in keys}
    emb = {k: np.array([r.emb.get(k, np.full(dim, np.nan)) for r in results]) for k in ekeys}
    failures = [f for r in results for f in r.failures]
    return ExperimentRecord(plan, idx, post, emb, failures)


# ---------------------------------------------------------------------------
# AUCs and reports
# ---------------------------------------------------------------------------


def _gender_scores(rec: ExperimentRecord, key: str, split: int) -> tuple[np.ndarray, np.ndarray]:
    rows = rec.rows(split)
    s = rec.post[key][rows, 1]
    y = rec.plan.dataset.labels[rec.plan.splits.tests[split]]
    ok = np.isfinite(s)
    return s[ok], y[ok]


def _verif_scores(rec: ExperimentRecord, key: str, split: int) -> tuple[np.ndarray, np.ndarray]:
    rows = rec.rows(split)
    pairs = rec.plan.splits.pairs[split]
    E = rec.emb[key][rows]
    ea, eb = E[pairs.a], E[pairs.b]
    ok = np.all(np.isfinite(ea), axis=1) & np.all(np.isfinite(eb), axis=1)
    return cosine_scores(ea[ok], eb[ok]), pairs.mated[ok].astype(np.int8)


def _split_aucs(rec: ExperimentRecord, conds: Mapping[str, str]) -> dict[str, list[float]]:
    """``conds`` maps an AUC key (auc_go ...) to the record key holding its data."""
    out: dict[str, list[float]] = {}
    for k, src in conds.items():
        if src not in (rec.emb if k.startswith("auc_v") else rec.post):
            continue
        fn = _verif_scores if k.startswith("auc_v") else _gender_scores
        vals = []
        for s in range(len(rec.plan.splits.tests)):
            scores, labels = fn(rec, src, s)
            vals.append(auc(scores, labels))
        out[k] = vals
    return out


def _completed(rec: ExperimentRecord, keys: Sequence[str]) -> dict[str, int]:
    n = len(rec.index)
    ok = np.ones(n, dtype=bool)
    for k in keys:
        if k in rec.post:
            ok &= np.all(np.isfinite(rec.post[k]), axis=1)
        else:
            ok[:] = False
    return {"images": n, "complete": int(ok.sum())}


def robustness_reports(rec: ExperimentRecord) -> tuple[RobustnessReport, dict[str, RobustnessReport]]:
    inv = rec.plan.privacy_model.inverted
    base = {"auc_go": "o", "auc_gp": "p", "auc_vo": "o", "auc_vp": "p"}
    vanilla = RobustnessReport.from_split_aucs(_split_aucs(rec, base), None, inv, _completed(rec, ["o", "p"]))
    per = {}
    for pl in rec.plan.probers:
        key = f"r:{pl.name}"
        conds = dict(base, auc_gr=key, auc_vr=key)
        per[pl.name] = RobustnessReport.from_split_aucs(_split_aucs(rec, conds), pl.name, inv,
                                                       _completed(rec, ["o", "p", key]))
    return vanilla, per


@dataclass
class DetectionResult:
    probers: tuple[str, ...]
    weights: np.ndarray
    d_clean: np.ndarray  # (n, n_probers)
    d_enh: np.ndarray
    fin_clean: np.ndarray
    fin_enh: np.ndarray
    auc: Any
    eer: Any
    eer_threshold: Any
    fused_clean: np.ndarray | None = None
    fused_enh: np.ndarray | None = None
    fused_auc: Any = None


def detection_results(rec: ExperimentRecord) -> DetectionResult | None:
    plan = rec.plan
    if not plan.detection_probers:
        return None
    names = tuple(p.name for p in plan.detection_probers)
    n = len(names)
    w = np.full(n, 1.0 / n) if plan.detection_weights is None else np.asarray(plan.detection_weights, float)
    if w.shape != (n,) or np.any(w < 0) or not np.any(w > 0):
        raise ConfigurationError("detection weights must be non-negative, one per prober, not all zero")

    def scores(base_key: str, tag: str) -> tuple[np.ndarray, np.ndarray]:
        base = rec.post[base_key]
        D = np.stack([dds_chi_square_rows(np.nan_to_num(base), np.nan_to_num(rec.post[f"{tag}:{nm}"]))
                      for nm in names], axis=1)
        D[~np.all(np.isfinite(base), axis=1)] = np.nan
        for j, nm in enumerate(names):
            D[~np.all(np.isfinite(rec.post[f"{tag}:{nm}"]), axis=1), j] = np.nan
        fin = np.array([combine(r, w)[0] if np.any(np.isfinite(r) & (w > 0)) else np.nan for r in D])
        return D, fin

    Dc, fc = scores("do", "dc")
    Dp, fp = scores("dp", "dp")
    res = DetectionResult(names, w, Dc, Dp, fc, fp, None, None, None)
    aucs, eers, thrs = [], [], []
    for s in range(len(plan.splits.tests)):
        rows = rec.rows(s)
        c, t = fc[rows], fp[rows]
        ev = evaluate_detector(t[np.isfinite(t)], c[np.isfinite(c)])
        aucs.append(ev.auc), eers.append(ev.eer), thrs.append(ev.eer_threshold)
    res.auc, res.eer, res.eer_threshold = split_statistics(aucs), split_statistics(eers), split_statistics(thrs)
    if plan.external_scores is not None:
        ids = [plan.dataset.images[i].source_id for i in rec.index]
        ext = plan.external_scores
        try:
            ec = np.array([ext[(sid, "o")] for sid in ids])
            ep = np.array([ext[(sid, "p")] for sid in ids])
        except KeyError as exc:
            raise ConfigurationError(f"external score missing for {exc.args[0]}") from None
        res.fused_clean = np.array([fuse_with_supervised(a, b, plan.alpha) if np.isfinite(a) else np.nan
                                    for a, b in zip(fc, ec)])
        res.fused_enh = np.array([fuse_with_supervised(a, b, plan.alpha) if np.isfinite(a) else np.nan
                                  for a, b in zip(fp, ep)])
        fa = []
        for s in range(len(plan.splits.tests)):
            rows = rec.rows(s)
            c, t = res.fused_clean[rows], res.fused_enh[rows]
            fa.append(evaluate_detector(t[np.isfinite(t)], c[np.isfinite(c)]).auc)
        res.fused_auc = split_statistics(fa)
    return res


@dataclass
class ExperimentResult:
    record: ExperimentRecord
    vanilla: RobustnessReport
    reports: dict[str, RobustnessReport]
    detection: DetectionResult | None


def run_robustness_experiment(plan: ExperimentPlan) -> ExperimentResult:
    """Enhance, recover and score every test image; derive the per-prober reports."""
    rec = collect_records(plan)
    vanilla, per = robustness_reports(rec)
    return ExperimentResult(rec, vanilla, per, detection_results(rec))


def run_detection_experiment(plan: ExperimentPlan) -> DetectionResult:
    """APEND on the clean and enhanced test images only (no robustness probers)."""
    if not plan.detection_probers:
        raise ConfigurationError("no detection probers configured")
    light = ExperimentPlan(**{**plan.__dict__, "probers": []})
    return detection_results(collect_records(light))


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def _clean(obj):
    """JSON-safe copy: NaN/inf become None, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def report_dict(result: ExperimentResult) -> dict:
    plan = result.record.plan
    sp = plan.splits
    pm = plan.privacy_model
    d: dict[str, Any] = {
        "format": REPORT_FORMAT,
        "seed": plan.seed,
        "dataset": {"name": plan.dataset.name, "n_images": len(plan.dataset), "classes": list(plan.dataset.classes),
                    "positive_class": plan.dataset.classes[1]},
        "privacy_model": {"name": pm.name, "kind": pm.kind.value, "inverted_override": pm.inverted},
        "splits": {
            "n_test_splits": len(sp.tests),
            "train_images": int(sp.train.size),
            "test_images": [int(t.size) for t in sp.tests],
            "mated_pairs": [p.n_mated for p in sp.pairs],
            "nonmated_pairs": [p.n_nonmated for p in sp.pairs],
            "excluded_subjects": list(sp.excluded_subjects),
        },
        "vanilla": result.vanilla.to_dict(),
        "probers": {k: v.to_dict() for k, v in result.reports.items()},
        "failures": sorted(result.record.failures, key=lambda f: (f["image"], f["stage"])),
    }
    det = result.detection
    if det is not None:
        d["detection"] = {"probers": list(det.probers), "weights": det.weights.tolist(),
                          "auc": det.auc.to_dict(), "eer": det.eer.to_dict(),
                          "eer_threshold": det.eer_threshold.to_dict()}
        if det.fused_auc is not None:
            d["detection"]["alpha"] = plan.alpha
            d["detection"]["fused_auc"] = det.fused_auc.to_dict()
    return _clean(d)


def validate_report(d: Mapping) -> None:
    jsonschema.validate(d, load_schema("report.schema.json"))


def dump_json(d: Mapping) -> str:
    return json.dumps(d, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _roc_rows(rec: ExperimentRecord, key: str, src: str):
    fn = _verif_scores if key.startswith("auc_v") else _gender_scores
    for s in range(len(rec.plan.splits.tests)):
        thr, fpr, tpr = roc_curve(*fn(rec, src, s))
        for t, f, p in zip(thr, fpr, tpr):
            yield s, t, f, p


def emit_reports(result: ExperimentResult | None, out_dir: str | Path) -> dict[str, Path]:
    """Write report.json, ROC CSVs, per-image scores and the AUC-difference table.

    Everything is rendered in memory first, so a failure leaves no partial output.
    """
    if result is None or len(result.record.index) == 0:
        raise MetricError("empty experiment record; nothing to report")
    rec = result.record
    files: dict[str, str] = {}
    rep = report_dict(result)
    validate_report(rep)
    files["report.json"] = dump_json(rep)

    curves = {"auc_go": "o", "auc_gp": "p", "auc_vo": "o", "auc_vp": "p"}
    for key, src in curves.items():
        if src in rec.post:
            files[f"roc/{key}.csv"] = _csv_text(("split", "threshold", "fpr", "tpr"), _roc_rows(rec, key, src))
    for name in result.reports:
        src = f"r:{name}"
        if src in rec.post:
            for key in ("auc_gr", "auc_vr"):
                files[f"roc/{key}__{name}.csv"] = _csv_text(("split", "threshold", "fpr", "tpr"),
                                                           _roc_rows(rec, key, src))

    split_of = np.empty(len(rec.index), dtype=np.int64)
    for s in range(len(rec.plan.splits.tests)):
        split_of[rec.rows(s)] = s
    ds = rec.plan.dataset
    rows = []
    for key in sorted(k for k in rec.post if k in ("o", "p") or k.startswith("r:")):
        cond, _, prober = key.partition(":")
        for n, i in enumerate(rec.index):
            v = rec.post[key][n, 1]
            rows.append((ds.images[i].source_id, ds.subjects[i], ds.classes[ds.labels[i]], int(split_of[n]),
                         cond, prober, float(v) if np.isfinite(v) else ""))
    files["scores.csv"] = _csv_text(("image", "subject_id", "attribute", "split", "condition", "prober",
                                     "p_positive"), rows)

    drows = []
    for name, r in result.reports.items():
        if "auc_gr" not in r.auc or "auc_vr" not in r.auc:
            continue
        for s in range(len(rec.plan.splits.tests)):
            drows.append((name, s, r.auc["auc_vo"].values[s] - r.auc["auc_vr"].values[s],
                          r.auc["auc_go"].values[s] - r.auc["auc_gr"].values[s]))
    files["delta_auc.csv"] = _csv_text(("prober", "split", "delta_auc_v", "delta_auc_g"), drows)

    det = result.detection
    if det is not None:
        hdr = ["image", "split", "set"] + [f"d_{p}" for p in det.probers] + ["d_fin"]
        if det.fused_clean is not None:
            hdr.append("fused")
        rows = []
        for tag, D, fin, fused in (("clean", det.d_clean, det.fin_clean, det.fused_clean),
                                   ("enhanced", det.d_enh, det.fin_enh, det.fused_enh)):
            for n, i in enumerate(rec.index):
                row = [ds.images[i].source_id, int(split_of[n]), tag] + [
                    float(v) if np.isfinite(v) else "" for v in D[n]] + [
                    float(fin[n]) if np.isfinite(fin[n]) else ""]
                if fused is not None:
                    row.append(float(fused[n]) if np.isfinite(fused[n]) else "")
                rows.append(row)
        files["detection_scores.csv"] = _csv_text(hdr, rows)

    out = Path(out_dir)
    written = {}
    for rel, text in files.items():
        p = out / rel
        try:
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {p}: {exc}") from exc
        written[rel] = p
    return written


def load_report(path: str | Path) -> dict:
    d = json.loads(Path(path).read_text())
    validate_report(d)
    return d


def reports_from_json(d: Mapping) -> tuple[RobustnessReport, dict[str, RobustnessReport]]:
    return (RobustnessReport.from_dict(d["vanilla"]),
            {k: RobustnessReport.from_dict(v) for k, v in d["probers"].items()})


def recompute_check(d: Mapping) -> list[str]:
    """Re-derive every score from the stored per-split AUCs; return the keys that differ."""
    bad = []
    sections = {"vanilla": d["vanilla"], **{f"probers.{k}": v for k, v in d["probers"].items()}}
    for name, sec in sections.items():
        rep = RobustnessReport.from_dict(sec)
        again = _clean(rep.recompute().to_dict())
        for k in ("sr", "il", "pic", "arr", "arr_clamped"):
            if sec.get(k) != again.get(k):
                bad.append(f"{name}.{k}")
    return bad


# ---------------------------------------------------------------------------
# building a plan from a config
# ---------------------------------------------------------------------------


def _cached(kind: str, key: Mapping, loader, builder):
    d = cache_dir()
    if d is None:
        return builder()
    path = d / f"{kind}-{config_digest(key)}.sbpw"
    if path.exists():
        log.info("loading cached %s from %s", kind, path)
        return loader(path)
    obj = builder()
    obj.save(path)
    return obj


def load_dataset(cfg: Mapping) -> Dataset:
    dc = cfg["dataset"]
    if dc.get("manifest"):
        return dataset_from_manifest(read_manifest(dc["manifest"]), dc["classes"], dc["positive_class"])
    toy = dc.get("toy") or {}
    samples = generate_toy_dataset(toy.get("n_subjects", 100), toy.get("images_per_subject", 5),
                                   toy.get("size", 32), toy.get("seed", 0))
    return dataset_from_samples(samples)


def train_classifier(cfg_section: Mapping, ds: Dataset, idx: np.ndarray, seed: int, identifier: str):
    if cfg_section.get("weights"):
        return SoftmaxClassifier.load(cfg_section["weights"])
    key = {**cfg_section, "seed": seed, "data": ds.fingerprint(idx), "id": identifier}

    def build():
        return train_toy_classifier([ds.images[i] for i in idx], ds.labels[idx], hidden=cfg_section["hidden"],
                                    classes=ds.classes, seed=seed, epochs=cfg_section["epochs"],
                                    lr=cfg_section["lr"], l2=cfg_section["l2"], identifier=identifier)
    return _cached("classifier", key, SoftmaxClassifier.load, build)


def build_toolkit(cfg: Mapping, ds: Dataset, train_idx: np.ndarray) -> RecoveryToolkit:
    seed = cfg["seed"]
    made = {}
    for role, spec in cfg["backends"].items():
        spec = dict(spec)
        kind = spec.pop("kind")
        ident = spec.pop("identifier", None)
        weights = spec.pop("weights", None)
        spec.pop("deterministic", None)
        if kind == "dense_autoencoder" and weights is None:
            spec.setdefault("seed", derive_seed(seed, "autoencoder"))
            key = {"kind": kind, **spec, "data": ds.fingerprint(train_idx)}
            ae_spec, ae_ident = dict(spec), ident

            def build(ae_spec=ae_spec, ae_ident=ae_ident):
                return make_backend("dense_autoencoder", ae_ident, **ae_spec).fit(
                    [ds.images[i].pixels for i in train_idx])
            from .backends import DenseAutoencoder
            made[role] = _cached("autoencoder", key, lambda p: DenseAutoencoder.load(p, ae_ident), build)
        else:
            made[role] = make_backend(kind, ident, weights, **spec)
    sched = ChessPatternConfig.from_dict(cfg["schedule"], image_dims=ds.images[0].shape)
    sr = cfg["super_resolution"]
    return RecoveryToolkit(schedule=sched, sr_factor=sr["factor"],
                           sr_low_res=tuple(sr["low_res"]) if sr["low_res"] else None, **made)


def build_privacy_model(name: str, spec: Mapping, cfg: Mapping, ds: Dataset, train_idx: np.ndarray,
                        classifier: SoftmaxClassifier, verifier) -> PrivacyModel:
    spec = dict(spec)
    kind = PrivacyKind(spec.pop("kind"))
    inverted = spec.pop("inverted", None)
    if kind is PrivacyKind.ADVERSARIAL:
        return PrivacyModel(name, kind, classifier, spec, inverted=inverted)
    if kind is PrivacyKind.SYNTHESIS:
        weights = spec.pop("weights", None)
        if weights:
            return PrivacyModel(name, kind, model=SynthesisModel.load(weights), inverted=inverted)
        seed = derive_seed(cfg["seed"], f"privacy:{name}")
        key = {**spec, "seed": seed, "data": ds.fingerprint(train_idx), "clf": classifier.trained_on}

        def build():
            m = SynthesisModel(seed=seed, identifier=name, **spec)
            return m.fit([ds.images[i] for i in train_idx], ds.labels[train_idx], verifier=verifier,
                         aux_classifier=classifier)
        return PrivacyModel(name, kind, model=_cached("synthesis", key, SynthesisModel.load, build),
                            inverted=inverted)
    directory = spec.pop("directory", None)
    return PrivacyModel(name, kind, external_dir=Path(directory) if directory else None, inverted=inverted)


def read_external_scores(path: str | Path) -> dict[tuple[str, str], float]:
    """CSV with columns image, condition (o = clean, p = enhanced), score."""
    out = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out[(r["image"], r.get("condition", "p") or "p")] = float(r["score"])
    return out


@dataclass
class Components:
    dataset: Dataset
    splits: Splits
    classifier: SoftmaxClassifier
    scorer: SoftmaxClassifier | None
    verifier: PCAVerifier
    toolkit: RecoveryToolkit


def build_components(cfg: Mapping, dataset: Dataset | None = None) -> Components:
    ds = dataset if dataset is not None else load_dataset(cfg)
    sc = cfg["splits"]
    seed = cfg["seed"]
    splits = build_splits(ds, sc["n_test_splits"], sc["train_fraction"], sc["min_test_images"],
                          sc["nonmated_cap"], derive_seed(seed, "splits"))
    if splits.train.size == 0 and not cfg["classifier"].get("weights"):
        raise ConfigurationError("train_fraction 0 needs pretrained classifier weights")
    clf = train_classifier(cfg["classifier"], ds, splits.train,
                           cfg["classifier"].get("seed", derive_seed(seed, "classifier")), "steering")
    scorer = None
    if cfg.get("scorer"):
        sc_cfg = {**cfg["classifier"], **cfg["scorer"]}
        scorer = train_classifier(sc_cfg, ds, splits.train, sc_cfg.get("seed", derive_seed(seed, "scorer")),
                                  "scorer")
    vc = cfg["verifier"]
    if vc.get("weights"):
        ver = PCAVerifier.load(vc["weights"])
    else:
        ver = PCAVerifier(vc["embedding_dim"], vc["whiten"]).fit([ds.images[i] for i in splits.train])
    return Components(ds, splits, clf, scorer, ver, build_toolkit(cfg, ds, splits.train))


def build_plan(cfg: Mapping, dataset: Dataset | None = None, privacy_model: str | None = None,
               components: Components | None = None) -> ExperimentPlan:
    comp = components or build_components(cfg, dataset)
    name = privacy_model or cfg["privacy_model"]
    if name not in cfg["privacy_models"]:
        raise ConfigurationError(f"unknown privacy model {name!r}")
    pm = build_privacy_model(name, cfg["privacy_models"][name], cfg, comp.dataset, comp.splits.train,
                             comp.classifier, comp.verifier)
    tk = comp.toolkit
    probers = [tk.pipeline(p) for p in cfg["probers"]]
    det = cfg["detection"]
    det_probers = [tk.pipeline(p) for p in det["probers"]] if det["enabled"] else []
    ext = read_external_scores(det["external_scores"]) if det.get("external_scores") else None
    return ExperimentPlan(comp.dataset, comp.splits, pm, probers, comp.classifier, comp.verifier, comp.scorer,
                          det_probers, det["weights"], det["alpha"], ext, cfg["quantize_enhanced"], cfg["seed"],
                          cfg["workers"])
