"""APEND: training-free detection of privacy enhancement.

Each prober (a recovery pipeline) is run on the image; the chi-square distance
between the classifier posteriors before and after recovery is the prober's
score ``d_i``, and ``d_fin = sum_i w_i d_i``. Enhanced images sit close to a
decision boundary the probers push them back across, so their scores are
large; clean images barely move.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .classifiers import classify, classify_batch
from .errors import ConfigurationError, MetricError
from .imaging import FaceImage, PosteriorDistribution
from .metrics import auc, roc_curve
from .recovery import RecoveryPipeline

log = logging.getLogger(__name__)

DEFAULT_PROBERS = ("PP-A", "PP-DI", "PP-B")
FUSION_EPS = 1e-9


def _probs(p) -> np.ndarray:
    return p.probabilities if isinstance(p, PosteriorDistribution) else np.asarray(p, dtype=np.float64)


def dds_chi_square(p, q) -> float:
    """sum_k (p_k - q_k)^2 / (p_k + q_k), skipping bins where both are zero."""
    a, b = _probs(p), _probs(q)
    if a.shape != b.shape:
        raise ConfigurationError(f"posterior lengths differ: {a.size} vs {b.size}")
    s = a + b
    nz = s > 0
    return float(np.sum((a[nz] - b[nz]) ** 2 / s[nz]))


def dds_chi_square_rows(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Row-wise :func:`dds_chi_square` for (n, K) posterior matrices."""
    P, Q = np.asarray(P, dtype=np.float64), np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ConfigurationError(f"posterior matrices differ: {P.shape} vs {Q.shape}")
    s = P + Q
    num = (P - Q) ** 2
    return np.sum(np.divide(num, s, out=np.zeros_like(s), where=s > 0), axis=1)


@dataclass
class DetectorConfig:
    probers: Sequence[RecoveryPipeline]
    classifier: object
    weights: Sequence[float] | None = None
    workers: int = 1

    def __post_init__(self) -> None:
        self.probers = tuple(self.probers)
        n = len(self.probers)
        if n == 0:
            raise ConfigurationError("APEND needs at least one prober")
        names = [p.name for p in self.probers]
        if len(set(names)) != n:
            raise ConfigurationError(f"probers must be distinct, got {names}")
        w = np.full(n, 1.0 / n) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if w.shape != (n,):
            raise ConfigurationError(f"{n} probers but {w.size} weights")
        if not np.all(np.isfinite(w)) or np.any(w < 0) or not np.any(w > 0):
            raise ConfigurationError("weights must be finite, non-negative and not all zero")
        self.weights = w

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.probers)


@dataclass
class DetectionScore:
    per_prober: np.ndarray  # NaN where the prober failed
    weights: np.ndarray  # effective (renormalised) weights
    d_fin: float
    failed: tuple[str, ...] = ()
    source_id: str = ""
    fused: float | None = None

    def decision_at(self, threshold: float) -> bool:
        return self.d_fin >= threshold

    def to_dict(self, names: Sequence[str]) -> dict:
        d = {"source_id": self.source_id, "probers": list(names),
             "d": [None if np.isnan(v) else float(v) for v in self.per_prober],
             "d_fin": self.d_fin}
        if self.failed:
            d["failed"] = list(self.failed)
        if self.fused is not None:
            d["fused"] = self.fused
        return d


def combine(d: np.ndarray, weights: np.ndarray) -> tuple[float, np.ndarray]:
    """d_fin over the finite entries of ``d``; failed probers' weight is spread over the rest.

    With no failures the weights are used as given, so ``d_fin = sum w_i d_i`` exactly.
    """
    ok = np.isfinite(d)
    if ok.all():
        return float(np.dot(weights, d)), weights
    w = np.where(ok, weights, 0.0)
    if not w.sum() > 0:
        raise MetricError("every prober with non-zero weight failed")
    w = w * (weights.sum() / w.sum())
    return float(np.dot(w[ok], d[ok])), w


def apend_score(image: FaceImage, cfg: DetectorConfig) -> DetectionScore:
    base = classify(cfg.classifier, image).probabilities

    def one(pl: RecoveryPipeline) -> float:
        try:
            rec = pl(image)
        except Exception as exc:
            log.warning("prober %s failed on %r: %s", pl.name, image.source_id, exc)
            return np.nan
        return dds_chi_square(base, classify(cfg.classifier, rec))

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as ex:
            d = np.array(list(ex.map(one, cfg.probers)))
    else:
        d = np.array([one(p) for p in cfg.probers])
    d_fin, w = combine(d, cfg.weights)
    failed = tuple(n for n, v in zip(cfg.names, d) if not np.isfinite(v))
    return DetectionScore(d, w, d_fin, failed, image.source_id)


def apend_scores_from_posteriors(base: np.ndarray, recovered: Sequence[np.ndarray],
                                 weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch form: ``recovered[i]`` is the (n, K) posterior matrix under prober i (NaN rows = failure).

    Returns (per-prober scores of shape (n, n_probers), d_fin of shape (n,)).
    """
    D = np.stack([dds_chi_square_rows(base, np.nan_to_num(R, nan=0.0)) for R in recovered], axis=1)
    for i, R in enumerate(recovered):
        D[np.isnan(R).any(axis=1), i] = np.nan
    fin = np.array([combine(row, np.asarray(weights, dtype=np.float64))[0] for row in D])
    return D, fin


def fuse_with_supervised(apend: float, external: float, alpha: float = 0.5) -> float:
    """Weighted product ``apend^alpha * external^(1 - alpha)``; zero scores are shifted by 1e-9."""
    if apend < 0 or external < 0:
        raise MetricError("fusion scores must be non-negative")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError("alpha must lie in [0, 1]")
    if alpha == 1.0:
        return float(apend)
    if alpha == 0.0:
        return float(external)
    a = apend if apend > 0 else FUSION_EPS
    e = external if external > 0 else FUSION_EPS
    return float(np.exp(alpha * np.log(a) + (1.0 - alpha) * np.log(e)))


@dataclass(frozen=True)
class DetectorEvaluation:
    auc: float
    eer_threshold: float
    eer: float
    roc: tuple[np.ndarray, np.ndarray, np.ndarray] = field(repr=False, default=None)


def evaluate_detector(scores_tampered: Sequence[float], scores_clean: Sequence[float]) -> DetectorEvaluation:
    """Detection AUC and the EER operating point (tampered = positive class).

    EER is located where FNR - FPR changes sign along the ROC, interpolating
    linearly between the two adjacent thresholds.
    """
    t = np.asarray(scores_tampered, dtype=np.float64)
    c = np.asarray(scores_clean, dtype=np.float64)
    if t.size == 0 or c.size == 0:
        raise MetricError("both score sets must be non-empty")
    s = np.r_[t, c]
    y = np.r_[np.ones(t.size, dtype=int), np.zeros(c.size, dtype=int)]
    a = auc(s, y)
    thr, fpr, tpr = roc_curve(s, y)
    fnr = 1.0 - tpr
    diff = fnr - fpr  # starts at 1, ends at -1
    k = int(np.argmax(diff <= 0))
    if diff[k] == 0:
        eer, th = fpr[k], thr[k]
    else:
        f = diff[k - 1] / (diff[k - 1] - diff[k])
        eer = fpr[k - 1] + f * (fpr[k] - fpr[k - 1])
        t0 = thr[k - 1] if np.isfinite(thr[k - 1]) else thr[k]
        th = t0 + f * (thr[k] - t0)
    return DetectorEvaluation(a, float(th), float(eer), (thr, fpr, tpr))


def batch_apend(images: Sequence[FaceImage], cfg: DetectorConfig) -> list[DetectionScore]:
    return [apend_score(im, cfg) for im in images]


def posterior_matrix(classifier, images: Sequence[FaceImage]) -> np.ndarray:
    return classify_batch(classifier, list(images))
