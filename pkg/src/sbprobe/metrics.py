"""ROC/AUC and the scalar robustness scores SR, IL, PIC and ARR.

AUC is the exact Mann-Whitney rank statistic (ties count one half). The
scalar scores accept plain floats or numpy arrays of the same shape, so a
whole grid of AUC values can be checked in one call.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import MetricError, SplitError


class Task(str, enum.Enum):
    GENDER = "g"
    VERIFICATION = "v"


class Condition(str, enum.Enum):
    ORIGINAL = "o"
    ENHANCED = "p"
    RECOVERED = "r"


class ArrClampWarning(UserWarning):
    """ARR exceeded 1 and was clamped."""


@dataclass(frozen=True)
class ScoredOutcomes:
    scores: np.ndarray
    labels: np.ndarray
    task: Task = Task.GENDER
    condition: Condition = Condition.ORIGINAL

    def __post_init__(self) -> None:
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        y = np.asarray(self.labels).reshape(-1)
        if s.shape != y.shape:
            raise MetricError(f"{s.size} scores but {y.size} labels")
        if not np.all(np.isin(y, (0, 1))):
            raise MetricError("labels must be binary (0/1)")
        y = y.astype(np.int8)
        if s.size < 2 or y.min() == y.max():
            raise MetricError("AUC needs at least one positive and one negative outcome")
        if not np.all(np.isfinite(s)):
            raise MetricError("scores must be finite")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "condition", Condition(self.condition))

    @property
    def key(self) -> str:
        return f"auc_{self.task.value}{self.condition.value}"


def _outcomes(scores, labels=None) -> ScoredOutcomes:
    if isinstance(scores, ScoredOutcomes):
        return scores
    if labels is None:
        raise MetricError("labels are required")
    return ScoredOutcomes(scores, labels)


def auc(scores, labels=None) -> float:
    """P(score_pos > score_neg) + 0.5 P(equal), from average ranks."""
    o = _outcomes(scores, labels)
    pos = o.labels == 1
    n1 = int(pos.sum())
    n0 = o.labels.size - n1
    r = rankdata(o.scores)
    u = r[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def roc_curve(scores, labels=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, fpr, tpr) for the rule ``score >= threshold``; starts at (+inf, 0, 0)."""
    o = _outcomes(scores, labels)
    order = np.argsort(-o.scores, kind="mergesort")
    s, y = o.scores[order], o.labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    n1 = int(y.sum())
    n0 = y.size - n1
    thr = np.r_[np.inf, s[last]]
    return thr, np.r_[0.0, fp / n0], np.r_[0.0, tp / n1]


def roc_auc_trapezoid(scores, labels=None) -> float:
    _, fpr, tpr = roc_curve(scores, labels)
    return float(np.trapezoid(tpr, fpr))


# ---------------------------------------------------------------------------
# scalar scores
# ---------------------------------------------------------------------------


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def _positive(name: str, x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if np.any(~(a > 0)):
        raise MetricError(f"{name} must be > 0")
    return a


def is_inverted(auc_gp, override: bool | None = None):
    """Default rule: the enhancement inverts decisions when AUC_gp < 0.5."""
    if override is not None:
        return override
    r = np.asarray(auc_gp) < 0.5
    return bool(r) if r.ndim == 0 else r


def decision_adjust(auc_gp, inverted):
    """f(x) = x for inverted decisions, max(x - 0.5, 0) otherwise."""
    x = np.asarray(auc_gp, dtype=np.float64)
    return _out(np.where(inverted, x, np.maximum(x - 0.5, 0.0)))


def suppression_rate(auc_go, auc_gp, inverted):
    go = _positive("auc_go", auc_go)
    return _out(np.maximum((go - decision_adjust(auc_gp, inverted)) / go, 0.0))


def identity_loss(auc_vo, auc_vp):
    vo = _positive("auc_vo", auc_vo)
    return _out(np.maximum((vo - np.asarray(auc_vp, dtype=np.float64)) / vo, 0.0))


def pic(sr, il):
    return _out(np.asarray(sr, dtype=np.float64) - np.asarray(il, dtype=np.float64))


def arr_raw(auc_go, auc_gp, auc_gr, inverted):
    """Unclamped ARR = g * |AUC_go - AUC_gr| / AUC_go with g = 1 (inverted) or 2."""
    go = _positive("auc_go", auc_go)
    g = np.where(inverted, 1.0, 2.0)
    return _out(g * np.abs(go - np.asarray(auc_gr, dtype=np.float64)) / go)


def arr_with_flag(auc_go, auc_gp, auc_gr, inverted):
    raw = np.asarray(arr_raw(auc_go, auc_gp, auc_gr, inverted))
    clamped = raw > 1.0 + 1e-12  # rounding at the band edge is not worth a flag
    return _out(np.minimum(raw, 1.0)), (bool(clamped) if clamped.ndim == 0 else clamped)


def arr(auc_go, auc_gp, auc_gr, inverted):
    """ARR clamped to [0, 1]; an :class:`ArrClampWarning` is issued when clamping happens."""
    val, clamped = arr_with_flag(auc_go, auc_gp, auc_gr, inverted)
    if np.any(clamped):
        warnings.warn("ARR exceeded 1 and was clamped", ArrClampWarning, stacklevel=2)
    return val


# ---------------------------------------------------------------------------
# split statistics and reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitStat:
    mean: float
    se: float  # NaN when fewer than two splits
    values: tuple[float, ...] = ()

    @property
    def se_defined(self) -> bool:
        return not math.isnan(self.se)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "se": None if math.isnan(self.se) else self.se, "splits": list(self.values)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitStat":
        se = d.get("se")
        return cls(float(d["mean"]), math.nan if se is None else float(se), tuple(float(v) for v in d.get("splits", ())))

    def __str__(self) -> str:
        return f"{self.mean:.3f}" if math.isnan(self.se) else f"{self.mean:.3f}±{self.se:.3f}"


def split_statistics(values: Sequence[float]) -> SplitStat:
    """Mean and standard error (sample std with n - 1, over sqrt n); SE is NaN for one value."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise SplitError("no split values")
    m = float(v.mean())
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size >= 2 else math.nan
    return SplitStat(m, se, tuple(float(x) for x in v))


AUC_KEYS = ("auc_go", "auc_gp", "auc_gr", "auc_vo", "auc_vp", "auc_vr")


@dataclass
class RobustnessReport:
    """AUCs per condition and derived scores, each summarised over the test splits.

    Only keys whose inputs were evaluated are present. ``pic.mean`` is
    ``sr.mean - il.mean`` exactly; per-split PIC values are ``sr_s - il_s``.
    """

    prober: str | None
    auc: dict[str, SplitStat]
    inverted: bool
    sr: SplitStat | None = None
    il: SplitStat | None = None
    pic: SplitStat | None = None
    arr: SplitStat | None = None
    arr_clamped: bool = False
    completed: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_split_aucs(cls, split_aucs: Mapping[str, Sequence[float]], prober: str | None = None,
                        inverted_override: bool | None = None,
                        completed: Mapping[str, int] | None = None) -> "RobustnessReport":
        """Derive every score per split from the AUCs and summarise across splits."""
        aucs = {k: np.asarray(v, dtype=np.float64) for k, v in split_aucs.items() if k in AUC_KEYS}
        unknown = set(split_aucs) - set(AUC_KEYS)
        if unknown:
            raise MetricError(f"unknown AUC keys {sorted(unknown)}")
        lens = {len(v) for v in aucs.values()}
        if len(lens) != 1:
            raise SplitError("all conditions need the same number of splits")
        stats = {k: split_statistics(v) for k, v in aucs.items()}
        inverted = False
        if "auc_gp" in aucs:
            inverted = bool(is_inverted(stats["auc_gp"].mean, inverted_override))
        elif inverted_override is not None:
            inverted = inverted_override
        rep = cls(prober, stats, inverted, completed=dict(completed or {}))
        sr_v = il_v = None
        if "auc_go" in aucs and "auc_gp" in aucs:
            sr_v = np.asarray(suppression_rate(aucs["auc_go"], aucs["auc_gp"], inverted))
            rep.sr = split_statistics(sr_v)
        if "auc_vo" in aucs and "auc_vp" in aucs:
            il_v = np.asarray(identity_loss(aucs["auc_vo"], aucs["auc_vp"]))
            rep.il = split_statistics(il_v)
        if sr_v is not None and il_v is not None:
            s = split_statistics(pic(sr_v, il_v))
            rep.pic = SplitStat(rep.sr.mean - rep.il.mean, s.se, s.values)
        if all(k in aucs for k in ("auc_go", "auc_gp", "auc_gr")):
            a, flags = arr_with_flag(aucs["auc_go"], aucs["auc_gp"], aucs["auc_gr"], inverted)
            rep.arr = split_statistics(a)
            rep.arr_clamped = bool(np.any(flags))
        return rep

    def split_aucs(self) -> dict[str, list[float]]:
        return {k: list(v.values) for k, v in self.auc.items()}

    def to_dict(self) -> dict:
        d: dict = {"prober": self.prober, "inverted": self.inverted}
        for k in AUC_KEYS:
            if k in self.auc:
                d[k] = self.auc[k].to_dict()
        for k in ("sr", "il", "pic", "arr"):
            v = getattr(self, k)
            if v is not None:
                d[k] = v.to_dict()
        if self.arr is not None:
            d["arr_clamped"] = self.arr_clamped
        if self.completed:
            d["completed"] = dict(self.completed)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RobustnessReport":
        rep = cls(d.get("prober"), {k: SplitStat.from_dict(d[k]) for k in AUC_KEYS if k in d},
                  bool(d["inverted"]), arr_clamped=bool(d.get("arr_clamped", False)),
                  completed=dict(d.get("completed", {})))
        for k in ("sr", "il", "pic", "arr"):
            if k in d:
                setattr(rep, k, SplitStat.from_dict(d[k]))
        return rep

    def recompute(self) -> "RobustnessReport":
        """Rebuild the derived scores from the stored per-split AUCs (inversion flag kept)."""
        return RobustnessReport.from_split_aucs(self.split_aucs(), self.prober, self.inverted, self.completed)
