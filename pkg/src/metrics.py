#!/usr/bin/env python3
"""
MSVL Toolkit — Evaluation Statistics (ROC/AUROC, bootstrap CI, DeLong, Youden, confusion)
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import norm, rankdata

from utils.errors import ArtifactIOError, DegenerateInputError, FormatError, RejectedInputError

logger = logging.getLogger(__name__)

SIGNIFICANCE = 0.01
SCORE_COLUMNS = ["id", "score", "label", "group"]


@dataclass(frozen=True)
class ScoredSample:
    score: float
    label: int
    group: Optional[str] = None
    id: Optional[str] = None

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise RejectedInputError(f"Sample {self.id}: score must be finite, got {self.score}")
        if not 0.0 <= self.score <= 1.0:
            raise RejectedInputError(f"Sample {self.id}: score must be in [0, 1], got {self.score}")
        if self.label not in (0, 1):
            raise RejectedInputError(f"Sample {self.id}: label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class RocPoint:
    fpr: float
    tpr: float
    threshold: float


@dataclass(frozen=True)
class ConfusionMetrics:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    f1: float


@dataclass(frozen=True)
class DelongResult:
    auc_a: float
    auc_b: float
    p_value: float
    z: float
    degenerate: bool = False


@dataclass(frozen=True)
class GroupAccuracy:
    group: str
    n: int
    accuracy: float


@dataclass
class EvalReport:
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    f1: float
    auroc: float
    ci_low: float
    ci_high: float
    cutoff: float
    n_pos: int
    n_neg: int
    p_value: Optional[float] = None
    model: str = ""
    ci_excludes_point: bool = False
    is_reference: bool = False
    compared_to: Optional[str] = None
    strata: List[GroupAccuracy] = field(default_factory=list)
    roc: List[RocPoint] = field(default_factory=list)

    def to_json(self) -> dict:
        """Plain-JSON dict; infinite cutoffs/thresholds are written as the strings "inf"/"-inf"."""
        payload = asdict(self)
        payload["cutoff"] = _json_float(self.cutoff)
        payload["roc"] = [
            {"fpr": p.fpr, "tpr": p.tpr, "threshold": _json_float(p.threshold)} for p in self.roc
        ]
        payload["row"] = format_row(self)
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "EvalReport":
        data = {k: v for k, v in payload.items() if k != "row"}
        try:
            data["cutoff"] = float(data["cutoff"])
            data["strata"] = [GroupAccuracy(**g) for g in data.get("strata", [])]
            data["roc"] = [
                RocPoint(float(p["fpr"]), float(p["tpr"]), float(p["threshold"]))
                for p in data.get("roc", [])
            ]
            return cls(**data)
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"Malformed report JSON: {e}") from e


def _json_float(value: float):
    if value is None or math.isfinite(value):
        return value
    return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")


# -------------------------------
# Helpers
# -------------------------------
def _arrays(samples: Sequence[ScoredSample]) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.array([s.score for s in samples], dtype=np.float64)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return scores, labels


def _require_both_classes(labels: np.ndarray) -> Tuple[int, int]:
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError(f"Need both classes, got {n_pos} positive and {n_neg} negative samples")
    return n_pos, n_neg


def _auc_from_scores(pos: np.ndarray, neg: np.ndarray) -> float:
    """Mann–Whitney U / (n_pos n_neg) with midranks for ties."""
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


# -------------------------------
# ROC
# -------------------------------
def auroc(samples: Sequence[ScoredSample]) -> float:
    scores, labels = _arrays(samples)
    _require_both_classes(labels)
    return _auc_from_scores(scores[labels == 1], scores[labels == 0])


def roc_curve(samples: Sequence[ScoredSample]) -> List[RocPoint]:
    """Staircase from (0, 0) to (1, 1); a sample is positive at threshold t iff score >= t."""
    scores, labels = _arrays(samples)
    n_pos, n_neg = _require_both_classes(labels)
    points = [RocPoint(0.0, 0.0, math.inf)]
    for t in np.unique(scores)[::-1]:
        predicted = scores >= t
        tp = int(np.sum(predicted & (labels == 1)))
        fp = int(np.sum(predicted & (labels == 0)))
        points.append(RocPoint(fp / n_neg, tp / n_pos, float(t)))
    return points


def roc_area(points: Sequence[RocPoint]) -> float:
    fpr = np.array([p.fpr for p in points])
    tpr = np.array([p.tpr for p in points])
    return float(np.trapezoid(tpr, fpr))


def mean_roc_curve(curves: Sequence[Sequence[RocPoint]], grid_size: int = 101) -> List[RocPoint]:
    """Vertical average of several ROC curves on a common FPR grid."""
    if not curves:
        raise RejectedInputError("Need at least one ROC curve to average")
    grid = np.linspace(0.0, 1.0, grid_size)
    stacked = []
    for curve in curves:
        fpr = np.array([p.fpr for p in curve])
        tpr = np.array([p.tpr for p in curve])
        # on vertical segments take the upper point
        stacked.append(np.interp(grid, fpr, tpr, left=0.0, right=1.0))
    mean_tpr = np.mean(stacked, axis=0)
    mean_tpr[0] = 0.0
    return [RocPoint(float(f), float(t), math.nan) for f, t in zip(grid, mean_tpr)]


# -------------------------------
# Confidence interval
# -------------------------------
def _bootstrap_chunk(pos: np.ndarray, neg: np.ndarray, seeds: Sequence[np.random.SeedSequence]) -> List[float]:
    out = []
    for ss in seeds:
        rng = np.random.default_rng(ss)
        p = pos[rng.integers(0, len(pos), size=len(pos))]
        n = neg[rng.integers(0, len(neg), size=len(neg))]
        out.append(_auc_from_scores(p, n))
    return out


def bootstrap_ci(
    samples: Sequence[ScoredSample],
    resamples: int = 2000,
    seed: int = 0,
    alpha: float = 0.05,
    threads: int = 1,
) -> Tuple[float, float]:
    """Stratified percentile bootstrap of AUROC (classes resampled separately)."""
    if resamples < 100:
        raise RejectedInputError(f"Bootstrap needs at least 100 resamples, got {resamples}")
    scores, labels = _arrays(samples)
    _require_both_classes(labels)
    pos, neg = scores[labels == 1], scores[labels == 0]

    seeds = np.random.SeedSequence(seed).spawn(resamples)
    chunk = max(1, math.ceil(resamples / max(threads, 1)))
    batches = [seeds[i:i + chunk] for i in range(0, resamples, chunk)]
    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda b: _bootstrap_chunk(pos, neg, b), batches))
    else:
        results = [_bootstrap_chunk(pos, neg, b) for b in batches]
    aucs = np.concatenate(results)
    low, high = np.percentile(aucs, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(low), float(high)


# -------------------------------
# Significance
# -------------------------------
def _placements(pos: np.ndarray, neg: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """DeLong structural components V10 (per positive) and V01 (per negative)."""
    m, n = len(pos), len(neg)
    all_ranks = rankdata(np.concatenate([pos, neg]))
    pos_ranks = rankdata(pos)
    neg_ranks = rankdata(neg)
    v10 = (all_ranks[:m] - pos_ranks) / n
    v01 = 1.0 - (all_ranks[m:] - neg_ranks) / m
    return v10, v01


def delong_test(scores_a: Sequence[float], scores_b: Sequence[float], labels: Sequence[int]) -> DelongResult:
    """Two-sided DeLong test for two correlated AUROCs on the same samples."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if not (a.shape == b.shape == y.shape) or a.ndim != 1:
        raise RejectedInputError(f"Score vectors {a.shape}, {b.shape} and labels {y.shape} must align")
    m, n = _require_both_classes(y)

    v10_a, v01_a = _placements(a[y == 1], a[y == 0])
    v10_b, v01_b = _placements(b[y == 1], b[y == 0])
    auc_a, auc_b = float(v10_a.mean()), float(v10_b.mean())

    s10 = np.cov(np.vstack([v10_a, v10_b])) if m > 1 else np.zeros((2, 2))
    s01 = np.cov(np.vstack([v01_a, v01_b])) if n > 1 else np.zeros((2, 2))
    cov = s10 / m + s01 / n
    var = float(cov[0, 0] + cov[1, 1] - 2.0 * cov[0, 1])
    diff = auc_a - auc_b

    if diff == 0.0:
        return DelongResult(auc_a, auc_b, 1.0, 0.0)
    if var <= 0.0 or not math.isfinite(var):
        logger.warning("DeLong variance is %.3g with AUROC difference %.4f; p-value is degenerate", var, diff)
        return DelongResult(auc_a, auc_b, float(np.finfo(np.float64).tiny), math.copysign(math.inf, diff), True)
    z = diff / math.sqrt(var)
    p = float(2.0 * norm.sf(abs(z)))
    return DelongResult(auc_a, auc_b, min(1.0, max(p, float(np.finfo(np.float64).tiny))), float(z))


# -------------------------------
# Operating point
# -------------------------------
def _youden_numerators(scores: np.ndarray, labels: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """J * n_pos * n_neg as exact integers for each threshold."""
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    predicted = scores[None, :] >= thresholds[:, None]
    tp = np.sum(predicted & (labels[None, :] == 1), axis=1).astype(np.int64)
    tn = np.sum(~predicted & (labels[None, :] == 0), axis=1).astype(np.int64)
    return tp * n_neg + tn * n_pos - n_pos * n_neg


def youden_candidates(scores: np.ndarray) -> np.ndarray:
    distinct = np.unique(scores)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    return np.concatenate([[-np.inf], mids, [np.inf]])


def youden_cutoff(samples: Sequence[ScoredSample]) -> float:
    """Candidate threshold maximizing sensitivity + specificity - 1; ties go to the smallest."""
    scores, labels = _arrays(samples)
    _require_both_classes(labels)
    candidates = youden_candidates(scores)
    j = _youden_numerators(scores, labels, candidates)
    return float(candidates[int(np.argmax(j))])  # argmax returns the first (smallest) maximum


def confusion_metrics(samples: Sequence[ScoredSample], cutoff: float) -> ConfusionMetrics:
    if math.isnan(cutoff):
        raise RejectedInputError("cutoff must not be NaN")
    scores, labels = _arrays(samples)
    predicted = scores >= cutoff
    tp = int(np.sum(predicted & (labels == 1)))
    fp = int(np.sum(predicted & (labels == 0)))
    tn = int(np.sum(~predicted & (labels == 0)))
    fn = int(np.sum(~predicted & (labels == 1)))
    total = tp + fp + tn + fn
    sensitivity = tp / (tp + fn) if tp + fn else 0.0
    specificity = tn / (tn + fp) if tn + fp else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * precision * sensitivity / (precision + sensitivity) if precision + sensitivity else 0.0
    return ConfusionMetrics(
        tp=tp, fp=fp, tn=tn, fn=fn,
        accuracy=(tp + tn) / total if total else 0.0,
        sensitivity=sensitivity,
        specificity=specificity,
        precision=precision,
        f1=f1,
    )


def stratified_report(samples: Sequence[ScoredSample], cutoff: float) -> List[GroupAccuracy]:
    """Accuracy per group tag plus an `overall` row."""
    missing = [s.id for s in samples if s.group is None or s.group == ""]
    if missing:
        raise RejectedInputError(f"{len(missing)} samples have no group tag (first: {missing[0]})")
    by_group: Dict[str, List[ScoredSample]] = {}
    for s in samples:
        by_group.setdefault(str(s.group), []).append(s)
    rows = [
        GroupAccuracy(group, len(members), confusion_metrics(members, cutoff).accuracy)
        for group, members in sorted(by_group.items())
    ]
    rows.append(GroupAccuracy("overall", len(samples), confusion_metrics(samples, cutoff).accuracy))
    return rows


def evaluate(
    test: Sequence[ScoredSample],
    cutoff: float,
    resamples: int = 2000,
    seed: int = 0,
    model: str = "",
    threads: int = 1,
) -> EvalReport:
    """Comparison-table metrics for `test` at a cutoff chosen elsewhere (usually on validation)."""
    scores, labels = _arrays(test)
    n_pos, n_neg = _require_both_classes(labels)
    point = auroc(test)
    low, high = bootstrap_ci(test, resamples=resamples, seed=seed, threads=threads)
    excludes = not (low <= point <= high)
    if excludes:
        logger.warning("Bootstrap interval [%.3f, %.3f] excludes the point AUROC %.3f", low, high, point)
    cm = confusion_metrics(test, cutoff)
    strata = stratified_report(test, cutoff) if all(s.group for s in test) else []
    return EvalReport(
        accuracy=cm.accuracy, sensitivity=cm.sensitivity, specificity=cm.specificity,
        precision=cm.precision, f1=cm.f1, auroc=point, ci_low=low, ci_high=high,
        cutoff=cutoff, n_pos=n_pos, n_neg=n_neg, model=model,
        ci_excludes_point=excludes, strata=strata, roc=roc_curve(test),
    )


# -------------------------------
# Formatting
# -------------------------------
def format_p(p: Optional[float], is_reference: bool = False) -> str:
    if is_reference:
        return "Ref"
    if p is None:
        return "—"
    if p < SIGNIFICANCE:
        return f"P < {SIGNIFICANCE:g}"
    return f"P = {p:.3f}"


def format_row(report: EvalReport) -> str:
    cells = [
        f"{100 * report.accuracy:.1f}%",
        f"{100 * report.sensitivity:.1f}%",
        f"{100 * report.specificity:.1f}%",
        f"{report.f1:.3f}",
        f"{report.auroc:.3f}",
        f"{report.ci_low:.3f} - {report.ci_high:.3f}",
        f"{report.cutoff:.3f}",
        format_p(report.p_value, report.is_reference),
    ]
    return "\t".join(cells)


TABLE_HEADER = "\t".join(
    ["Accuracy", "Sensitivity", "Specificity", "F1Score", "AUROC", "AUROC-95%CI", "Cut-off", "P value"]
)


# -------------------------------
# Files
# -------------------------------
def write_scores_csv(path: Union[str, os.PathLike], samples: Sequence[ScoredSample]) -> None:
    df = pd.DataFrame(
        [(s.id, s.score, s.label, s.group if s.group is not None else "") for s in samples],
        columns=SCORE_COLUMNS,
    )
    try:
        os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
        df.to_csv(path, index=False, float_format="%.17g")
    except OSError as e:
        raise ArtifactIOError(path, e) from e


def read_scores_csv(path: Union[str, os.PathLike]) -> List[ScoredSample]:
    try:
        df = pd.read_csv(path, dtype={"id": str, "group": str}, keep_default_na=False,
                         float_precision="round_trip")
    except OSError as e:
        raise ArtifactIOError(path, e) from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise FormatError(f"{path}: unreadable scores CSV ({e})") from e
    if list(df.columns) != SCORE_COLUMNS:
        raise FormatError(f"{path}: scores CSV header must be {','.join(SCORE_COLUMNS)}")
    try:
        return [
            ScoredSample(score=float(r.score), label=int(r.label), group=(r.group or None), id=r.id)
            for r in df.itertuples(index=False)
        ]
    except (TypeError, ValueError) as e:
        raise FormatError(f"{path}: bad scores row ({e})") from e


def write_roc_csv(path: Union[str, os.PathLike], points: Sequence[RocPoint]) -> None:
    df = pd.DataFrame([asdict(p) for p in points], columns=["fpr", "tpr", "threshold"])
    try:
        os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
        df.to_csv(path, index=False, float_format="%.17g")
    except OSError as e:
        raise ArtifactIOError(path, e) from e
