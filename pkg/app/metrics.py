"""Zero-shot classification and grounding metrics."""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import accuracy_score, f1_score, matthews_corrcoef, roc_auc_score

from app.exceptions import UndefinedMetricError, UnavailableError
from app.models import ClassMetrics, MeanMetrics

logger = logging.getLogger(__name__)


def _binary(labels) -> np.ndarray:
    return (np.asarray(labels) > 0.5).astype(int)


def auc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counting one half."""
    y = _binary(labels)
    if y.min() == y.max():
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    return float(roc_auc_score(y, np.asarray(scores, dtype=np.float64)))


def thresholded_metrics(scores, labels, threshold: float) -> Tuple[float, float, float]:
    """(MCC, F1, ACC) predicting positive when score > threshold."""
    if not np.isfinite(threshold):
        raise ValueError(f"threshold must be finite, got {threshold}")
    y = _binary(labels)
    pred = (np.asarray(scores) > threshold).astype(int)
    mcc = float(np.clip(matthews_corrcoef(y, pred), -1.0, 1.0))
    f1 = float(f1_score(y, pred, zero_division=0))
    acc = float(accuracy_score(y, pred))
    return mcc, f1, acc


def mcc_from_counts(tp, tn, fp, fn):
    """Textbook MCC on (arrays of) confusion counts; a zero denominator gives 0."""
    tp, tn, fp, fn = (np.asarray(v, dtype=np.float64) for v in (tp, tn, fp, fn))
    denom = np.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    num = tp * tn - fp * fn
    return np.where(denom > 0, num / np.where(denom > 0, denom, 1.0), 0.0)


def select_threshold(scores, labels) -> Tuple[float, bool]:
    """MCC-maximizing midpoint between sorted unique scores; (threshold, fallback_used).

    Ties go to the lowest threshold.  A single-class column or constant scores fall
    back to the median score.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = _binary(labels).astype(bool)
    unique = np.unique(scores)
    if y.all() or not y.any() or len(unique) < 2:
        return float(np.median(scores)), True
    mids = (unique[:-1] + unique[1:]) / 2.0
    pred = scores[None, :] > mids[:, None]
    tp = (pred & y).sum(axis=1)
    fp = (pred & ~y).sum(axis=1)
    fn = (~pred & y).sum(axis=1)
    tn = (~pred & ~y).sum(axis=1)
    mcc = mcc_from_counts(tp, tn, fp, fn)
    return float(mids[int(np.argmax(mcc))]), False


def select_thresholds(scores: np.ndarray, labels: np.ndarray) -> List[Tuple[float, bool]]:
    """Per-column thresholds for an (n x K) validation score matrix."""
    chosen = [select_threshold(scores[:, k], labels[:, k]) for k in range(scores.shape[1])]
    for k, (t, fallback) in enumerate(chosen):
        if fallback:
            logger.warning("class %d: single-class or constant validation scores, median threshold %.4f", k, t)
    return chosen


def pointing_game(attn: np.ndarray, grounding: Sequence[int], local_count: int) -> bool:
    """Hit when the head-averaged argmax over the local keys lands in the grounding set.

    ``attn`` is heads x K_len; keys past ``local_count`` (the appended global token) are ignored.
    """
    if local_count <= 0:
        raise UnavailableError("pointing game needs local key tokens; kv_choice=global has no spatial map")
    attn = np.asarray(attn)
    spatial = attn.reshape(-1, attn.shape[-1]).mean(axis=0)[:local_count]
    return int(np.argmax(spatial)) in set(int(g) for g in grounding)


def _mean(values: List[Optional[float]]) -> Tuple[Optional[float], int]:
    defined = [v for v in values if v is not None]
    return (float(np.mean(defined)) if defined else None), len(defined)


def summarize(per_class: List[ClassMetrics]) -> MeanMetrics:
    """Arithmetic means over the classes where each metric is defined."""
    mean_auc, auc_count = _mean([m.auc for m in per_class])
    mean_hit, hit_count = _mean([m.pointing_hit_rate for m in per_class])
    return MeanMetrics(
        auc=mean_auc,
        mcc=float(np.mean([m.mcc for m in per_class])),
        f1=float(np.mean([m.f1 for m in per_class])),
        acc=float(np.mean([m.acc for m in per_class])),
        pointing_hit_rate=mean_hit,
        auc_defined_classes=auc_count,
        pointing_defined_classes=hit_count,
    )
