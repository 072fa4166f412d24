"""Losses, ranking metrics, risk-coverage analysis and detection tables."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import mannwhitneyu, rankdata

__all__ = [
    "bce",
    "auroc",
    "aupr",
    "RiskCoverageCurve",
    "risk_coverage",
    "quantile_loss_ratio",
    "auroc_by_coverage",
    "DetectionReport",
    "detection_benchmark",
    "bnn_confidence",
    "max_prob_confidence",
    "uncertainty_shift_test",
]

_CLIP = 1e-12


def _binary(labels, name="labels"):
    y = np.asarray(labels).reshape(-1)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError(f"{name} must be 0 or 1")
    return y.astype(np.int64)


def bce(p, y):
    """Binary cross-entropy with p clipped to [1e-12, 1 - 1e-12]; vectorized."""
    y = _binary(y)
    p = np.clip(np.asarray(p, dtype=np.float64).reshape(-1), _CLIP, 1.0 - _CLIP)
    out = np.where(y == 1, -np.log(p), -np.log1p(-p))
    return float(out[0]) if out.size == 1 else out


def _check_scores(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _binary(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal lengths")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s, y


def auroc(scores, labels):
    """P(score of a random positive > score of a random negative), ties count 1/2."""
    s, y = _check_scores(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(
            f"AUROC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )
    ranks = rankdata(s)  # average ranks give the half credit for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores, labels, positive_class=1):
    """Step-wise area under precision-recall for ``positive_class``.

    Thresholds run over the distinct scores in descending order; each step in
    recall is weighted by the precision at that threshold.  For the negative
    class the scores are negated so that low scores signal it.
    """
    s, y = _check_scores(scores, labels)
    if positive_class not in (0, 1):
        raise ValueError("positive_class must be 0 or 1")
    if positive_class == 0:
        s, y = -s, 1 - y
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError(f"AUPR needs at least one record of class {positive_class}")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    # last index of each group of equal scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp_at = tp[ends]
    precision = tp_at / (ends + 1.0)
    recall = tp_at / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


@dataclass(frozen=True)
class RiskCoverageCurve:
    """Records ordered by ascending uncertainty with cumulative loss per prefix.

    ``order`` maps curve position to original record index.
    """

    coverage: np.ndarray
    cumulative_loss: np.ndarray
    order: np.ndarray
    auroc_coverage: np.ndarray = field(default=None)
    auroc_values: np.ndarray = field(default=None)

    @property
    def total_loss(self):
        return float(self.cumulative_loss[-1])

    def rows(self):
        return [
            {"coverage": float(c), "cumulative_loss": float(l)}
            for c, l in zip(self.coverage, self.cumulative_loss)
        ]


def risk_coverage(losses, uncertainties, labels=None, scores=None, auroc_grid=None):
    """Cumulative loss as the most uncertain records are progressively admitted.

    Point k is ``(k / N, sum of the k least-uncertain losses)``; ties keep the
    original order.  When ``labels`` and ``scores`` are given, AUROC is also
    computed on each coverage prefix in ``auroc_grid`` (NaN where a prefix
    holds a single class).
    """
    loss = np.asarray(losses, dtype=np.float64).reshape(-1)
    unc = np.asarray(uncertainties, dtype=np.float64).reshape(-1)
    if loss.shape != unc.shape:
        raise ValueError(
            f"losses and uncertainties differ in length ({loss.size} vs {unc.size})"
        )
    if loss.size == 0:
        raise ValueError("risk_coverage needs at least one record")
    if not np.all(np.isfinite(unc)):
        raise ValueError("uncertainties must be finite")
    n = loss.size
    order = np.argsort(unc, kind="stable")
    cumulative = np.cumsum(loss[order])
    if n > 1:
        cumulative[-1] = max(math.fsum(loss), cumulative[-2])
    coverage = np.arange(1, n + 1) / n

    grid = values = None
    if labels is not None and scores is not None:
        grid = np.asarray(auroc_grid if auroc_grid is not None else np.arange(1, 21) / 20.0)
        values = auroc_by_coverage(scores, labels, unc, grid)
    return RiskCoverageCurve(coverage, cumulative, order, grid, values)


def _slice_count(n, q):
    return max(1, int(math.floor(q * n + 1e-9)))


def quantile_loss_ratio(curve, q=0.2):
    """Loss of the most uncertain ``q`` slice over loss of the least uncertain one."""
    if not 0.0 < q <= 0.5:
        raise ValueError(f"q must lie in (0, 0.5], got {q}")
    n = len(curve.cumulative_loss)
    k = _slice_count(n, q)
    if n < 2:
        raise ValueError(f"need at least two records for two disjoint slices, got {n}")
    bottom = float(curve.cumulative_loss[k - 1])
    top = float(curve.cumulative_loss[-1] - curve.cumulative_loss[n - k - 1])
    if bottom <= 0.0:
        raise ValueError("least-uncertain slice carries zero loss; ratio undefined")
    return top / bottom


def auroc_by_coverage(scores, labels, uncertainties, coverages):
    """AUROC of ``scores`` on the least-uncertain fraction for each coverage."""
    s, y = _check_scores(scores, labels)
    unc = np.asarray(uncertainties, dtype=np.float64).reshape(-1)
    order = np.argsort(unc, kind="stable")
    out = []
    for c in np.asarray(coverages, dtype=np.float64):
        if not 0.0 < c <= 1.0:
            raise ValueError("coverages must lie in (0, 1]")
        keep = order[: max(1, int(round(c * len(s))))]
        yk = y[keep]
        out.append(auroc(s[keep], yk) if 0 < yk.sum() < len(yk) else math.nan)
    return np.array(out)


def bnn_confidence(variance):
    """Higher is more confident: the negated predictive variance."""
    return -np.asarray(variance, dtype=np.float64)


def max_prob_confidence(p):
    """Higher is more confident: max(p, 1 - p) of a sigmoid output."""
    p = np.asarray(p, dtype=np.float64)
    return np.maximum(p, 1.0 - p)


@dataclass
class DetectionReport:
    """AUROC and both-class AUPR per method.

    ``task`` is ``"error-detection"`` (condition 1 = correct prediction) or
    ``"ood-detection"`` (condition 1 = in-domain record).
    """

    task: str
    rows: dict

    @property
    def columns(self):
        if self.task == "error-detection":
            return ("auroc", "aupr_success", "aupr_error")
        return ("auroc", "aupr_in", "aupr_out")

    def to_dict(self):
        return {"task": self.task, "columns": list(self.columns), "methods": self.rows}


TASKS = ("error-detection", "ood-detection")


def detection_benchmark(confidence_by_method, condition_labels, task="error-detection"):
    """AUROC and both-class AUPR of each method's confidence for the condition.

    ``condition_labels`` is one label vector shared by all methods, or a dict
    keyed like ``confidence_by_method`` when each method has its own condition
    (for error detection every model is judged on its own predictions).
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    pos_name, neg_name = (
        ("aupr_success", "aupr_error") if task == "error-detection" else ("aupr_in", "aupr_out")
    )
    rows = {}
    for method, conf in confidence_by_method.items():
        labels = condition_labels[method] if isinstance(condition_labels, dict) else condition_labels
        cond = _binary(labels, "condition labels")
        if cond.size == 0 or cond.min() == cond.max():
            raise ValueError(f"{task}/{method}: condition labels hold a single class; nothing to detect")
        rows[method] = {
            "auroc": auroc(conf, cond),
            pos_name: aupr(conf, cond, positive_class=1),
            neg_name: aupr(conf, cond, positive_class=0),
        }
    return DetectionReport(task=task, rows=rows)


def uncertainty_shift_test(ood_variance, in_variance):
    """Mean-variance ratio (OOD / in-domain) and two-sided Mann-Whitney p-value."""
    ood = np.asarray(ood_variance, dtype=np.float64)
    ind = np.asarray(in_variance, dtype=np.float64)
    if ood.size == 0 or ind.size == 0:
        raise ValueError("both groups must be non-empty")
    ratio = float(ood.mean() / ind.mean())
    res = mannwhitneyu(ood, ind, alternative="two-sided")
    return {
        "ood_mean_variance": float(ood.mean()),
        "in_domain_mean_variance": float(ind.mean()),
        "ratio": ratio,
        "mann_whitney_u": float(res.statistic),
        "p_value": float(res.pvalue),
        "n_ood": int(ood.size),
        "n_in_domain": int(ind.size),
    }
