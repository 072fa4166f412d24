"""Cross-entropy bounds implied by a predictive variance on [0, 1].

For T probability draws with mean m and population variance v the
Bhatia-Davis inequality gives v <= m (1 - m), hence

    1/2 - 1/2 sqrt(1 - 4v) <= m <= 1/2 + 1/2 sqrt(1 - 4v)

and the binary cross-entropy of m against either label is confined to
[-log(1/2 + 1/2 sqrt(1-4v)), -log(1/2 - 1/2 sqrt(1-4v))].
"""

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BoundInterval",
    "BoundsReport",
    "loss_bounds",
    "mean_bounds",
    "verify_bounds",
    "MAX_VARIANCE",
    "VARIANCE_SLACK",
    "BOUND_TOL",
]

MAX_VARIANCE = 0.25
VARIANCE_SLACK = 1e-12
BOUND_TOL = 1e-9


@dataclass(frozen=True)
class BoundInterval:
    variance: float
    lower: float
    upper: float  # math.inf when variance == 0

    def contains(self, loss, tol=BOUND_TOL):
        return self.lower - tol <= loss <= self.upper + tol


def _half_width(variance):
    v = float(variance)
    if not math.isfinite(v) or v < 0.0:
        raise ValueError(f"variance must be a nonnegative finite number, got {variance}")
    if v > MAX_VARIANCE + VARIANCE_SLACK:
        raise ValueError(
            f"variance {v!r} exceeds 0.25; no distribution on [0, 1] has that spread"
        )
    v = min(v, MAX_VARIANCE)
    return v, 0.5 * math.sqrt(1.0 - 4.0 * v)


def _roots(variance):
    v, h = _half_width(variance)
    hi = 0.5 + h
    # (1/2 - h)(1/2 + h) = v; dividing avoids cancellation for small v
    return v, v / hi, hi


def mean_bounds(variance):
    """Admissible range ``(lo, hi)`` for the mean of a [0, 1] variable."""
    _, lo, hi = _roots(variance)
    return lo, hi


def loss_bounds(variance):
    v, lo, hi = _roots(variance)
    lower = -math.log1p(-lo)
    upper = math.inf if lo == 0.0 else -math.log(lo)
    return BoundInterval(variance=v, lower=lower, upper=upper)


def _bce(p, y):
    p = min(max(p, 1e-12), 1.0 - 1e-12)
    return -math.log(p) if y == 1 else -math.log1p(-p)


@dataclass
class BoundsReport:
    n_records: int
    n_violations: int
    worst_margin: float
    violations: list = field(default_factory=list)
    rows: list = field(default_factory=list)

    @property
    def ok(self):
        return self.n_violations == 0

    def to_dict(self):
        return {
            "n_records": self.n_records,
            "n_violations": self.n_violations,
            "worst_margin": self.worst_margin,
            "tolerance": BOUND_TOL,
            "violations": self.violations,
        }


def verify_bounds(mean, variance, labels, tol=BOUND_TOL, record_ids=None):
    """Check ``lower - tol <= BCE(label, mean) <= upper + tol`` per record.

    ``worst_margin`` is the smallest distance from a loss to the nearer bound
    (negative means a violation).  Violations are returned, never raised.
    """
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    variance = np.asarray(variance, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if not (len(mean) == len(variance) == len(labels)):
        raise ValueError("mean, variance and labels must have equal lengths")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    if record_ids is None:
        record_ids = range(len(mean))
    rows, violations = [], []
    worst = math.inf
    for rid, m, v, y in zip(record_ids, mean, variance, labels):
        interval = loss_bounds(v)
        loss = _bce(float(m), int(y))
        margin = min(loss - interval.lower, interval.upper - loss)
        worst = min(worst, margin)
        row = {
            "record_id": rid,
            "mean": float(m),
            "variance": float(v),
            "bce": loss,
            "lower": interval.lower,
            "upper": interval.upper,
        }
        rows.append(row)
        if not interval.contains(loss, tol):
            violations.append(dict(row, margin=margin))
    return BoundsReport(
        n_records=len(rows),
        n_violations=len(violations),
        worst_margin=worst if rows else math.nan,
        violations=violations,
        rows=rows,
    )
