"""Synthetic ICU-like data, CSV ingestion, IQR outlier removal and the
out-of-domain subgroup holdout."""

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.optimize import brentq
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

__all__ = [
    "FEATURE_NAMES",
    "IN_DOMAIN",
    "OOD",
    "Dataset",
    "SyntheticSpec",
    "CsvSchema",
    "CsvFormatError",
    "generate_synthetic",
    "most_shifted_features",
    "load_csv",
    "write_csv",
    "IQRStandardizer",
    "preprocess",
    "make_ood_holdout",
    "concat",
]

log = logging.getLogger(__name__)

IN_DOMAIN = "in"
OOD = "ood"

FEATURE_NAMES = (
    "age", "weight", "heart_rate", "sbp", "dbp", "map", "resp_rate", "temperature",
    "spo2", "gcs", "sodium", "potassium", "chloride", "bicarbonate", "bun",
    "creatinine", "glucose", "hemoglobin", "wbc", "platelets", "lactate", "ph",
    "pao2", "paco2", "urine_output",
)  # fmt: skip


@dataclass(frozen=True)
class Dataset:
    """Feature matrix with labels; NaN cells in ``X`` mark missing values."""

    X: np.ndarray
    y: np.ndarray
    feature_names: tuple
    subgroup: np.ndarray = None
    record_ids: np.ndarray = None
    feature_units: tuple = None
    standardization: dict = None  # {"mean": [...], "sd": [...]} from the fit split

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {X.shape}")
        y = np.asarray(self.y).reshape(-1)
        if len(y) != len(X):
            raise ValueError("X and y have different numbers of rows")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 or 1")
        if len(self.feature_names) != X.shape[1]:
            raise ValueError("feature_names does not match the number of columns")
        n = len(X)
        sub = np.full(n, IN_DOMAIN, dtype=object) if self.subgroup is None else np.asarray(self.subgroup, dtype=object)
        ids = np.arange(n) if self.record_ids is None else np.asarray(self.record_ids)
        if len(sub) != n or len(ids) != n:
            raise ValueError("subgroup and record_ids need one entry per row")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y.astype(np.int64))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "subgroup", sub)
        object.__setattr__(self, "record_ids", ids)

    def __len__(self):
        return len(self.y)

    @property
    def missing(self):
        return np.isnan(self.X)

    def take(self, idx):
        idx = np.asarray(idx)
        return replace(
            self, X=self.X[idx], y=self.y[idx], subgroup=self.subgroup[idx], record_ids=self.record_ids[idx]
        )

    def with_features(self, X, **changes):
        return replace(self, X=X, **changes)


def concat(*datasets):
    first = datasets[0]
    for d in datasets[1:]:
        if d.feature_names != first.feature_names:
            raise ValueError("cannot concatenate datasets with different features")
    return replace(
        first,
        X=np.vstack([d.X for d in datasets]),
        y=np.concatenate([d.y for d in datasets]),
        subgroup=np.concatenate([d.subgroup for d in datasets]),
        record_ids=np.concatenate([d.record_ids for d in datasets]),
    )


# -- synthetic generator ------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings.

    In-domain records come from a mixture of ``n_clusters`` correlated
    Gaussians; labels follow a logistic model whose logit has unit standard
    deviation divided by ``noise_scale``.  The first cluster is then moved
    ``positive_shift`` logit units along the coefficient direction and given
    mixture weight ``positive_weight``, so a dense, mostly positive region
    exists alongside the bulk of negatives.

    The subgroup is shifted by ``ood_marker_shift`` (with alternating sign) on
    the first two features, the analog of obvious traits such as age and
    weight, and by a vector of norm ``ood_offaxis_shift`` on the remaining
    features chosen orthogonal to the label coefficients.  Its covariance gains
    extra noise of standard deviation ``ood_spread`` in that orthogonal
    subspace, and its label coefficients are perturbed by ``ood_label_shift``.
    An explicit ``ood_shift`` vector replaces both shift terms.
    """

    n_features: int = 25
    n_train: int = 40000
    n_test: int = 10000
    n_ood: int = 5000
    n_clusters: int = 3
    class_prior: float = 0.2
    noise_scale: float = 0.35
    positive_shift: float = 8.0
    positive_weight: float = 0.15
    ood_shift: tuple = None
    ood_marker_shift: float = 6.0
    ood_offaxis_shift: float = 6.0
    ood_spread: float = 2.5
    ood_label_shift: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_features < 2:
            raise ValueError("n_features must be at least 2")
        if not 0.0 < self.class_prior < 1.0:
            raise ValueError("class_prior must lie in (0, 1)")
        if min(self.n_train, self.n_test, self.n_ood) < 0 or self.n_train == 0:
            raise ValueError("split sizes must be nonnegative and n_train positive")
        if self.n_clusters < 1 or not self.noise_scale > 0:
            raise ValueError("n_clusters and noise_scale must be positive")
        if not 0.0 < self.positive_weight < 1.0:
            raise ValueError("positive_weight must lie in (0, 1)")
        if min(self.ood_offaxis_shift, self.ood_spread, self.ood_label_shift) < 0:
            raise ValueError("subgroup shift magnitudes must be nonnegative")
        if self.ood_shift is not None and len(self.ood_shift) != self.n_features:
            raise ValueError("ood_shift needs one entry per feature")

    def feature_names(self):
        if self.n_features <= len(FEATURE_NAMES):
            return FEATURE_NAMES[: self.n_features]
        extra = tuple(f"feature_{i}" for i in range(len(FEATURE_NAMES), self.n_features))
        return FEATURE_NAMES + extra

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown data options: {sorted(unknown)}")
        d = dict(d)
        if d.get("ood_shift") is not None:
            d["ood_shift"] = tuple(float(v) for v in d["ood_shift"])
        return cls(**d)


@dataclass(frozen=True)
class _Population:
    means: np.ndarray  # (K, D)
    factors: np.ndarray  # (K, D, D) mixing matrices, cov_k = F_k F_k^T
    weights: np.ndarray  # (K,)
    coef: np.ndarray
    intercept: float
    shift: np.ndarray  # subgroup mean shift
    offaxis: np.ndarray  # (D, D-3) orthonormal basis orthogonal to coef on features 2..

    def draw(self, rng, n, shift=None, spread=0.0):
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        z = rng.standard_normal((n, self.means.shape[1]))
        x = np.einsum("nij,nj->ni", self.factors[comp], z) + self.means[comp]
        if shift is not None:
            x = x + shift
        if spread > 0.0:
            x = x + spread * rng.standard_normal((n, self.offaxis.shape[1])) @ self.offaxis.T
        return x

    def labels(self, rng, x, coef=None):
        c = self.coef if coef is None else coef
        p = 1.0 / (1.0 + np.exp(-(x @ c + self.intercept)))
        return (rng.random(len(x)) < p).astype(np.int64)


def _orthogonal_basis(coef):
    """Orthonormal basis of {v : v[:2] = 0, v . coef = 0}."""
    d = len(coef)
    if d <= 3:
        return np.zeros((d, 0))
    sub = coef[2:] / np.linalg.norm(coef[2:])
    # complete ``sub`` to an orthonormal basis; drop its own direction
    q, _ = np.linalg.qr(np.column_stack([sub, np.eye(d - 2)]))
    basis = np.zeros((d, d - 3))
    basis[2:] = q[:, 1 : d - 2]
    return basis


def _build_population(spec, rng):
    d, k = spec.n_features, spec.n_clusters
    means = rng.normal(0.0, 0.75, size=(k, d))
    factors = np.empty((k, d, d))
    for c in range(k):
        mix = np.eye(d) * 0.8
        r = min(3, d)
        mix[:, :r] += rng.normal(0.0, 1.0, size=(d, r)) * 0.35
        factors[c] = mix
    weights = rng.dirichlet(np.full(k, 5.0))
    if k > 1:
        weights = np.r_[spec.positive_weight, (1.0 - spec.positive_weight) * weights[1:] / weights[1:].sum()]
    coef = rng.normal(0.0, 1.0, size=d)
    direction = rng.standard_normal(d)

    plain = _Population(means, factors, weights, coef, 0.0, np.zeros(d), np.zeros((d, max(d - 3, 0))))
    probe = plain.draw(np.random.default_rng(rng.integers(2**63)), 100_000)
    coef = coef / ((probe @ coef).std() * spec.noise_scale)
    means[0] += spec.positive_shift * coef / (coef @ coef)
    shifted = _Population(means, factors, weights, coef, 0.0, np.zeros(d), np.zeros((d, max(d - 3, 0))))
    logit = shifted.draw(np.random.default_rng(rng.integers(2**63)), 100_000) @ coef

    def gap(b):
        return np.mean(1.0 / (1.0 + np.exp(-(logit + b)))) - spec.class_prior

    intercept = brentq(gap, -50.0, 50.0, xtol=1e-12)
    offaxis = _orthogonal_basis(coef)
    if spec.ood_shift is not None:
        shift = np.asarray(spec.ood_shift, dtype=np.float64)
    else:
        u = offaxis @ (offaxis.T @ direction)
        norm = np.linalg.norm(u)
        shift = spec.ood_offaxis_shift * u / norm if norm > 0 else u
        shift[:2] = (spec.ood_marker_shift, -spec.ood_marker_shift)
    return _Population(means, factors, weights, coef, float(intercept), shift, offaxis)


def _population(spec):
    streams = np.random.SeedSequence(spec.seed).spawn(5)
    return _build_population(spec, np.random.default_rng(streams[0])), streams


def generate_synthetic(spec):
    """Return ``(train, test, ood)`` datasets; deterministic in ``spec.seed``."""
    if not isinstance(spec, SyntheticSpec):
        raise TypeError("spec must be a SyntheticSpec")
    pop, streams = _population(spec)
    names = spec.feature_names()

    def split(stream, n, offset, tag, shift=None, spread=0.0, coef=None):
        rng = np.random.default_rng(stream)
        x = pop.draw(rng, n, shift, spread)
        y = pop.labels(rng, x, coef)
        ids = np.arange(offset, offset + n)
        return Dataset(x, y, names, subgroup=np.full(n, tag, dtype=object), record_ids=ids)

    ood_rng = np.random.default_rng(streams[4])
    perturb = spec.ood_label_shift * np.abs(pop.coef).mean() * ood_rng.standard_normal(spec.n_features)
    train = split(streams[1], spec.n_train, 0, IN_DOMAIN)
    test = split(streams[2], spec.n_test, spec.n_train, IN_DOMAIN)
    ood = split(
        streams[3], spec.n_ood, spec.n_train + spec.n_test, OOD,
        shift=pop.shift, spread=spec.ood_spread, coef=pop.coef + perturb,
    )  # fmt: skip
    return train, test, ood


def generator_coefficients(spec):
    """The in-domain logistic coefficients and intercept used by the generator."""
    pop, _ = _population(spec)
    return pop.coef.copy(), pop.intercept


def subgroup_shift(spec):
    """Mean shift applied to the subgroup, one entry per feature."""
    pop, _ = _population(spec)
    return pop.shift.copy()


def most_shifted_features(spec, k=2):
    """Names of the ``k`` features with the largest absolute subgroup shift."""
    shift = np.abs(subgroup_shift(spec))
    idx = np.argsort(-shift, kind="stable")[:k]
    names = spec.feature_names()
    return [names[i] for i in sorted(idx)]


# -- CSV ----------------------------------------------------------------------


class CsvFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CsvSchema:
    """Column roles.  ``features=None`` takes every column not named below."""

    label: str = "label"
    features: tuple = None
    id_column: str = "record_id"
    subgroup_column: str = "subgroup"

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("features") is not None:
            d["features"] = tuple(d["features"])
        return cls(**d)


_MISSING = {"", "na", "nan", "null", "none", "?"}


def load_csv(path, schema=None):
    """Parse a comma-separated file with a header row into a :class:`Dataset`.

    Missing cells become NaN.  All malformed rows are collected and reported
    together with their line numbers.
    """
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvFormatError(f"{path}: file is empty") from None
        if schema.label not in header:
            raise CsvFormatError(f"{path}: label column {schema.label!r} not found in header")
        roles = {schema.label, schema.id_column, schema.subgroup_column}
        features = schema.features or tuple(h for h in header if h not in roles)
        for name in features:
            if name not in header:
                raise CsvFormatError(f"{path}: feature column {name!r} not found in header")
        if not features:
            raise CsvFormatError(f"{path}: no feature columns")
        col = {h: i for i, h in enumerate(header)}
        f_idx = [col[f] for f in features]
        rows, labels, groups, ids, errors = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                errors.append(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
                continue
            values = []
            bad = False
            for name, i in zip(features, f_idx):
                cell = row[i].strip()
                if cell.lower() in _MISSING:
                    values.append(math.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    errors.append(f"line {lineno}: column {name!r} is not numeric ({cell!r})")
                    bad = True
                    break
                if not math.isfinite(v):
                    errors.append(f"line {lineno}: column {name!r} is not finite")
                    bad = True
                    break
                values.append(v)
            if bad:
                continue
            label = row[col[schema.label]].strip()
            if label not in ("0", "1", "0.0", "1.0"):
                errors.append(f"line {lineno}: label {label!r} is not binary")
                continue
            rows.append(values)
            labels.append(int(float(label)))
            groups.append(row[col[schema.subgroup_column]].strip() if schema.subgroup_column in col else IN_DOMAIN)
            ids.append(row[col[schema.id_column]].strip() if schema.id_column in col else len(ids))
    if errors:
        shown = "\n  ".join(errors[:20])
        more = f"\n  ... and {len(errors) - 20} more" if len(errors) > 20 else ""
        raise CsvFormatError(f"{path}: {len(errors)} malformed row(s):\n  {shown}{more}")
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(features))
    try:
        record_ids = np.array([int(i) for i in ids])
    except ValueError:
        record_ids = np.array(ids, dtype=object)
    return Dataset(X, np.array(labels, dtype=np.int64), features, subgroup=np.array(groups, dtype=object), record_ids=record_ids)


def _fmt(v):
    return "" if math.isnan(v) else repr(float(v))


def write_csv(dataset, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", *dataset.feature_names, "label", "subgroup"])
        for rid, x, y, g in zip(dataset.record_ids, dataset.X, dataset.y, dataset.subgroup):
            w.writerow([rid, *(_fmt(v) for v in x), int(y), g])


# -- preprocessing ------------------------------------------------------------


class IQRStandardizer(TransformerMixin, BaseEstimator):
    """Outlier fence at ``[Q1 - k*IQR, Q3 + k*IQR]``, mean imputation, z-scoring.

    All statistics come from the data passed to :meth:`fit`; the mean and
    standard deviation are computed after the fit split's outliers are dropped.
    """

    def __init__(self, iqr_multiplier=8.0, missing_indicators=False):
        self.iqr_multiplier = iqr_multiplier
        self.missing_indicators = missing_indicators

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan")
        if len(X) == 0:
            raise ValueError("cannot fit on an empty split")
        q1, q3 = np.nanpercentile(X, [25.0, 75.0], axis=0)
        iqr = q3 - q1
        self.lower_ = q1 - self.iqr_multiplier * iqr
        self.upper_ = q3 + self.iqr_multiplier * iqr
        inliers = X[self.inlier_mask(X)]
        if len(inliers) == 0:
            raise ValueError("every record in the fit split is an outlier")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mean = np.nanmean(inliers, axis=0)
            sd = np.nanstd(inliers, axis=0)
        mean = np.where(np.isnan(mean), 0.0, mean)
        flat = ~(sd > 0)
        if flat.any():
            warnings.warn(
                f"zero-variance feature(s) at columns {np.flatnonzero(flat).tolist()}; using sd = 1",
                RuntimeWarning,
                stacklevel=2,
            )
        self.mean_ = mean
        self.scale_ = np.where(flat, 1.0, sd)
        self.missing_columns_ = np.flatnonzero(np.isnan(X).any(axis=0))
        self.n_features_in_ = X.shape[1]
        return self

    def inlier_mask(self, X):
        """True for rows whose observed values all sit inside the fence."""
        lower = getattr(self, "lower_", None)
        if lower is None:
            raise ValueError("IQRStandardizer is not fitted")
        X = np.asarray(X, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            outside = (X < self.lower_) | (X > self.upper_)
        return ~outside.any(axis=1)

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan", ensure_min_samples=0)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        missing = np.isnan(X)
        Z = (np.where(missing, self.mean_, X) - self.mean_) / self.scale_
        if self.missing_indicators and self.missing_columns_.size:
            Z = np.hstack([Z, missing[:, self.missing_columns_].astype(np.float64)])
        return Z

    def to_dict(self):
        return {
            "iqr_multiplier": self.iqr_multiplier,
            "missing_indicators": self.missing_indicators,
            "lower": self.lower_.tolist(),
            "upper": self.upper_.tolist(),
            "mean": self.mean_.tolist(),
            "sd": self.scale_.tolist(),
            "missing_columns": self.missing_columns_.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        obj = cls(iqr_multiplier=d["iqr_multiplier"], missing_indicators=d["missing_indicators"])
        obj.lower_ = np.asarray(d["lower"], dtype=np.float64)
        obj.upper_ = np.asarray(d["upper"], dtype=np.float64)
        obj.mean_ = np.asarray(d["mean"], dtype=np.float64)
        obj.scale_ = np.asarray(d["sd"], dtype=np.float64)
        obj.missing_columns_ = np.asarray(d["missing_columns"], dtype=np.int64)
        obj.n_features_in_ = len(obj.mean_)
        return obj


def preprocess(dataset, fit_on=None, iqr_multiplier=8.0, missing_indicators=False):
    """Drop fenced outliers, impute and standardize ``dataset``.

    ``fit_on`` is the split whose statistics are used (a :class:`Dataset`), an
    already fitted :class:`IQRStandardizer`, or ``None`` to fit on ``dataset``
    itself.  Returns ``(processed, standardizer)``.
    """
    if isinstance(fit_on, IQRStandardizer):
        scaler = fit_on
    else:
        source = dataset if fit_on is None else fit_on
        scaler = IQRStandardizer(iqr_multiplier, missing_indicators).fit(source.X)
    keep = scaler.inlier_mask(dataset.X)
    if not keep.all():
        log.info("removed %d outlier record(s) of %d", int((~keep).sum()), len(keep))
    kept = dataset.take(np.flatnonzero(keep))
    names = kept.feature_names
    if scaler.missing_indicators and scaler.missing_columns_.size:
        names = names + tuple(f"{names[i]}_missing" for i in scaler.missing_columns_)
    out = replace(
        kept,
        X=scaler.transform(kept.X),
        feature_names=names,
        standardization={"mean": scaler.mean_.tolist(), "sd": scaler.scale_.tolist()},
    )
    return out, scaler


def make_ood_holdout(dataset, subgroup_tag, masked_features=(), fill_values=None):
    """Split off a subgroup and blank its most telling features.

    Returns ``(rest, subgroup)`` where each ``masked_features`` column of the
    subgroup is overwritten with the mean over ``rest`` (or ``fill_values``).
    """
    in_group = dataset.subgroup == subgroup_tag
    if not in_group.any():
        raise ValueError(f"subgroup {subgroup_tag!r} has no records")
    unknown = [f for f in masked_features if f not in dataset.feature_names]
    if unknown:
        raise ValueError(f"masked features not in dataset: {unknown}")
    rest = dataset.take(np.flatnonzero(~in_group))
    group = dataset.take(np.flatnonzero(in_group))
    if masked_features:
        if fill_values is None:
            if len(rest) == 0:
                raise ValueError("no records outside the subgroup to average over")
            fill_values = np.nanmean(rest.X, axis=0)
        X = group.X.copy()
        for name in masked_features:
            j = dataset.feature_names.index(name)
            X[:, j] = fill_values[j]
        group = group.with_features(X)
    return rest, group
