"""Experiment orchestration: configs, model files, and the pipeline stages.

Each stage reads and writes plain files so the CLI subcommands can be chained
by hand; :func:`run_experiment` simply runs them in order.

Files written under an experiment directory::

    data/{train,test,ood}.csv, data/meta.json   generate-data
    model.json, history.csv                     train
    predictions.csv                             predict
    evaluation/                                 evaluate
    ood/                                        ood-report
    bounds/                                     verify-bounds
"""

import csv
import hashlib
import importlib.resources
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import dataio, metrics
from .baselines import GbdtConfig, GbdtModel, Tree, predict_gbdt, train_gbdt
from .bounds import verify_bounds
from .inference import DEFAULT_T, predict
from .network import (
    BnnModel,
    DeterministicModel,
    NetworkSpec,
    forward_det,
    init_bnn,
    init_deterministic,
)
from .seeding import substream_seed
from .training import TrainConfig, train, train_deterministic
from .variational import LayerParams, MixturePrior, VariationalParams

__all__ = [
    "FORMAT_VERSION",
    "ExperimentConfig",
    "StageError",
    "load_config",
    "bundled_config",
    "bundled_data",
    "generate_data",
    "train_models",
    "load_model",
    "predict_file",
    "evaluate",
    "ood_report",
    "verify_bounds_file",
    "run_experiment",
]

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MODEL_FORMAT = "bnnrisk-model"
COVERAGE_GRID = tuple(round(0.05 * i, 2) for i in range(1, 21))
PREDICTION_COLUMNS = (
    "record_id", "split", "label", "mean", "variance", "std",
    "det_prob", "gbdt_prob", "config_digest",
)  # fmt: skip


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines an experiment's outputs.

    ``data`` is either ``{"source": "synthetic", **SyntheticSpec fields}`` or
    ``{"source": "csv", "path": DIR, "schema": {...}}``.  Seeds inside
    ``train``/``deterministic``/``gbdt`` are ignored: all randomness derives
    from ``seed`` through named sub-streams.
    """

    seed: int = 0
    data: dict = field(default_factory=lambda: {"source": "synthetic"})
    hidden_sizes: tuple = (128, 128)
    prior: MixturePrior = field(default_factory=MixturePrior)
    train: TrainConfig = field(default_factory=TrainConfig)
    deterministic: TrainConfig = field(default_factory=TrainConfig)
    gbdt: GbdtConfig = field(default_factory=GbdtConfig)
    T: int = DEFAULT_T
    masked_features: object = "auto"
    ood_subgroup: str = dataio.OOD
    iqr_multiplier: float = 8.0
    missing_indicators: bool = False

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("T must be at least 2")
        source = self.data.get("source", "synthetic")
        if source not in ("synthetic", "csv"):
            raise ValueError(f"unknown data source {source!r}")
        if source == "csv" and "path" not in self.data:
            raise ValueError("csv data source needs a 'path'")
        if source == "synthetic":
            self.synthetic_spec()  # validates

    def synthetic_spec(self):
        opts = {k: v for k, v in self.data.items() if k != "source"}
        opts["seed"] = substream_seed(self.seed, "data")
        return dataio.SyntheticSpec.from_dict(opts)

    def seeded(self, stage_config, stream):
        return replace(stage_config, seed=substream_seed(self.seed, stream))

    def to_dict(self):
        return {
            "seed": self.seed,
            "data": _plain(self.data),
            "hidden_sizes": list(self.hidden_sizes),
            "prior": asdict(self.prior),
            "train": asdict(self.train),
            "deterministic": asdict(self.deterministic),
            "gbdt": asdict(self.gbdt),
            "T": self.T,
            "masked_features": self.masked_features if isinstance(self.masked_features, str) else list(self.masked_features),
            "ood_subgroup": self.ood_subgroup,
            "iqr_multiplier": self.iqr_multiplier,
            "missing_indicators": self.missing_indicators,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "prior" in d:
            d["prior"] = MixturePrior(**d["prior"])
        for key in ("train", "deterministic"):
            if key in d:
                d[key] = TrainConfig.from_dict(d[key])
        if "gbdt" in d:
            d["gbdt"] = GbdtConfig.from_dict(d["gbdt"])
        if "hidden_sizes" in d:
            d["hidden_sizes"] = tuple(int(h) for h in d["hidden_sizes"])
        if "data" in d:
            d["data"] = dict(d["data"])
            d["data"].setdefault("source", "synthetic")
        mf = d.get("masked_features")
        if mf is not None and not isinstance(mf, str):
            d["masked_features"] = tuple(mf)
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def bundled_config(name):
    """Path of a config shipped with the package (``"benchmark"`` or ``"tiny"``)."""
    path = importlib.resources.files("bnnrisk") / "configs" / f"{name}.yaml"
    if not path.is_file():
        raise FileNotFoundError(f"no bundled config named {name!r}")
    return Path(str(path))


def bundled_data(name="tiny"):
    """Directory of a dataset shipped with the package."""
    path = importlib.resources.files("bnnrisk") / "data" / name
    if not path.is_dir():
        raise FileNotFoundError(f"no bundled dataset named {name!r}")
    return Path(str(path))


def load_config(path=None, overrides=None):
    """Read a YAML config and apply dotted ``overrides`` like ``{"train.epochs": 5}``.

    ``path`` may also name a bundled config, e.g. ``"tiny"``.
    """
    raw = {}
    if path is not None and not Path(path).exists() and Path(path).suffix == "":
        path = bundled_config(path)
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return ExperimentConfig.from_dict(raw)


# -- small file helpers -------------------------------------------------------


def _num(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _write_rows(path, rows, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_num(row[c]) for c in columns])


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_json_safe(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _stage(name):
    def wrap(fn):
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except (OSError, ValueError, RuntimeError, KeyError) as exc:
                raise StageError(name, f"{type(exc).__name__}: {exc}") from exc

        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        run.__wrapped__ = fn
        return run

    return wrap


# -- stage: generate-data ----------------------------------------------------


@_stage("generate-data")
def generate_data(config, out_dir):
    """Write the synthetic train/test/ood CSVs and ``meta.json``."""
    if config.data.get("source", "synthetic") != "synthetic":
        raise ValueError("generate-data needs a synthetic data source")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = config.synthetic_spec()
    train_ds, test_ds, ood_ds = dataio.generate_synthetic(spec)
    for name, ds in (("train", train_ds), ("test", test_ds), ("ood", ood_ds)):
        dataio.write_csv(ds, out / f"{name}.csv")
    meta = {
        "source": "synthetic",
        "spec": _plain(asdict(spec)),
        "feature_names": list(spec.feature_names()),
        "most_shifted_features": dataio.most_shifted_features(spec),
        "config_digest": config.digest(),
    }
    _write_json(out / "meta.json", meta)
    return out


def _read_meta(data_dir):
    path = Path(data_dir) / "meta.json"
    if path.exists():
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    return {}


def _schema(config):
    return dataio.CsvSchema.from_dict(config.data.get("schema", {}))


def load_splits(data_dir, config):
    """``(train, test, ood)`` raw datasets from a data directory.

    Records of the OOD subgroup found in ``train.csv`` are held out from
    training and appended to the OOD split; ``ood.csv`` is optional.
    """
    data_dir = Path(data_dir)
    schema = _schema(config)
    for required in ("train.csv", "test.csv"):
        if not (data_dir / required).exists():
            raise FileNotFoundError(f"missing input file {data_dir / required}")
    train_all = dataio.load_csv(data_dir / "train.csv", schema)
    test = dataio.load_csv(data_dir / "test.csv", schema)
    parts = []
    if (train_all.subgroup == config.ood_subgroup).any():
        train_all, held_out = dataio.make_ood_holdout(train_all, config.ood_subgroup)
        parts.append(held_out)
    if (data_dir / "ood.csv").exists():
        parts.append(dataio.load_csv(data_dir / "ood.csv", schema))
    ood = dataio.concat(*parts) if parts else None
    return train_all, test, ood


def rank_shifted_features(train_std, ood_std, k=2):
    """Features whose standardized subgroup mean differs most from training."""
    shift = np.abs(np.nanmean(ood_std.X, axis=0) - np.nanmean(train_std.X, axis=0))
    idx = np.argsort(-shift, kind="stable")[:k]
    return [train_std.feature_names[i] for i in sorted(idx)]


def _resolve_masked(config, meta, train_std, ood_raw, scaler):
    if not isinstance(config.masked_features, str):
        return list(config.masked_features)
    if config.masked_features == "none":
        return []
    if config.masked_features != "auto":
        return [f.strip() for f in config.masked_features.split(",") if f.strip()]
    if meta.get("most_shifted_features"):
        return list(meta["most_shifted_features"])
    if ood_raw is None or len(ood_raw) == 0:
        return []
    ood_std = replace(ood_raw, X=scaler.transform(ood_raw.X)[:, : ood_raw.X.shape[1]])
    return rank_shifted_features(train_std, ood_std)


# -- model file ---------------------------------------------------------------


def _bnn_to_dict(model):
    return [
        {k: getattr(l, k).tolist() for k in ("w_mu", "w_rho", "b_mu", "b_rho")}
        for l in model.params.layers
    ]


def _bnn_from_dict(layers):
    return VariationalParams(
        tuple(
            LayerParams(*(np.asarray(l[k], dtype=np.float64) for k in ("w_mu", "w_rho", "b_mu", "b_rho")))
            for l in layers
        )
    )


def save_model(path, *, config, bnn, det, gbdt, scaler, feature_names, masked_features):
    doc = {
        "format": MODEL_FORMAT,
        "format_version": FORMAT_VERSION,
        "config_digest": config.digest(),
        "config": config.to_dict(),
        "feature_names": list(feature_names),
        "masked_features": list(masked_features),
        "ood_subgroup": config.ood_subgroup,
        "standardizer": scaler.to_dict(),
        "network": {
            "input_dim": bnn.spec.input_dim,
            "hidden_sizes": list(bnn.spec.hidden_sizes),
            "activations": list(bnn.spec.activations),
        },
        "prior": asdict(bnn.prior),
        "bnn": {"seed": bnn.seed, "epochs_trained": bnn.epochs_trained, "layers": _bnn_to_dict(bnn)},
        "deterministic": {
            "seed": det.seed,
            "epochs_trained": det.epochs_trained,
            "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in det.weights],
        },
        "gbdt": {
            "learning_rate": gbdt.learning_rate,
            "initial_log_odds": gbdt.initial_log_odds,
            "n_features": gbdt.n_features,
            "trees": [t.to_dict() for t in gbdt.trees],
        },
    }
    _write_json(path, doc)


@dataclass
class LoadedModel:
    config_digest: str
    config: ExperimentConfig
    feature_names: tuple
    masked_features: list
    ood_subgroup: str
    scaler: dataio.IQRStandardizer
    bnn: BnnModel
    det: DeterministicModel
    gbdt: GbdtModel


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path} is not a {MODEL_FORMAT} file")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"{path}: model format version {doc.get('format_version')} is not supported "
            f"(expected {FORMAT_VERSION})"
        )
    net = doc["network"]
    spec = NetworkSpec(net["input_dim"], tuple(net["hidden_sizes"]), tuple(net["activations"]))
    bnn = BnnModel(
        spec=spec,
        params=_bnn_from_dict(doc["bnn"]["layers"]),
        prior=MixturePrior(**doc["prior"]),
        seed=doc["bnn"]["seed"],
        epochs_trained=doc["bnn"]["epochs_trained"],
    )
    det = DeterministicModel(
        spec=spec,
        weights=tuple((np.asarray(l["w"]), np.asarray(l["b"])) for l in doc["deterministic"]["layers"]),
        seed=doc["deterministic"]["seed"],
        epochs_trained=doc["deterministic"]["epochs_trained"],
    )
    g = doc["gbdt"]
    gbdt = GbdtModel(
        trees=tuple(Tree.from_dict(t) for t in g["trees"]),
        learning_rate=g["learning_rate"],
        initial_log_odds=g["initial_log_odds"],
        n_features=g["n_features"],
    )
    return LoadedModel(
        config_digest=doc["config_digest"],
        config=ExperimentConfig.from_dict(doc["config"]),
        feature_names=tuple(doc["feature_names"]),
        masked_features=doc["masked_features"],
        ood_subgroup=doc["ood_subgroup"],
        scaler=dataio.IQRStandardizer.from_dict(doc["standardizer"]),
        bnn=bnn,
        det=det,
        gbdt=gbdt,
    )


# -- stage: train -------------------------------------------------------------


@_stage("train")
def train_models(config, data_dir, model_path):
    """Fit the BNN, the deterministic twin and the GBDT on ``train.csv``."""
    train_raw, _, ood_raw = load_splits(data_dir, config)
    train_std, scaler = dataio.preprocess(
        train_raw, iqr_multiplier=config.iqr_multiplier, missing_indicators=config.missing_indicators
    )
    masked = _resolve_masked(config, _read_meta(data_dir), train_std, ood_raw, scaler)
    unknown = [f for f in masked if f not in train_raw.feature_names]
    if unknown:
        raise ValueError(f"masked features not in data: {unknown}")
    x, y = train_std.X, train_std.y

    spec = NetworkSpec(input_dim=x.shape[1], hidden_sizes=config.hidden_sizes)
    init_seed = substream_seed(config.seed, "init")
    bnn, history = train((x, y), init_bnn(spec, config.prior, seed=init_seed), config.seeded(config.train, "training"))
    det, det_history = train_deterministic(
        (x, y), init_deterministic(spec, seed=init_seed), config.seeded(config.deterministic, "training")
    )
    gbdt = train_gbdt(x, y, config.gbdt)

    model_path = Path(model_path)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(
        model_path,
        config=config,
        bnn=bnn,
        det=det,
        gbdt=gbdt,
        scaler=scaler,
        feature_names=train_raw.feature_names,
        masked_features=masked,
    )
    rows = [
        dict(r, det_nll=d["nll"], det_val_bce=d["val_bce"])
        for r, d in zip(history.rows(), det_history.rows())
    ]
    _write_rows(
        model_path.parent / "history.csv", rows, ("epoch", "elbo", "nll", "kl", "val_bce", "det_nll", "det_val_bce")
    )
    if not history.elbo[-1] < history.elbo[0]:
        log.warning("final-epoch ELBO loss %.4f did not drop below the first epoch's %.4f", history.elbo[-1], history.elbo[0])
    return model_path


# -- stage: predict -----------------------------------------------------------


def _predict_split(model, ds, T, seed):
    summary = predict(model.bnn, ds.X, T=T, seed=seed)
    return {
        "mean": summary.mean,
        "variance": summary.variance,
        "std": summary.std,
        "det_prob": forward_det(model.det, ds.X),
        "gbdt_prob": predict_gbdt(model.gbdt, ds.X),
    }


@_stage("predict")
def predict_file(model_path, data_dir, out_path, T=None, seed=None):
    """Predict ``test.csv`` and the masked OOD records into one CSV."""
    model = load_model(model_path)
    config = model.config
    T = config.T if T is None else int(T)
    seed = config.seed if seed is None else int(seed)
    _, test_raw, ood_raw = load_splits(data_dir, config)
    if test_raw.feature_names != model.feature_names:
        raise ValueError("test.csv columns do not match the model's features")
    test_std, _ = dataio.preprocess(test_raw, fit_on=model.scaler)
    splits = [("test", test_std)]
    if ood_raw is not None and len(ood_raw):
        tagged = replace(ood_raw, subgroup=np.full(len(ood_raw), config.ood_subgroup, dtype=object))
        _, masked = dataio.make_ood_holdout(
            tagged, config.ood_subgroup, model.masked_features, fill_values=model.scaler.mean_
        )
        ood_std, _ = dataio.preprocess(masked, fit_on=model.scaler)
        splits.append(("ood", ood_std))

    base = substream_seed(seed, "inference")
    rows = []
    for i, (name, ds) in enumerate(splits):
        if len(ds) == 0:
            continue
        out = _predict_split(model, ds, T, [base, i])
        for j in range(len(ds)):
            rows.append(
                {
                    "record_id": ds.record_ids[j],
                    "split": name,
                    "label": int(ds.y[j]),
                    **{k: out[k][j] for k in ("mean", "variance", "std", "det_prob", "gbdt_prob")},
                    "config_digest": model.config_digest,
                }
            )
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _write_rows(out_path, rows, PREDICTION_COLUMNS)
    return out_path


# -- reading predictions ------------------------------------------------------


@dataclass
class Predictions:
    record_id: np.ndarray
    split: np.ndarray
    label: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    std: np.ndarray
    det_prob: np.ndarray
    gbdt_prob: np.ndarray
    config_digest: str

    def select(self, split):
        m = self.split == split
        return Predictions(
            **{k: getattr(self, k)[m] for k in ("record_id", "split", "label", "mean", "variance", "std", "det_prob", "gbdt_prob")},
            config_digest=self.config_digest,
        )

    def __len__(self):
        return len(self.label)


def read_predictions(*paths):
    """Load one or more prediction CSVs; all rows must share one config digest."""
    cols = {c: [] for c in PREDICTION_COLUMNS}
    for path in paths:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = set(PREDICTION_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"{path}: missing columns {sorted(missing)}")
            for row in reader:
                for c in PREDICTION_COLUMNS:
                    cols[c].append(row[c])
    digests = sorted(set(cols["config_digest"]))
    if len(digests) > 1:
        raise ValueError(f"refusing to mix predictions from different configs: {digests}")
    if not digests:
        raise ValueError("no prediction rows found")
    f = lambda c: np.array(cols[c], dtype=np.float64)  # noqa: E731
    return Predictions(
        record_id=np.array(cols["record_id"], dtype=object),
        split=np.array(cols["split"], dtype=object),
        label=np.array(cols["label"], dtype=np.int64),
        mean=f("mean"),
        variance=f("variance"),
        std=f("std"),
        det_prob=f("det_prob"),
        gbdt_prob=f("gbdt_prob"),
        config_digest=digests[0],
    )


# -- stage: evaluate ----------------------------------------------------------


def _correct(prob, y):
    return ((prob >= 0.5).astype(np.int64) == y).astype(np.int64)


@_stage("evaluate")
def evaluate(prediction_paths, out_dir, q=0.2):
    """Risk-coverage curves, coverage-restricted AUROC, error detection, scatter."""
    preds = read_predictions(*prediction_paths)
    test = preds.select("test")
    if len(test) == 0:
        raise ValueError("predictions hold no 'test' rows")
    y = test.label
    if y.min() == y.max():
        raise ValueError(f"test labels are all {y[0]}; AUROC and detection need both classes")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    bnn_loss = metrics.bce(test.mean, y)
    gbdt_loss = metrics.bce(test.gbdt_prob, y)
    bnn_curve = metrics.risk_coverage(bnn_loss, test.variance, y, test.mean, COVERAGE_GRID)
    gbdt_curve = metrics.risk_coverage(gbdt_loss, test.variance, y, test.gbdt_prob, COVERAGE_GRID)
    _write_rows(out / "risk_coverage_bnn.csv", bnn_curve.rows(), ("coverage", "cumulative_loss"))
    _write_rows(out / "risk_coverage_gbdt.csv", gbdt_curve.rows(), ("coverage", "cumulative_loss"))
    _write_rows(
        out / "auroc_coverage.csv",
        [
            {"coverage": c, "bnn_auroc": a, "gbdt_auroc": b}
            for c, a, b in zip(COVERAGE_GRID, bnn_curve.auroc_values, gbdt_curve.auroc_values)
        ],
        ("coverage", "bnn_auroc", "gbdt_auroc"),
    )
    _write_rows(
        out / "scatter.csv",
        [
            {"record_id": r, "split": s, "mean": m, "std": sd}
            for r, s, m, sd in zip(preds.record_id, preds.split, preds.mean, preds.std)
        ],
        ("record_id", "split", "mean", "std"),
    )
    error_table = metrics.detection_benchmark(
        {"bnn_std": metrics.bnn_confidence(test.variance), "nn_sigmoid": metrics.max_prob_confidence(test.det_prob)},
        {"bnn_std": _correct(test.mean, y), "nn_sigmoid": _correct(test.det_prob, y)},
        task="error-detection",
    )
    i20 = COVERAGE_GRID.index(q) if q in COVERAGE_GRID else None
    report = {
        "config_digest": preds.config_digest,
        "n_test": len(test),
        "auroc": {
            "bnn": metrics.auroc(test.mean, y),
            "deterministic": metrics.auroc(test.det_prob, y),
            "gbdt": metrics.auroc(test.gbdt_prob, y),
        },
        "mean_bce": {
            "bnn": float(np.mean(bnn_loss)),
            "deterministic": float(np.mean(metrics.bce(test.det_prob, y))),
            "gbdt": float(np.mean(gbdt_loss)),
        },
        "risk_coverage": {
            "q": q,
            "bnn_loss_ratio": metrics.quantile_loss_ratio(bnn_curve, q),
            "gbdt_loss_ratio": metrics.quantile_loss_ratio(gbdt_curve, q),
            "bnn_total_loss": bnn_curve.total_loss,
            "gbdt_total_loss": gbdt_curve.total_loss,
            "bnn_auroc_at_q": None if i20 is None else bnn_curve.auroc_values[i20],
            "gbdt_auroc_at_q": None if i20 is None else gbdt_curve.auroc_values[i20],
        },
        "error_detection": error_table.to_dict(),
    }
    _write_json(out / "evaluation.json", report)
    return report


# -- stage: ood-report --------------------------------------------------------


@_stage("ood-report")
def ood_report(prediction_paths, out_dir):
    """Uncertainty inflation on OOD records and in/out detection table."""
    preds = read_predictions(*prediction_paths)
    test, ood = preds.select("test"), preds.select("ood")
    if len(ood) == 0 or len(test) == 0:
        raise ValueError("ood-report needs both 'test' and 'ood' rows")
    shift = metrics.uncertainty_shift_test(ood.variance, test.variance)
    in_domain = np.r_[np.ones(len(test), dtype=np.int64), np.zeros(len(ood), dtype=np.int64)]
    table = metrics.detection_benchmark(
        {
            "bnn_std": metrics.bnn_confidence(np.r_[test.variance, ood.variance]),
            "nn_sigmoid": metrics.max_prob_confidence(np.r_[test.det_prob, ood.det_prob]),
        },
        in_domain,
        task="ood-detection",
    )
    report = {"config_digest": preds.config_digest, "uncertainty_shift": shift, "ood_detection": table.to_dict()}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "ood_report.json", report)
    return report


# -- stage: verify-bounds -----------------------------------------------------


@_stage("verify-bounds")
def verify_bounds_file(prediction_paths, out_dir):
    preds = read_predictions(*prediction_paths)
    rep = verify_bounds(preds.mean, preds.variance, preds.label, record_ids=preds.record_id)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "bounds_report.json", dict(rep.to_dict(), config_digest=preds.config_digest))
    _write_rows(out / "bounds.csv", rep.rows, ("record_id", "mean", "variance", "bce", "lower", "upper"))
    return rep


# -- the whole thing ----------------------------------------------------------


def run_experiment(config, out_dir, data_dir=None):
    """Run every stage into ``out_dir``; returns a summary dict.

    An ``INCOMPLETE`` marker names the failing stage if anything goes wrong.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "INCOMPLETE"
    marker.write_text("running\n")
    try:
        if data_dir is None:
            if config.data.get("source", "synthetic") == "csv":
                data_dir = config.data["path"]
            else:
                data_dir = generate_data(config, out / "data")
        model_path = train_models(config, data_dir, out / "model.json")
        pred_path = predict_file(model_path, data_dir, out / "predictions.csv")
        evaluation = evaluate([pred_path], out / "evaluation")
        bounds = verify_bounds_file([pred_path], out / "bounds")
        has_ood = "ood" in set(read_predictions(pred_path).split)
        ood = ood_report([pred_path], out / "ood") if has_ood else None
    except StageError as exc:
        marker.write_text(f"failed at stage {exc.stage}: {exc}\n")
        raise
    summary = {
        "config_digest": config.digest(),
        "bounds_violations": bounds.n_violations,
        "auroc": evaluation["auroc"],
        "risk_coverage": evaluation["risk_coverage"],
        "error_detection": evaluation["error_detection"],
    }
    if ood is not None:
        summary["ood"] = ood
    _write_json(out / "summary.json", summary)
    os.remove(marker)
    return summary
