"""Bayes-by-Backprop classifiers with predictive-uncertainty tooling."""

from .baselines import GradientBoostedTrees, GbdtConfig, predict_gbdt, train_gbdt
from .bounds import loss_bounds, mean_bounds, verify_bounds
from .dataio import (
    Dataset,
    IQRStandardizer,
    SyntheticSpec,
    generate_synthetic,
    load_csv,
    make_ood_holdout,
    preprocess,
)
from .estimators import BayesByBackpropClassifier, DeterministicNetClassifier
from .inference import PredictionSummary, predict, predictive_variance
from .network import NetworkSpec, init_bnn
from .training import TrainConfig, train
from .variational import MixturePrior

__version__ = "0.1.0"
