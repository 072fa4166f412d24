"""scikit-learn style estimators over the Bayesian and deterministic networks."""

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .inference import DEFAULT_T, predict
from .seeding import substream_seed
from .network import NetworkSpec, forward_det, init_bnn, init_deterministic
from .training import TrainConfig, train, train_deterministic
from .variational import MixturePrior

__all__ = ["BayesByBackpropClassifier", "DeterministicNetClassifier"]


class _NetParams:
    def _train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            n_samples=getattr(self, "n_train_samples", 1),
            kl_weighting=getattr(self, "kl_weighting", "uniform"),
            validation_fraction=self.validation_fraction,
            seed=self._seed("training"),
        )

    def _seed(self, stream):
        return substream_seed(self.random_state, stream)


class BayesByBackpropClassifier(_NetParams, ClassifierMixin, BaseEstimator):
    """Binary classifier with a factorized Gaussian posterior over every weight.

    ``predict_proba`` averages ``n_predict_samples`` sampled networks;
    :meth:`predict_summary` also returns the per-record predictive variance.
    """

    def __init__(
        self,
        hidden_sizes=(128, 128),
        prior_pi=0.5,
        prior_sigma1=1.0,
        prior_sigma2=math.exp(-6.0),
        epochs=50,
        batch_size=256,
        learning_rate=1e-3,
        beta1=0.9,
        beta2=0.999,
        adam_eps=1e-8,
        n_train_samples=1,
        kl_weighting="uniform",
        validation_fraction=0.1,
        n_predict_samples=DEFAULT_T,
        random_state=0,
    ):
        self.hidden_sizes = hidden_sizes
        self.prior_pi = prior_pi
        self.prior_sigma1 = prior_sigma1
        self.prior_sigma2 = prior_sigma2
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.n_train_samples = n_train_samples
        self.kl_weighting = kl_weighting
        self.validation_fraction = validation_fraction
        self.n_predict_samples = n_predict_samples
        self.random_state = random_state

    def fit(self, X, y, validation_data=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.array([0, 1])
        spec = NetworkSpec(input_dim=X.shape[1], hidden_sizes=tuple(self.hidden_sizes))
        prior = MixturePrior(self.prior_pi, self.prior_sigma1, self.prior_sigma2)
        model = init_bnn(spec, prior, seed=self._seed("init"))
        self.model_, self.history_ = train((X, y), model, self._train_config(), validation_data)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_summary(self, X, T=None, seed=None, keep_samples=False):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        T = self.n_predict_samples if T is None else T
        seed = self._seed("inference") if seed is None else seed
        return predict(self.model_, X, T=T, seed=seed, keep_samples=keep_samples)

    def predict_proba(self, X):
        p = self.predict_summary(X).mean
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)


class DeterministicNetClassifier(_NetParams, ClassifierMixin, BaseEstimator):
    """Same architecture and training loop with point weights and no KL term."""

    def __init__(
        self,
        hidden_sizes=(128, 128),
        epochs=50,
        batch_size=256,
        learning_rate=1e-3,
        beta1=0.9,
        beta2=0.999,
        adam_eps=1e-8,
        validation_fraction=0.1,
        random_state=0,
    ):
        self.hidden_sizes = hidden_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y, validation_data=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.array([0, 1])
        spec = NetworkSpec(input_dim=X.shape[1], hidden_sizes=tuple(self.hidden_sizes))
        model = init_deterministic(spec, seed=self._seed("init"))
        self.model_, self.history_ = train_deterministic((X, y), model, self._train_config(), validation_data)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        p = forward_det(self.model_, check_array(X, dtype=np.float64))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)
