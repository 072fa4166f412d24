"""Monte-Carlo predictive mean and variance under the weight posterior."""

import math
from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .network import forward
from .variational import draw_noise, sample_weights

__all__ = ["PredictionSummary", "predict", "predictive_variance", "DEFAULT_T"]

DEFAULT_T = 100
_CEILING_SLACK = 1e-12


@dataclass(frozen=True)
class PredictionSummary:
    """Per-record predictive mean and variance over ``T`` posterior draws.

    ``samples`` (shape ``(T, n)``) is kept only when requested.
    """

    mean: np.ndarray
    variance: np.ndarray
    T: int
    samples: np.ndarray = None

    @property
    def std(self):
        return np.sqrt(self.variance)

    def __len__(self):
        return len(self.mean)


def _mean_and_variance(probs):
    """Column-wise mean and 1/T variance of a (T, n) array, via math.fsum.

    fsum is exactly rounded, so the result does not depend on sample order.
    """
    t = probs.shape[0]
    mean = np.array([math.fsum(col) for col in probs.T]) / t
    dev = probs - mean
    var = np.array([math.fsum(col) for col in (dev * dev).T]) / t
    return mean, var


def predictive_variance(probs):
    """Population (1/T) variance of a sequence of probabilities."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    if p.size < 2:
        raise ValueError("need at least two probability samples")
    if np.any((p < 0.0) | (p > 1.0)):
        raise ValueError("probabilities must lie in [0, 1]")
    _, var = _mean_and_variance(p[:, None])
    return float(var[0])


def predict(model, x, T=DEFAULT_T, seed=0, keep_samples=False, chunk_size=4096):
    """Predictive mean (average of ``T`` sampled networks) and 1/T variance.

    Every returned variance satisfies ``var <= mean * (1 - mean)``; a breach
    raises ``AssertionError`` since it can only come from a bug.
    """
    if int(T) < 2:
        raise ValueError(f"T must be at least 2, got {T}")
    x = nd.as_matrix(x, "x")
    rng = np.random.default_rng(seed)
    probs = np.empty((T, len(x)))
    for t in range(T):
        sample = sample_weights(model.params, draw_noise(model.params, rng))
        for start in range(0, len(x), chunk_size):
            probs[t, start : start + chunk_size] = forward(model, sample, x[start : start + chunk_size])
    mean, var = _mean_and_variance(probs)
    ceiling = mean * (1.0 - mean)
    if np.any(var > ceiling + _CEILING_SLACK):
        worst = float(np.max(var - ceiling))
        raise AssertionError(f"predictive variance exceeds mean*(1-mean) by {worst:.3e}")
    return PredictionSummary(mean=mean, variance=var, T=int(T), samples=probs if keep_samples else None)
