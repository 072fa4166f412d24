"""Gaussian weight posterior, scale-mixture prior and Monte-Carlo KL terms."""

import math
from dataclasses import dataclass

import numpy as np

from . import ndcore as nd

__all__ = [
    "MixturePrior",
    "LayerParams",
    "VariationalParams",
    "WeightSample",
    "sample_weights",
    "draw_noise",
    "log_gaussian",
    "log_prior",
    "kl_mc_term",
]

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MixturePrior:
    """Two zero-mean Gaussians mixed with weight ``pi`` on the wide component."""

    pi: float = 0.5
    sigma1: float = 1.0
    sigma2: float = math.exp(-6.0)

    def __post_init__(self):
        if not 0.0 <= self.pi <= 1.0:
            raise ValueError(f"prior mixing weight must lie in [0, 1], got {self.pi}")
        if not (self.sigma1 > 0.0 and self.sigma2 > 0.0):
            raise ValueError("prior standard deviations must be positive")
        if self.sigma1 < self.sigma2:
            raise ValueError(
                f"sigma1 ({self.sigma1}) must be at least sigma2 ({self.sigma2})"
            )


@dataclass(frozen=True)
class LayerParams:
    """Posterior parameters of one dense layer; weights are (fan_in, fan_out)."""

    w_mu: np.ndarray
    w_rho: np.ndarray
    b_mu: np.ndarray
    b_rho: np.ndarray

    def arrays(self):
        return (self.w_mu, self.w_rho, self.b_mu, self.b_rho)


@dataclass(frozen=True)
class VariationalParams:
    layers: tuple

    def __post_init__(self):
        for i, layer in enumerate(self.layers):
            if layer.w_mu.shape != layer.w_rho.shape or layer.b_mu.shape != layer.b_rho.shape:
                raise nd.ShapeError(f"layer {i}: mu and rho shapes differ")
            if layer.b_mu.shape != (layer.w_mu.shape[1],):
                raise nd.ShapeError(f"layer {i}: bias shape does not match fan-out")
            if i and layer.w_mu.shape[0] != self.layers[i - 1].w_mu.shape[1]:
                raise nd.ShapeError(f"layer {i}: fan-in does not match previous layer")

    @property
    def n_weights(self):
        return sum(layer.w_mu.size + layer.b_mu.size for layer in self.layers)

    def shapes(self):
        return [(layer.w_mu.shape, layer.b_mu.shape) for layer in self.layers]

    def sigmas(self):
        """softplus(rho) for every layer as ``(w_sigma, b_sigma)`` pairs."""
        return [(nd.softplus(l.w_rho), nd.softplus(l.b_rho)) for l in self.layers]

    def flat(self):
        return [a for layer in self.layers for a in layer.arrays()]

    @classmethod
    def from_flat(cls, arrays):
        arrays = list(arrays)
        if len(arrays) % 4:
            raise ValueError("flat parameter list length must be a multiple of 4")
        return cls(tuple(LayerParams(*arrays[i : i + 4]) for i in range(0, len(arrays), 4)))


@dataclass(frozen=True)
class WeightSample:
    """Concrete weights ``[(W, b), ...]`` and the noise that produced them."""

    weights: tuple
    noise: tuple


def draw_noise(params, rng):
    """Standard-normal noise shaped like ``params`` as ``[(eps_W, eps_b), ...]``."""
    return tuple(
        (rng.standard_normal(w_shape), rng.standard_normal(b_shape))
        for w_shape, b_shape in params.shapes()
    )


def _check_noise(params, noise):
    if len(noise) != len(params.layers):
        raise nd.ShapeError(
            f"noise has {len(noise)} layers, parameters have {len(params.layers)}"
        )
    for i, ((w_shape, b_shape), (ew, eb)) in enumerate(zip(params.shapes(), noise)):
        if np.shape(ew) != w_shape or np.shape(eb) != b_shape:
            raise nd.ShapeError(f"layer {i}: noise shape does not match parameters")


def _reparameterize(mu, rho, eps):
    return nd.add(mu, nd.mul(nd.softplus(rho), eps))


def sample_weights(params, noise):
    """Draw ``w = mu + softplus(rho) * eps`` for every weight and bias."""
    _check_noise(params, noise)
    weights = tuple(
        (
            _reparameterize(layer.w_mu, layer.w_rho, ew),
            _reparameterize(layer.b_mu, layer.b_rho, eb),
        )
        for layer, (ew, eb) in zip(params.layers, noise)
    )
    return WeightSample(weights=weights, noise=tuple(noise))


def log_gaussian(w, mu, sigma):
    """Log density of N(w | mu, sigma^2); works on scalars, arrays and tape nodes."""
    if np.any(nd.value_of(sigma) <= 0.0):
        raise ValueError("sigma must be positive")
    z = nd.div(nd.sub(w, mu), sigma)
    return nd.sub(nd.neg(nd.add(nd.log(sigma), _LOG_SQRT_2PI)), nd.mul(0.5, nd.square(z)))


def log_prior(w, prior):
    """Elementwise log of the scale-mixture prior density, via log-sum-exp."""
    if not isinstance(prior, MixturePrior):
        raise TypeError("prior must be a MixturePrior")
    if prior.pi == 1.0:
        return log_gaussian(w, 0.0, prior.sigma1)
    if prior.pi == 0.0:
        return log_gaussian(w, 0.0, prior.sigma2)
    wide = nd.add(log_gaussian(w, 0.0, prior.sigma1), math.log(prior.pi))
    narrow = nd.add(log_gaussian(w, 0.0, prior.sigma2), math.log1p(-prior.pi))
    return nd.logaddexp(wide, narrow)


def kl_mc_term(sample, params, prior):
    """Single-sample estimate of KL(q || prior): sum of log q(w) - log p(w)."""
    terms = []
    for layer, (w, b) in zip(params.layers, sample.weights):
        for value, mu, rho in ((w, layer.w_mu, layer.w_rho), (b, layer.b_mu, layer.b_rho)):
            log_q = log_gaussian(value, mu, nd.softplus(rho))
            terms.append(nd.total(nd.sub(log_q, log_prior(value, prior))))
    out = terms[0]
    for t in terms[1:]:
        out = nd.add(out, t)
    return out
