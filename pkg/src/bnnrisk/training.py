"""ELBO objective, Adam, and the minibatch training loops."""

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import ndcore as nd
from .network import BnnModel, DeterministicModel, forward_logits
from .variational import VariationalParams, draw_noise, kl_mc_term, sample_weights

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "AdamState",
    "TrainingError",
    "kl_weights",
    "elbo_loss",
    "adam_step",
    "train",
    "train_deterministic",
]

log = logging.getLogger(__name__)

KL_SCHEMES = ("uniform", "geometric")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_samples: int = 1
    kl_weighting: str = "uniform"
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "n_samples"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not (self.learning_rate > 0 and self.adam_eps > 0):
            raise ValueError("learning_rate and adam_eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.kl_weighting not in KL_SCHEMES:
            raise ValueError(f"kl_weighting must be one of {KL_SCHEMES}")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainHistory:
    elbo: list = field(default_factory=list)
    nll: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    val_bce: list = field(default_factory=list)
    initial_val_bce: float = float("nan")

    def append(self, elbo, nll, kl, val_bce):
        self.elbo.append(float(elbo))
        self.nll.append(float(nll))
        self.kl.append(float(kl))
        self.val_bce.append(float(val_bce))

    def rows(self):
        return [
            {"epoch": i, "elbo": e, "nll": n, "kl": k, "val_bce": v}
            for i, (e, n, k, v) in enumerate(zip(self.elbo, self.nll, self.kl, self.val_bce))
        ]


def kl_weights(n_batches, scheme="uniform"):
    """Per-minibatch KL weights for one epoch; they always sum to one.

    ``geometric`` gives batch i (1-based) weight 2^(M-i) / (2^M - 1).
    """
    if n_batches < 1:
        raise ValueError("need at least one minibatch")
    if scheme == "uniform":
        return np.full(n_batches, 1.0 / n_batches)
    if scheme == "geometric":
        i = np.arange(1, n_batches + 1)
        # 2^-i / (1 - 2^-M), written to avoid overflowing 2^M
        w = np.exp2(-i.astype(float)) / -math.expm1(-n_batches * math.log(2.0))
        return w / w.sum()
    raise ValueError(f"unknown KL weighting scheme {scheme!r}")


def _check_labels(y):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    return y


def _nll(logits, y):
    # -[y log s(z) + (1-y) log(1-s(z))] = softplus(z) - y z
    return nd.total(nd.sub(nd.softplus(logits), nd.mul(logits, y[:, None])))


def _elbo_graph(params, prior, x, y, noises, kl_weight):
    s = len(noises)
    nll_sum = kl_sum = None
    for noise in noises:
        sample = sample_weights(params, noise)
        nll = _nll(forward_logits(sample.weights, x), y)
        kl = kl_mc_term(sample, params, prior)
        nll_sum = nll if nll_sum is None else nd.add(nll_sum, nll)
        kl_sum = kl if kl_sum is None else nd.add(kl_sum, kl)
    nll = nd.mul(nll_sum, 1.0 / s)
    kl = nd.mul(kl_sum, 1.0 / s)
    return nd.add(nll, nd.mul(kl, kl_weight)), nll, kl


def elbo_loss(model, x, y, noise, kl_weight):
    """Negative ELBO for one minibatch: summed BCE + kl_weight * KL estimate.

    ``noise`` is one draw (as from :func:`draw_noise`) or a list of draws, in
    which case both terms are averaged over the draws.  Returns floats
    ``(total, nll, kl)``.
    """
    if not 0.0 < kl_weight <= 1.0:
        raise ValueError(f"kl_weight must lie in (0, 1], got {kl_weight}")
    y = _check_labels(y)
    x = nd.as_matrix(x, "x")
    noises = noise if isinstance(noise, list) else [noise]
    parts = _elbo_graph(model.params, model.prior, x, y, noises, kl_weight)
    return tuple(float(nd.value_of(p)) for p in parts)


def elbo_gradients(model, x, y, noise, kl_weight):
    """Loss value and gradients w.r.t. the flat (mu, rho) list of ``model.params``."""
    y = _check_labels(y)
    nodes = [nd.Node(a) for a in model.params.flat()]
    params = VariationalParams.from_flat(nodes)
    noises = noise if isinstance(noise, list) else [noise]
    total, nll, kl = _elbo_graph(params, model.prior, np.asarray(x, float), y, noises, kl_weight)
    grads = nd.gradient(total, nodes)
    return (float(total.value), float(nll.value), float(kl.value)), grads


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(params, grads, state, config):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient at Adam step {state.t + 1}")
    b1, b2 = config.beta1, config.beta2
    t = state.t + 1
    m = [b1 * mi + (1.0 - b1) * g for mi, g in zip(state.m, grads)]
    v = [b2 * vi + (1.0 - b2) * g * g for vi, g in zip(state.v, grads)]
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new = [
        p - config.learning_rate * (mi / c1) / (np.sqrt(vi / c2) + config.adam_eps)
        for p, mi, vi in zip(params, m, v)
    ]
    return new, AdamState(m=m, v=v, t=t)


def _xy(dataset):
    if isinstance(dataset, tuple):
        x, y = dataset
    else:
        x, y = dataset.X, dataset.y
    x = nd.as_matrix(x, "X")
    y = _check_labels(y)
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(x) != len(y):
        raise ValueError("X and y lengths differ")
    return x, y


def _split_validation(x, y, fraction, rng):
    n_val = int(round(fraction * len(x)))
    if n_val == 0 or n_val >= len(x):
        return x, y, None, None
    perm = rng.permutation(len(x))
    val, fit = perm[:n_val], np.sort(perm[n_val:])
    return x[fit], y[fit], x[val], y[val]


def _mean_bce(logits, y):
    z = logits.reshape(-1)
    return float(np.mean(nd.softplus(z) - y * z))


def train(dataset, model, config, validation=None):
    """Fit the variational parameters of ``model`` by minibatch Bayes by Backprop.

    ``validation`` is an optional ``(X, y)`` pair; otherwise a seeded
    ``config.validation_fraction`` of the data is held out.  Validation BCE
    is measured on the posterior-mean network.
    """
    x, y = _xy(dataset)
    rng = np.random.default_rng(config.seed)
    if validation is None:
        x, y, x_val, y_val = _split_validation(x, y, config.validation_fraction, rng)
    else:
        x_val, y_val = _xy(validation)

    def val_bce(params):
        if x_val is None:
            return float("nan")
        return _mean_bce(forward_logits([(l.w_mu, l.b_mu) for l in params.layers], x_val), y_val)

    flat = model.params.flat()
    state = AdamState.zeros_like(flat)
    n = len(x)
    n_batches = math.ceil(n / config.batch_size)
    weights = kl_weights(n_batches, config.kl_weighting)
    history = TrainHistory(initial_val_bce=val_bce(model.params))

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        tot_sum = nll_sum = kl_sum = 0.0
        for b in range(n_batches):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            params = VariationalParams.from_flat(flat)
            noise = [draw_noise(params, rng) for _ in range(config.n_samples)]
            current = replace(model, params=params)
            try:
                (tot, nll, kl), grads = elbo_gradients(current, x[idx], y[idx], noise, weights[b])
            except ValueError as exc:
                # a posterior scale collapsed to zero: the run has diverged
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from None
            if not math.isfinite(tot):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            try:
                flat, state = adam_step(flat, grads, state, config)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from None
            tot_sum += tot
            nll_sum += nll
            kl_sum += weights[b] * kl
        params = VariationalParams.from_flat(flat)
        history.append(tot_sum, nll_sum, kl_sum, val_bce(params))
        log.debug("epoch %d elbo=%.4f nll=%.4f kl=%.4f", epoch, tot_sum, nll_sum, kl_sum)

    trained = replace(
        model,
        params=VariationalParams.from_flat(flat),
        epochs_trained=model.epochs_trained + config.epochs,
    )
    return trained, history


def train_deterministic(dataset, model, config, validation=None):
    """Same loop as :func:`train` with point weights and no KL term."""
    x, y = _xy(dataset)
    rng = np.random.default_rng(config.seed)
    if validation is None:
        x, y, x_val, y_val = _split_validation(x, y, config.validation_fraction, rng)
    else:
        x_val, y_val = _xy(validation)

    def val_bce(weights):
        if x_val is None:
            return float("nan")
        return _mean_bce(forward_logits(weights, x_val), y_val)

    flat = [a for wb in model.weights for a in wb]
    state = AdamState.zeros_like(flat)
    n = len(x)
    n_batches = math.ceil(n / config.batch_size)
    history = TrainHistory(initial_val_bce=val_bce(model.weights))

    def pack(arrs):
        return tuple((arrs[i], arrs[i + 1]) for i in range(0, len(arrs), 2))

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        nll_sum = 0.0
        for b in range(n_batches):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            nodes = [nd.Node(a) for a in flat]
            loss = _nll(forward_logits(pack(nodes), x[idx]), y[idx])
            grads = nd.gradient(loss, nodes)
            try:
                flat, state = adam_step(flat, grads, state, config)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from None
            nll_sum += float(loss.value)
        history.append(nll_sum, nll_sum, 0.0, val_bce(pack(flat)))

    trained = replace(model, weights=pack(flat), epochs_trained=model.epochs_trained + config.epochs)
    return trained, history
