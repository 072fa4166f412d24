"""Two-hidden-layer sigmoid-output networks: Bayesian and deterministic."""

from dataclasses import dataclass, field

import numpy as np

from . import ndcore as nd
from .variational import LayerParams, MixturePrior, VariationalParams, sample_weights

__all__ = [
    "NetworkSpec",
    "BnnModel",
    "DeterministicModel",
    "init_bnn",
    "init_deterministic",
    "forward_logits",
    "forward",
    "forward_det",
    "mean_weights",
]

MU_INIT = (-0.2, 0.2)
RHO_INIT = (-5.0, -4.0)


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_sizes: tuple = (128, 128)
    activations: tuple = None

    def __post_init__(self):
        if int(self.input_dim) < 1:
            raise ValueError(f"input_dim must be positive, got {self.input_dim}")
        hidden = tuple(int(h) for h in self.hidden_sizes)
        if not hidden or any(h < 1 for h in hidden):
            raise ValueError(f"hidden sizes must be positive, got {self.hidden_sizes}")
        object.__setattr__(self, "input_dim", int(self.input_dim))
        object.__setattr__(self, "hidden_sizes", hidden)
        expected = ("relu",) * len(hidden) + ("sigmoid",)
        if self.activations is None:
            object.__setattr__(self, "activations", expected)
        elif tuple(self.activations) != expected:
            raise ValueError(f"activations must be {expected}, got {self.activations}")

    @property
    def layer_sizes(self):
        return (self.input_dim, *self.hidden_sizes, 1)

    @property
    def n_parameters(self):
        sizes = self.layer_sizes
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


@dataclass(frozen=True)
class BnnModel:
    spec: NetworkSpec
    params: VariationalParams
    prior: MixturePrior = field(default_factory=MixturePrior)
    seed: int = None
    epochs_trained: int = 0


@dataclass(frozen=True)
class DeterministicModel:
    spec: NetworkSpec
    weights: tuple  # ((W, b), ...)
    seed: int = None
    epochs_trained: int = 0


def init_bnn(spec, prior=None, seed=0):
    """Draw mu ~ U(-0.2, 0.2) and rho ~ U(-5, -4) for every weight and bias."""
    if not isinstance(spec, NetworkSpec):
        raise TypeError("spec must be a NetworkSpec")
    rng = np.random.default_rng(seed)
    sizes = spec.layer_sizes
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        layers.append(
            LayerParams(
                w_mu=rng.uniform(*MU_INIT, size=(fan_in, fan_out)),
                w_rho=rng.uniform(*RHO_INIT, size=(fan_in, fan_out)),
                b_mu=rng.uniform(*MU_INIT, size=fan_out),
                b_rho=rng.uniform(*RHO_INIT, size=fan_out),
            )
        )
    return BnnModel(spec=spec, params=VariationalParams(tuple(layers)), prior=prior or MixturePrior(), seed=seed)


def init_deterministic(spec, seed=0):
    """Same mu initialization as the Bayesian network, without the rho half."""
    rng = np.random.default_rng(seed)
    sizes = spec.layer_sizes
    weights = tuple(
        (rng.uniform(*MU_INIT, size=(a, b)), rng.uniform(*MU_INIT, size=b))
        for a, b in zip(sizes[:-1], sizes[1:])
    )
    return DeterministicModel(spec=spec, weights=weights, seed=seed)


def _check_input(spec, x):
    xv = nd.value_of(x)
    if xv.ndim != 2 or xv.shape[1] != spec.input_dim:
        raise nd.ShapeError(
            f"expected input with {spec.input_dim} columns, got shape {xv.shape}"
        )


def forward_logits(weights, x):
    """Pre-sigmoid outputs of shape (n, 1) for concrete (possibly taped) weights."""
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(weights):
        h = nd.add(nd.matmul(h, w), b)
        if i < last:
            h = nd.relu(h)
    return h


def forward(model, sample, x):
    """Probabilities for each row of ``x`` under one posterior draw."""
    x = nd.as_matrix(x, "x")
    _check_input(model.spec, x)
    return nd.sigmoid(nd.value_of(forward_logits(sample.weights, x)))[:, 0]


def forward_det(model, x):
    x = nd.as_matrix(x, "x")
    _check_input(model.spec, x)
    return nd.sigmoid(forward_logits(model.weights, x))[:, 0]


def mean_weights(model):
    """The posterior-mean network as a :class:`DeterministicModel`."""
    weights = tuple((l.w_mu, l.b_mu) for l in model.params.layers)
    return DeterministicModel(spec=model.spec, weights=weights, seed=model.seed)


def zero_noise(params):
    return tuple((np.zeros(w), np.zeros(b)) for w, b in params.shapes())


def sample_at_mean(model):
    return sample_weights(model.params, zero_noise(model.params))
