# energy_model.py
"""
Additive energy classifier.

    logit(z) = -<sigma(z), E(x)> + log p_hat(z) - B(z),    E(x) = W phi(x)

over the train support, with a hand-written backward pass for the mean
negative log-likelihood.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
from scipy.special import logsumexp

from .attribute_space import AttributeSpec, Group, GroupSet, encode_many
from .errors import ConfigError, DimensionMismatchError, EmptySupportError, LabelOutsideSupportError
from .rng import make_rng
from .synthetic_aed import GaussianAedSpec

logger = logging.getLogger(__name__)

FEATURE_MAPS = ("identity", "identity_sqnorm", "mlp")
GRID_LIMIT = 1 << 12


@dataclass
class EnergyModel:
    spec: AttributeSpec
    train_support: GroupSet
    log_prior: np.ndarray                 # (K,) log p_hat(z) on train_support
    params: Dict[str, np.ndarray]         # W (L, h), B (K,), plus W1 (n, H), b1 (H,) for mlp
    input_dim: int
    feature_map: str = "identity"
    history: Dict[str, float] = field(default_factory=dict)

    def copy(self) -> "EnergyModel":
        return EnergyModel(self.spec, self.train_support, self.log_prior.copy(),
                           {k: v.copy() for k, v in self.params.items()}, self.input_dim, self.feature_map,
                           dict(self.history))

    @property
    def bias(self) -> np.ndarray:
        return self.params["B"]

    def bias_table(self) -> Dict[Group, float]:
        return {z: float(b) for z, b in zip(self.train_support, self.params["B"])}


@dataclass
class LogitTable:
    logits: np.ndarray        # (N, K)
    support: GroupSet

    def __post_init__(self):
        if not np.all(np.isfinite(self.logits)):
            raise ArithmeticError("Non-finite logits")


# ---------------------------
# Feature map
# ---------------------------
def feature_dim(input_dim: int, feature_map: str, hidden_width: int = 64) -> int:
    if feature_map == "identity":
        return input_dim
    if feature_map == "identity_sqnorm":
        return input_dim + 1
    if feature_map == "mlp":
        return hidden_width
    raise ConfigError(f"Unknown feature map {feature_map!r}; expected one of {FEATURE_MAPS}")


def feature_forward(params: Dict[str, np.ndarray], X: np.ndarray, feature_map: str):
    """phi(X) and the cache needed by feature_backward."""
    if feature_map == "identity":
        return X, None
    if feature_map == "identity_sqnorm":
        return np.hstack([X, (X * X).sum(axis=1, keepdims=True)]), None
    if feature_map == "mlp":
        phi = np.tanh(X @ params["W1"] + params["b1"])
        return phi, phi
    raise ConfigError(f"Unknown feature map {feature_map!r}")


def feature_backward(params: Dict[str, np.ndarray], X: np.ndarray, cache, dphi: np.ndarray,
                     feature_map: str) -> Dict[str, np.ndarray]:
    if feature_map != "mlp":
        return {}
    da = dphi * (1.0 - cache * cache)
    return {"W1": X.T @ da, "b1": da.sum(axis=0)}


def init_feature_params(input_dim: int, feature_map: str, hidden_width: int, init_scale: float,
                        rng: np.random.Generator) -> Dict[str, np.ndarray]:
    if feature_map != "mlp":
        return {}
    return {
        "W1": init_scale * rng.standard_normal((input_dim, hidden_width)),
        "b1": np.zeros(hidden_width),
    }


def _check_input(model: EnergyModel, X: np.ndarray) -> Tuple[np.ndarray, bool]:
    single = np.asarray(X).ndim == 1
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.input_dim:
        raise DimensionMismatchError(f"Input has dimension {X.shape[1]}, model expects {model.input_dim}")
    return X, single


# ---------------------------
# Construction
# ---------------------------
def empirical_log_prior(labels: np.ndarray, support: GroupSet) -> np.ndarray:
    idx = support.indices_of(labels)
    if np.any(idx < 0):
        raise LabelOutsideSupportError("Labels outside the support cannot define a prior on it")
    counts = np.bincount(idx, minlength=len(support)).astype(np.float64)
    if np.any(counts == 0):
        missing = [support[i] for i in np.flatnonzero(counts == 0)]
        raise EmptySupportError(f"Support groups without samples: {missing}")
    return np.log(counts) - np.log(counts.sum())


def init_energy_model(spec: AttributeSpec, train_support: GroupSet, log_prior: np.ndarray, input_dim: int,
                      feature_map: str = "identity", hidden_width: int = 64, init_scale: float = 0.01,
                      seed: int = 0) -> EnergyModel:
    rng = make_rng(seed, "energy-model-init")
    h = feature_dim(input_dim, feature_map, hidden_width)
    params = init_feature_params(input_dim, feature_map, hidden_width, init_scale, rng)
    params["W"] = init_scale * rng.standard_normal((spec.total_onehot_len, h))
    params["B"] = np.zeros(len(train_support))
    return EnergyModel(spec, train_support, np.asarray(log_prior, dtype=np.float64), params, input_dim, feature_map)


def oracle_energy_model(aed: GaussianAedSpec, support: GroupSet, log_prior: np.ndarray) -> EnergyModel:
    """
    Energies and biases set analytically from a Gaussian AED with identity phi:
    W row (i, k) = -2 w mu(z_i = k), B(z) = m w ||mu(z)||^2.
    """
    w, m = aed.energy_weight, aed.spec.m
    mu = aed.group_means(support.as_array())
    params = {"W": -2.0 * w * aed.means.copy(), "B": m * w * (mu * mu).sum(axis=1)}
    return EnergyModel(aed.spec, support, np.asarray(log_prior, dtype=np.float64), params,
                       aed.ambient_dim, "identity")


# ---------------------------
# Forward
# ---------------------------
def energy_grid(E: np.ndarray, spec: AttributeSpec) -> np.ndarray:
    """Outer sum of the per-attribute energy blocks, shape (N, d_1, ..., d_m)."""
    E = np.atleast_2d(E)
    grid = np.zeros((E.shape[0],) + (1,) * spec.m)
    for i, (off, d) in enumerate(zip(spec.offsets, spec.cardinalities)):
        shape = [E.shape[0]] + [1] * spec.m
        shape[i + 1] = d
        grid = grid + E[:, off:off + d].reshape(shape)
    return grid


def group_energies(E: np.ndarray, support: GroupSet) -> np.ndarray:
    """<sigma(z), E(x)> for every z in support, shape (N, K)."""
    spec = support.spec
    E = np.atleast_2d(E)
    if spec.total_groups <= GRID_LIMIT:
        flat = np.ravel_multi_index(tuple(support.as_array().T), spec.cardinalities)
        return energy_grid(E, spec).reshape(E.shape[0], -1)[:, flat]
    cols = support.as_array() + np.asarray(spec.offsets)
    return E[:, cols].sum(axis=-1)


def group_logits(E: np.ndarray, support: GroupSet, log_prior: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return -group_energies(E, support) + log_prior[None, :] - bias[None, :]


def _forward(model: EnergyModel, X: np.ndarray):
    phi, cache = feature_forward(model.params, X, model.feature_map)
    return phi @ model.params["W"].T, phi, cache


def energies(model: EnergyModel, x: np.ndarray) -> np.ndarray:
    X, single = _check_input(model, x)
    E, _, _ = _forward(model, X)
    return E[0] if single else E


def train_logits(model: EnergyModel, x: np.ndarray) -> LogitTable:
    X, _ = _check_input(model, x)
    E, _, _ = _forward(model, X)
    return LogitTable(group_logits(E, model.train_support, model.log_prior, model.params["B"]),
                      model.train_support)


def log_posterior_train(model: EnergyModel, x: np.ndarray) -> np.ndarray:
    X, single = _check_input(model, x)
    logits = train_logits(model, X).logits
    out = logits - logsumexp(logits, axis=1, keepdims=True)
    return out[0] if single else out


# ---------------------------
# Loss and backward
# ---------------------------
def support_indices(support: GroupSet, labels: np.ndarray) -> np.ndarray:
    idx = support.indices_of(labels)
    if np.any(idx < 0):
        bad = np.asarray(labels).reshape(-1, support.spec.m)[np.flatnonzero(idx < 0)[0]].tolist()
        raise LabelOutsideSupportError(f"Label {bad} is outside the train support")
    return idx


def nll_loss(model: EnergyModel, X: np.ndarray, labels: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean negative log posterior over the batch and its exact gradients."""
    X, _ = _check_input(model, X)
    y = support_indices(model.train_support, labels)
    N = X.shape[0]
    E, phi, cache = _forward(model, X)
    logits = group_logits(E, model.train_support, model.log_prior, model.params["B"])
    lse = logsumexp(logits, axis=1)
    loss = float(np.mean(lse - logits[np.arange(N), y]))

    dlogits = np.exp(logits - lse[:, None])
    dlogits[np.arange(N), y] -= 1.0
    dlogits /= N
    S = encode_many(model.train_support, model.spec)       # (K, L)
    dE = -dlogits @ S
    grads = {"B": -dlogits.sum(axis=0), "W": dE.T @ phi}
    grads.update(feature_backward(model.params, X, cache, dE @ model.params["W"], model.feature_map))
    return loss, grads
