# synthetic_aed.py
"""
Gaussian additive-energy distributions.

E(x, z) = w * sum_i ||x - mu(z_i)||^2 normalizes to
x | z ~ Normal(mean = (1/m) sum_i mu(z_i), cov = 1 / (2 m w) * I),
which is what sampling and every oracle below use.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from .attribute_space import (
    AttributeSpec,
    Group,
    GroupSet,
    cartesian_product_of_marginals,
    full_grid,
)
from .errors import DimensionTooSmallError, EmptySupportError, InvalidGroupError
from .rng import make_rng

logger = logging.getLogger(__name__)

QUADRANT_VALUES = (-1, 1)
PRIOR_TOL = 1e-9


@dataclass
class GaussianAedSpec:
    spec: AttributeSpec
    means: np.ndarray                 # (sum(d_i), n), one row per (attribute, value) in one-hot order
    energy_weight: float = 1.0
    mean_scale: float = 1.0
    name: str = "orthogonal"

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.means.ndim != 2 or self.means.shape[0] != self.spec.total_onehot_len:
            raise DimensionTooSmallError(
                f"means must have shape ({self.spec.total_onehot_len}, n), got {self.means.shape}")
        if not self.energy_weight > 0:
            raise DimensionTooSmallError("energy_weight must be positive")

    @property
    def ambient_dim(self) -> int:
        return int(self.means.shape[1])

    @property
    def variance(self) -> float:
        return 1.0 / (2.0 * self.spec.m * self.energy_weight)

    def group_means(self, groups: np.ndarray) -> np.ndarray:
        groups = np.asarray(groups, dtype=np.int64).reshape(-1, self.spec.m)
        rows = groups + np.asarray(self.spec.offsets)
        return self.means[rows].mean(axis=1)

    def group_mean(self, z: Sequence[int]) -> np.ndarray:
        return self.group_means(np.asarray([self.spec.check_group(z)]))[0]

    def spec_id(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.spec.cardinalities).encode())
        h.update(repr(float(self.energy_weight)).encode())
        h.update(np.ascontiguousarray(self.means, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "spec": self.spec.to_json(),
            "energy_weight": self.energy_weight,
            "mean_scale": self.mean_scale,
            "means": self.means.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "GaussianAedSpec":
        return cls(
            spec=AttributeSpec.from_json(data["spec"]),
            means=np.asarray(data["means"], dtype=np.float64),
            energy_weight=float(data.get("energy_weight", 1.0)),
            mean_scale=float(data.get("mean_scale", 1.0)),
            name=data.get("name", "orthogonal"),
        )


@dataclass
class Dataset:
    features: np.ndarray     # (n_samples, n)
    labels: np.ndarray       # (n_samples, m) group value indices
    spec_id: str = ""
    seed: int = 0
    side: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim == 1:
            self.labels = self.labels.reshape(-1, 1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise InvalidGroupError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def groups(self) -> List[Group]:
        return [tuple(row) for row in self.labels.tolist()]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.spec_id, self.seed, self.side)

    def group_counts(self, support: GroupSet) -> np.ndarray:
        idx = support.indices_of(self.labels)
        idx = idx[idx >= 0]
        return np.bincount(idx, minlength=len(support)).astype(np.int64)

    def observed_support(self, spec: AttributeSpec) -> GroupSet:
        return GroupSet(spec, tuple(sorted(set(self.groups()))))


@dataclass
class ShiftScenario:
    train_support: GroupSet
    test_support: GroupSet
    train_prior: np.ndarray
    test_prior: np.ndarray
    name: str = "custom"
    notes: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.train_prior = _check_prior(self.train_prior, self.train_support, "train")
        self.test_prior = _check_prior(self.test_prior, self.test_support, "test")

    @property
    def spec(self) -> AttributeSpec:
        return self.train_support.spec

    def support_for(self, side: str) -> GroupSet:
        return self.train_support if side == "train" else self.test_support

    def prior_for(self, side: str) -> np.ndarray:
        return self.train_prior if side == "train" else self.test_prior

    def dropped(self) -> GroupSet:
        return self.test_support.difference(self.train_support)

    def satisfies_compositional_shift(self) -> bool:
        return self.test_support.issubset(cartesian_product_of_marginals(self.train_support))

    def check_compositional_shift(self) -> None:
        if not self.satisfies_compositional_shift():
            outside = self.test_support.difference(cartesian_product_of_marginals(self.train_support))
            raise InvalidGroupError(
                f"Test groups {outside.to_json()} are outside the Cartesian product of train marginals")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "spec": self.spec.to_json(),
            "train_support": self.train_support.to_json(),
            "test_support": self.test_support.to_json(),
            "train_prior": self.train_prior.tolist(),
            "test_prior": self.test_prior.tolist(),
            "notes": dict(self.notes),
        }

    @classmethod
    def from_json(cls, data: dict) -> "ShiftScenario":
        spec = AttributeSpec.from_json(data["spec"])
        return cls(
            train_support=GroupSet.of(spec, data["train_support"]),
            test_support=GroupSet.of(spec, data["test_support"]),
            train_prior=np.asarray(data["train_prior"], dtype=np.float64),
            test_prior=np.asarray(data["test_prior"], dtype=np.float64),
            name=data.get("name", "custom"),
            notes=dict(data.get("notes", {})),
        )


def _check_prior(prior, support: GroupSet, side: str) -> np.ndarray:
    p = np.asarray(prior, dtype=np.float64).reshape(-1)
    if p.shape[0] != len(support):
        raise InvalidGroupError(f"{side} prior has {p.shape[0]} entries for {len(support)} groups")
    if np.any(p < 0) or abs(p.sum() - 1.0) > PRIOR_TOL:
        raise InvalidGroupError(f"{side} prior must be non-negative and sum to 1 (sum={p.sum()!r})")
    return p


def uniform_prior(support: GroupSet) -> np.ndarray:
    return np.full(len(support), 1.0 / len(support))


# ---------------------------
# Spec constructors
# ---------------------------
def make_orthogonal_means(spec: AttributeSpec, n: int, seed: int, scale: float = 1.0,
                          energy_weight: float = 1.0) -> GaussianAedSpec:
    L = spec.total_onehot_len
    if n < L:
        raise DimensionTooSmallError(f"Ambient dim n={n} < sum(d_i)={L}; cannot fit {L} orthogonal means")
    gauss = make_rng(seed, "orthogonal-means").standard_normal((n, L))
    q, _ = np.linalg.qr(gauss)
    return GaussianAedSpec(spec=spec, means=scale * q[:, :L].T, energy_weight=energy_weight,
                           mean_scale=scale, name="orthogonal")


def make_2d_quadrant_spec() -> GaussianAedSpec:
    """
    E(x, z) = 1/4 ||x - (2 z1, 0)||^2 + 1/4 ||x - (0, 2 z2)||^2 with z_i in {-1, +1},
    i.e. unit Gaussians centred on the quadrant corners (z1, z2).
    Value index 0 is -1 and index 1 is +1.
    """
    spec = AttributeSpec((2, 2))
    means = np.array([
        [-2.0, 0.0],
        [2.0, 0.0],
        [0.0, -2.0],
        [0.0, 2.0],
    ])
    return GaussianAedSpec(spec=spec, means=means, energy_weight=0.25, name="quadrant")


def quadrant_group(z1: int, z2: int) -> Group:
    return (QUADRANT_VALUES.index(z1), QUADRANT_VALUES.index(z2))


# ---------------------------
# Scenarios
# ---------------------------
def drop_groups(full_support: GroupSet, dropped: Iterable[Sequence[int]],
                spec: Optional[AttributeSpec] = None) -> ShiftScenario:
    spec = spec or full_support.spec
    drop = GroupSet.of(spec, dropped)
    for z in drop:
        if z not in full_support:
            raise InvalidGroupError(f"Dropped group {z} is not in the support")
    train = full_support.difference(drop)
    if len(train) == 0:
        raise EmptySupportError("Dropping these groups leaves an empty train support")
    scenario = ShiftScenario(train, full_support, uniform_prior(train), uniform_prior(full_support),
                             name="drop:" + ";".join(",".join(str(v) for v in z) for z in drop))
    scenario.check_compositional_shift()
    return scenario


def drop_group(full_support: GroupSet, dropped: Sequence[int],
               spec: Optional[AttributeSpec] = None) -> ShiftScenario:
    return drop_groups(full_support, [dropped], spec)


def full_support_scenario(spec: AttributeSpec, test_prior: Optional[Sequence[float]] = None) -> ShiftScenario:
    grid = full_grid(spec)
    q = uniform_prior(grid) if test_prior is None else np.asarray(test_prior, dtype=np.float64)
    return ShiftScenario(grid, grid, uniform_prior(grid), q, name="full")


def retain_random_fraction(spec: AttributeSpec, fraction: float, seed: int) -> ShiftScenario:
    """
    Keep round(fraction * |grid|) random groups (at least one) for training and
    test on the full grid. The compositional-shift condition is not enforced
    here; callers inspect hull coverage instead.
    """
    grid = full_grid(spec)
    keep = max(1, int(round(fraction * len(grid))))
    order = make_rng(seed, f"retain:{fraction}").permutation(len(grid))[:keep]
    train = GroupSet(spec, tuple(grid[i] for i in sorted(order.tolist())))
    return ShiftScenario(train, grid, uniform_prior(train), uniform_prior(grid),
                         name=f"retain:{fraction:g}")


def with_test_prior(scenario: ShiftScenario, test_prior: Sequence[float]) -> ShiftScenario:
    return ShiftScenario(scenario.train_support, scenario.test_support, scenario.train_prior,
                         np.asarray(test_prior, dtype=np.float64), name=scenario.name, notes=dict(scenario.notes))


# ---------------------------
# Sampling
# ---------------------------
def sample_dataset(aed: GaussianAedSpec, side: str, scenario: ShiftScenario, n_samples: int,
                   seed: int) -> Dataset:
    if n_samples < 1:
        raise EmptySupportError("n_samples must be >= 1")
    support = scenario.support_for(side)
    prior = scenario.prior_for(side)
    idx = make_rng(seed, f"{side}:groups").choice(len(support), size=n_samples, p=prior)
    labels = support.as_array()[idx]
    noise = make_rng(seed, f"{side}:noise").standard_normal((n_samples, aed.ambient_dim))
    features = aed.group_means(labels) + np.sqrt(aed.variance) * noise
    return Dataset(features, labels, spec_id=aed.spec_id(), seed=seed, side=side)


# ---------------------------
# Oracles
# ---------------------------
def attribute_energies(aed: GaussianAedSpec, X: np.ndarray) -> np.ndarray:
    """Stacked E(x) in one-hot order: E_i(x, k) = w ||x - mu(z_i = k)||^2."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    sq = ((X[:, None, :] - aed.means[None, :, :]) ** 2).sum(axis=-1)
    return aed.energy_weight * sq


def group_log_density(aed: GaussianAedSpec, X: np.ndarray, z: Sequence[int]) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    mu = aed.group_mean(z)
    v = aed.variance
    n = aed.ambient_dim
    return -0.5 * ((X - mu) ** 2).sum(axis=1) / v - 0.5 * n * np.log(2.0 * np.pi * v)


def bayes_log_posterior(X: np.ndarray, aed: GaussianAedSpec, support: GroupSet,
                        prior: Sequence[float]) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    mu = aed.group_means(support.as_array())
    with np.errstate(divide="ignore"):
        log_prior = np.log(np.asarray(prior, dtype=np.float64))
    sq = ((X[:, None, :] - mu[None, :, :]) ** 2).sum(axis=-1)
    logits = log_prior[None, :] - 0.5 * sq / aed.variance
    return logits - logsumexp(logits, axis=1, keepdims=True)


def bayes_posterior(X: np.ndarray, aed: GaussianAedSpec, support: GroupSet,
                    prior: Sequence[float]) -> np.ndarray:
    """Exact p(z | x) over `support`; a 1-D x gives a 1-D table."""
    single = np.asarray(X).ndim == 1
    post = np.exp(bayes_log_posterior(X, aed, support, prior))
    return post[0] if single else post


def affine_log_density(aed: GaussianAedSpec, X: np.ndarray, train: GroupSet,
                       alpha: Sequence[float]) -> np.ndarray:
    """
    log q(x | z') from train conditionals: sum_z alpha_z log p(x|z) minus the log
    of its integral over x, which is closed form for isotropic Gaussians.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    alpha = np.asarray(alpha, dtype=np.float64)
    mu = aed.group_means(train.as_array())
    v = aed.variance
    combo = sum(a * group_log_density(aed, X, z) for a, z in zip(alpha, train))
    mbar = alpha @ mu
    log_norm = (mbar @ mbar) / (2.0 * v) - float(alpha @ (mu * mu).sum(axis=1)) / (2.0 * v)
    return combo - log_norm


def orthant_probability(mean: np.ndarray, cov: np.ndarray, signs: Sequence[int]) -> float:
    """P(sign(x_i) = signs_i for all i) for x ~ Normal(mean, cov)."""
    D = np.diag(np.asarray(signs, dtype=np.float64))
    mean = np.asarray(mean, dtype=np.float64)
    return float(multivariate_normal(mean=-D @ mean, cov=D @ np.asarray(cov) @ D).cdf(np.zeros(len(mean))))


def quadrant_bayes_group_accuracy(aed: GaussianAedSpec) -> Dict[Group, float]:
    """
    Per-group accuracy of the uniform-prior Bayes rule on a quadrant spec, whose
    decision regions are the four open quadrants.
    """
    if aed.spec.cardinalities != (2, 2) or aed.ambient_dim != 2:
        raise DimensionTooSmallError("Orthant ceilings are defined for the 2D quadrant spec only")
    cov = aed.variance * np.eye(2)
    out = {}
    for z in full_grid(aed.spec):
        mu = aed.group_mean(z)
        out[z] = orthant_probability(mu, cov, np.sign(mu).astype(int))
    return out
