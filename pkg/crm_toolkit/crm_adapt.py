# crm_adapt.py
"""
Compositional risk minimization.

Step 1 fits the additive energy classifier on the train support (fit_crm).
Step 2 computes the extrapolated bias B* from the training inputs
(extrapolate_bias). A TestPredictor then scores any test support with a test
prior (uniform by default) and B*. ERM baselines and the bias/prior ablations
live here too.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .attribute_space import AttributeSpec, Group, GroupSet, format_group
from .energy_model import (
    EnergyModel,
    _forward,
    feature_backward,
    feature_dim,
    feature_forward,
    group_energies,
    group_logits,
    init_energy_model,
    init_feature_params,
    empirical_log_prior,
    nll_loss,
    support_indices,
)
from .errors import (
    ConfigError,
    DimensionMismatchError,
    EmptySupportError,
    InvalidGroupError,
    LabelOutsideSupportError,
    TrainingDivergedError,
)
from .rng import make_rng
from .synthetic_aed import Dataset, ShiftScenario, uniform_prior

logger = logging.getLogger(__name__)

PREDICT_CHUNK = 4096
ABLATION_NAMES = ("CRM", "Bias B*+Emp Prior", "Bias B̂+Unf Prior", "Bias B̂+Emp Prior")


# ---------------------------
# Config
# ---------------------------
@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    regularize_bias: bool = False
    batch_size: int = 128
    steps: int = 3000
    seed: int = 0
    patience: Optional[int] = None          # in evaluations; None disables early stopping
    validation_fraction: float = 0.2
    eval_every: int = 100
    log_every: int = 500
    feature_map: str = "identity"
    hidden_width: int = 64
    init_scale: float = 0.01

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.steps < 1:
            raise ConfigError("batch_size and steps must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must be in [0, 1)")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1 when set")
        feature_dim(1, self.feature_map, self.hidden_width)

    @classmethod
    def from_settings(cls, section: Dict[str, Any], seed: int = 0, **overrides) -> "TrainConfig":
        kwargs = dict(
            learning_rate=float(section.get("LearningRate", 1e-3)),
            beta1=float(section.get("Beta1", 0.9)),
            beta2=float(section.get("Beta2", 0.999)),
            epsilon=float(section.get("Epsilon", 1e-8)),
            weight_decay=float(section.get("WeightDecay", 0.0)),
            regularize_bias=bool(section.get("RegularizeBias", False)),
            batch_size=int(section.get("BatchSize", 128)),
            steps=int(section.get("Steps", 3000)),
            seed=int(seed),
            patience=None if section.get("Patience") is None else int(section["Patience"]),
            validation_fraction=float(section.get("ValidationFraction", 0.2)),
            eval_every=int(section.get("EvalEvery", 100)),
            log_every=int(section.get("LogEvery", 500)),
            feature_map=str(section.get("FeatureMap", "identity")),
            hidden_width=int(section.get("HiddenWidth", 64)),
            init_scale=float(section.get("InitScale", 0.01)),
        )
        kwargs.update(overrides)
        return cls(**kwargs)


# ---------------------------
# Optimizer
# ---------------------------
class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = self.lr / bc1
        # sorted so the update order never depends on dict construction
        for k in sorted(params):
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * (g * g)
            params[k] -= step_size * self.m[k] / (np.sqrt(self.v[k] / bc2) + self.epsilon)


BIAS_PARAMS = ("B", "c", "b1")


def stratified_split(labels: np.ndarray, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-group random split; every group keeps at least one training row."""
    rng = make_rng(seed, "validation-split")
    keys = [tuple(r) for r in np.asarray(labels).tolist()]
    by_group: Dict[Tuple[int, ...], List[int]] = OrderedDict()
    for i, k in enumerate(keys):
        by_group.setdefault(k, []).append(i)
    train_idx, val_idx = [], []
    for k in sorted(by_group):
        rows = np.asarray(by_group[k])
        rows = rows[rng.permutation(rows.size)]
        n_val = min(int(round(fraction * rows.size)), rows.size - 1)
        val_idx.extend(rows[:n_val].tolist())
        train_idx.extend(rows[n_val:].tolist())
    return np.sort(np.asarray(train_idx, dtype=np.int64)), np.sort(np.asarray(val_idx, dtype=np.int64))


LossFn = Callable[[np.ndarray, np.ndarray], Tuple[float, Dict[str, np.ndarray]]]


def _optimize(params: Dict[str, np.ndarray], loss_fn: LossFn, X: np.ndarray, labels: np.ndarray,
              config: TrainConfig, tag: str, val: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Dict[str, float]:
    """Adam over minibatches drawn epoch by epoch; updates `params` in place."""
    rng = make_rng(config.seed, f"{tag}:batches")
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.epsilon)
    N = X.shape[0]
    history = {"initial_loss": loss_fn(X, labels)[0]}
    best_val, best_params, bad_evals = np.inf, None, 0
    perm, pos = rng.permutation(N), 0

    for step in range(1, config.steps + 1):
        if pos + config.batch_size > N:
            perm, pos = rng.permutation(N), 0
        idx = perm[pos:pos + config.batch_size]
        pos += config.batch_size
        loss, grads = loss_fn(X[idx], labels[idx])
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        if config.weight_decay:
            for k in grads:
                if k in BIAS_PARAMS and not config.regularize_bias:
                    continue
                grads[k] = grads[k] + config.weight_decay * params[k]
        opt.step(params, grads)

        if config.log_every and step % config.log_every == 0:
            logger.debug("%s step %d loss %.6f", tag, step, loss)
        if val is not None and step % config.eval_every == 0:
            val_loss = loss_fn(*val)[0]
            if not np.isfinite(val_loss):
                raise TrainingDivergedError(step, val_loss)
            if val_loss < best_val:
                best_val, bad_evals = val_loss, 0
                best_params = {k: v.copy() for k, v in params.items()}
            else:
                bad_evals += 1
                if config.patience is not None and bad_evals >= config.patience:
                    logger.info("%s early stop at step %d (best val %.6f)", tag, step, best_val)
                    history["stopped_step"] = float(step)
                    break

    if best_params is not None:
        params.update(best_params)
        history["best_val_loss"] = float(best_val)
    history["final_loss"] = loss_fn(X, labels)[0]
    history.setdefault("stopped_step", float(config.steps))
    return history


def _split_for(train: Dataset, config: TrainConfig):
    if config.patience is None or config.validation_fraction <= 0:
        return train.features, train.labels, None
    tr, va = stratified_split(train.labels, config.validation_fraction, config.seed)
    return train.features[tr], train.labels[tr], (train.features[va], train.labels[va])


def _observed_train_support(train: Dataset, scenario: ShiftScenario) -> GroupSet:
    idx = scenario.train_support.indices_of(train.labels)
    if np.any(idx < 0):
        bad = train.labels[np.flatnonzero(idx < 0)[0]].tolist()
        raise LabelOutsideSupportError(f"Train label {bad} is outside the scenario train support")
    counts = np.bincount(idx, minlength=len(scenario.train_support))
    missing = [z for z, c in zip(scenario.train_support, counts) if c == 0]
    if missing:
        logger.warning("Train support groups without samples are left out: %s", missing)
    return GroupSet(scenario.spec, tuple(z for z, c in zip(scenario.train_support, counts) if c > 0))


# ---------------------------
# CRM step 1
# ---------------------------
def fit_crm(train: Dataset, scenario: ShiftScenario, config: TrainConfig) -> EnergyModel:
    if len(train) == 0:
        raise EmptySupportError("Cannot train on an empty dataset")
    support = _observed_train_support(train, scenario)
    log_prior = empirical_log_prior(train.labels, support)
    model = init_energy_model(scenario.spec, support, log_prior, train.features.shape[1],
                              config.feature_map, config.hidden_width, config.init_scale, config.seed)
    X, y, val = _split_for(train, config)

    def loss_fn(Xb, yb):
        return nll_loss(model, Xb, yb)

    model.history = _optimize(model.params, loss_fn, X, y, config, "crm", val)
    logger.info("fit_crm: %d groups, loss %.4f -> %.4f", len(support),
                model.history["initial_loss"], model.history["final_loss"])
    return model


# ---------------------------
# CRM step 2
# ---------------------------
@dataclass
class ExtrapolatedBias:
    support: GroupSet
    values: np.ndarray                      # (K,) B*(z)
    n_samples: int
    std_error: Optional[np.ndarray] = None  # bootstrap, when requested

    def value(self, z: Sequence[int]) -> float:
        return float(self.values[self.support.index_of(z)])


def extrapolate_bias(model: EnergyModel, train: Dataset, target_support: GroupSet,
                     n_bootstrap: int = 0, seed: int = 0, chunk: int = PREDICT_CHUNK) -> ExtrapolatedBias:
    """
    B*(z) = log mean_x exp(-<sigma(z), E(x)> - logsumexp_{z~ in train} logit(z~; x)),
    accumulated in one pass with a running max per target group.
    """
    N = len(train)
    if N == 0:
        raise EmptySupportError("B* needs at least one training sample")
    K = len(target_support)
    run_max = np.full(K, -np.inf)
    run_sum = np.zeros(K)
    kept: List[np.ndarray] = []
    for start in range(0, N, chunk):
        X = train.features[start:start + chunk]
        if X.shape[1] != model.input_dim:
            raise DimensionMismatchError(f"Train inputs have dimension {X.shape[1]}, model expects {model.input_dim}")
        E, _, _ = _forward(model, X)
        lz = logsumexp(group_logits(E, model.train_support, model.log_prior, model.params["B"]), axis=1)
        terms = -group_energies(E, target_support) - lz[:, None]
        new_max = np.maximum(run_max, terms.max(axis=0))
        run_sum = run_sum * np.exp(run_max - new_max) + np.exp(terms - new_max).sum(axis=0)
        run_max = new_max
        if n_bootstrap:
            kept.append(terms)
    values = run_max + np.log(run_sum) - np.log(N)

    std_error = None
    if n_bootstrap:
        T = np.vstack(kept)
        rng = make_rng(seed, "b-star-bootstrap")
        boots = np.empty((n_bootstrap, K))
        for b in range(n_bootstrap):
            idx = rng.integers(0, N, size=N)
            boots[b] = logsumexp(T[idx], axis=0) - np.log(N)
        std_error = boots.std(axis=0, ddof=1) if n_bootstrap > 1 else np.zeros(K)
    return ExtrapolatedBias(target_support, values, N, std_error)


def b_star_table(b_star: ExtrapolatedBias, model: Optional[EnergyModel] = None) -> List[Tuple[str, float, str, str]]:
    """Rows (group, b_star, b_hat_if_any, std_error) for CSV output."""
    rows = []
    for i, z in enumerate(b_star.support):
        b_hat = ""
        if model is not None and z in model.train_support:
            b_hat = repr(float(model.params["B"][model.train_support.index_of(z)]))
        se = "" if b_star.std_error is None else repr(float(b_star.std_error[i]))
        rows.append((" ".join(str(v) for v in z), float(b_star.values[i]), b_hat, se))
    return rows


# ---------------------------
# Inference
# ---------------------------
@dataclass
class TestPredictor:
    model: EnergyModel
    test_support: GroupSet
    test_log_prior: np.ndarray
    bias: np.ndarray
    name: str = "CRM"
    metadata: Dict[str, str] = field(default_factory=dict)

    __test__ = False  # not a pytest class

    def __post_init__(self):
        self.test_log_prior = np.asarray(self.test_log_prior, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.test_log_prior.shape != (len(self.test_support),) or self.bias.shape != (len(self.test_support),):
            raise InvalidGroupError("Test prior and bias must have one entry per test group")
        if abs(float(logsumexp(self.test_log_prior))) > 1e-9:
            raise InvalidGroupError("Test log-prior must log-sum-exp to 0")


def _log_prior(prior: Sequence[float]) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(prior, dtype=np.float64))


def build_predictor(model: EnergyModel, b_star: ExtrapolatedBias, test_support: Optional[GroupSet] = None,
                    test_prior: Optional[Sequence[float]] = None, name: str = "CRM") -> TestPredictor:
    test_support = test_support or b_star.support
    bias = np.array([b_star.value(z) for z in test_support])
    prior = uniform_prior(test_support) if test_prior is None else test_prior
    return TestPredictor(model, test_support, _log_prior(prior), bias, name)


def predictor_logits(predictor: TestPredictor, x: np.ndarray) -> np.ndarray:
    """-<sigma(z), E(x)> + log q(z) - B*(z) over the test support."""
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if X.shape[1] != predictor.model.input_dim:
        raise DimensionMismatchError(f"Input has dimension {X.shape[1]}, model expects {predictor.model.input_dim}")
    out = []
    for start in range(0, X.shape[0], PREDICT_CHUNK):
        E, _, _ = _forward(predictor.model, X[start:start + PREDICT_CHUNK])
        out.append(group_logits(E, predictor.test_support, predictor.test_log_prior, predictor.bias))
    return np.vstack(out) if out else np.zeros((0, len(predictor.test_support)))


def log_predict(predictor: TestPredictor, x: np.ndarray) -> np.ndarray:
    single = np.asarray(x).ndim == 1
    logits = predictor_logits(predictor, x)
    out = logits - logsumexp(logits, axis=1, keepdims=True)
    return out[0] if single else out


def predict(predictor: TestPredictor, x: np.ndarray) -> np.ndarray:
    return np.exp(log_predict(predictor, x))


def marginalize(post: np.ndarray, support: GroupSet, attribute: int) -> np.ndarray:
    """q(z_i = k | x) = sum over groups with z_i = k."""
    spec = support.spec
    if not 0 <= attribute < spec.m:
        raise InvalidGroupError(f"Attribute index {attribute} outside [0, {spec.m})")
    single = np.asarray(post).ndim == 1
    post = np.atleast_2d(post)
    M = np.zeros((len(support), spec.cardinalities[attribute]))
    M[np.arange(len(support)), support.as_array()[:, attribute]] = 1.0
    out = post @ M
    return out[0] if single else out


def argmax_groups(post: np.ndarray, support: GroupSet) -> np.ndarray:
    return support.as_array()[np.argmax(np.atleast_2d(post), axis=1)]


# ---------------------------
# Baselines
# ---------------------------
@dataclass
class DenseClassifier:
    """Unconstrained softmax head over `classes` (groups, or values of one attribute)."""

    spec: AttributeSpec
    support: GroupSet                  # group classes; for attribute heads, the train support seen
    params: Dict[str, np.ndarray]      # V (C, h), c (C,), plus W1/b1 for mlp
    input_dim: int
    feature_map: str = "identity"
    attribute: Optional[int] = None    # None: group classifier
    history: Dict[str, float] = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.support) if self.attribute is None else self.spec.cardinalities[self.attribute]

    def class_indices(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64).reshape(-1, self.spec.m)
        if self.attribute is None:
            return support_indices(self.support, labels)
        return labels[:, self.attribute]


def dense_logits(clf: DenseClassifier, x: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if X.shape[1] != clf.input_dim:
        raise DimensionMismatchError(f"Input has dimension {X.shape[1]}, classifier expects {clf.input_dim}")
    phi, _ = feature_forward(clf.params, X, clf.feature_map)
    return phi @ clf.params["V"].T + clf.params["c"]


def dense_log_posterior(clf: DenseClassifier, x: np.ndarray) -> np.ndarray:
    logits = dense_logits(clf, x)
    return logits - logsumexp(logits, axis=1, keepdims=True)


def dense_nll_loss(clf: DenseClassifier, X: np.ndarray, labels: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    y = clf.class_indices(labels)
    N = X.shape[0]
    phi, cache = feature_forward(clf.params, X, clf.feature_map)
    logits = phi @ clf.params["V"].T + clf.params["c"]
    lse = logsumexp(logits, axis=1)
    loss = float(np.mean(lse - logits[np.arange(N), y]))
    dlogits = np.exp(logits - lse[:, None])
    dlogits[np.arange(N), y] -= 1.0
    dlogits /= N
    grads = {"V": dlogits.T @ phi, "c": dlogits.sum(axis=0)}
    grads.update(feature_backward(clf.params, X, cache, dlogits @ clf.params["V"], clf.feature_map))
    return loss, grads


def _fit_dense(train: Dataset, scenario: ShiftScenario, config: TrainConfig, attribute: Optional[int],
               tag: str) -> DenseClassifier:
    if len(train) == 0:
        raise EmptySupportError("Cannot train on an empty dataset")
    support = _observed_train_support(train, scenario)
    n = train.features.shape[1]
    rng = make_rng(config.seed, f"{tag}-init")
    h = feature_dim(n, config.feature_map, config.hidden_width)
    params = init_feature_params(n, config.feature_map, config.hidden_width, config.init_scale, rng)
    clf = DenseClassifier(scenario.spec, support, params, n, config.feature_map, attribute)
    params["V"] = config.init_scale * rng.standard_normal((clf.n_classes, h))
    params["c"] = np.zeros(clf.n_classes)
    X, y, val = _split_for(train, config)

    def loss_fn(Xb, yb):
        return dense_nll_loss(clf, Xb, yb)

    clf.history = _optimize(clf.params, loss_fn, X, y, config, tag, val)
    logger.info("%s: %d classes, loss %.4f -> %.4f", tag, clf.n_classes,
                clf.history["initial_loss"], clf.history["final_loss"])
    return clf


def fit_erm_group(train: Dataset, scenario: ShiftScenario, config: TrainConfig) -> DenseClassifier:
    return _fit_dense(train, scenario, config, None, "erm-group")


def fit_erm_attribute(train: Dataset, scenario: ShiftScenario, config: TrainConfig, attribute: int) -> DenseClassifier:
    if not 0 <= attribute < scenario.spec.m:
        raise InvalidGroupError(f"Attribute index {attribute} outside [0, {scenario.spec.m})")
    return _fit_dense(train, scenario, config, attribute, f"erm-attr{attribute}")


# ---------------------------
# Ablations and risk
# ---------------------------
def empirical_test_prior(labels: np.ndarray, test_support: GroupSet) -> np.ndarray:
    idx = test_support.indices_of(labels)
    counts = np.bincount(idx[idx >= 0], minlength=len(test_support)).astype(np.float64)
    if counts.sum() == 0:
        raise EmptySupportError("No test labels fall inside the test support")
    return counts / counts.sum()


def ablation_variants(model: EnergyModel, train: Dataset, scenario: ShiftScenario,
                      test_labels: Optional[np.ndarray] = None,
                      b_star: Optional[ExtrapolatedBias] = None) -> "OrderedDict[str, TestPredictor]":
    """
    {B*, B_hat} x {uniform, empirical} test priors. B_hat is completed with 0
    off the train support. The empirical prior comes from `test_labels`
    (the scenario's test prior when none are given).
    """
    support = scenario.test_support
    b_star = b_star or extrapolate_bias(model, train, support)
    star = np.array([b_star.value(z) for z in support])
    hat = np.array([model.params["B"][model.train_support.index_of(z)] if z in model.train_support else 0.0
                    for z in support])
    unf = _log_prior(uniform_prior(support))
    emp_prior = scenario.test_prior if test_labels is None else empirical_test_prior(test_labels, support)
    emp = _log_prior(emp_prior)
    meta = {"unseen_b_hat": "0"}
    variants = OrderedDict()
    for name, bias, log_prior in zip(ABLATION_NAMES, (star, star, hat, hat), (unf, emp, unf, emp)):
        variants[name] = TestPredictor(model, support, log_prior, bias, name, dict(meta))
    return variants


def compositional_risk(log_posterior: np.ndarray, support: GroupSet, labels: np.ndarray) -> float:
    """Mean test NLL; infinite when a label lies outside the predictor's support."""
    idx = support.indices_of(labels)
    if np.any(idx < 0):
        return float("inf")
    return float(-np.mean(log_posterior[np.arange(idx.size), idx]))


def describe_predictor(predictor: TestPredictor) -> str:
    groups = ", ".join(format_group(z) for z in predictor.test_support)
    return f"{predictor.name} over [{groups}]"
