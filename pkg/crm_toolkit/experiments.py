# experiments.py
"""
Experiment recipes: the 2D quadrant adaptation, hull-growth curves,
group-complexity sweeps, the bias/prior ablation and a config-driven custom run.

Each recipe fans out independent jobs (one per seed and scenario), joins them in
key order, writes CSV/JSON results under <OutputDir>/<kind>/ plus run.log,
manifest.json and acceptance.json, and returns an ExperimentResult.
"""
import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from . import __version__
from .affine_hull import (
    enumerate_hull,
    expected_draws_for_distinct,
    expected_randomized_procedure_steps,
    hull_via_components,
    markov_check,
    randomized_procedure_approximation,
    simulate_hull_growth,
    simulate_randomized_procedure,
)
from .attribute_space import AttributeSpec, Group, GroupSet, full_grid
from .crm_adapt import (
    ABLATION_NAMES,
    ExtrapolatedBias,
    TrainConfig,
    ablation_variants,
    argmax_groups,
    build_predictor,
    compositional_risk,
    dense_log_posterior,
    extrapolate_bias,
    fit_crm,
    fit_erm_attribute,
    fit_erm_group,
    log_predict,
    marginalize,
)
from .energy_model import EnergyModel, log_posterior_train
from .errors import ConfigError
from .evaluation import aggregate, evaluate, oracle_agreement, report_to_text, with_agreement
from .settings import log_error, log_info
from .storage import config_hashes, save_b_star, save_predictor, sha256_hex, write_csv, write_dict_csv, write_json
from .synthetic_aed import (
    Dataset,
    GaussianAedSpec,
    ShiftScenario,
    bayes_posterior,
    drop_group,
    drop_groups,
    full_support_scenario,
    make_2d_quadrant_spec,
    make_orthogonal_means,
    quadrant_bayes_group_accuracy,
    retain_random_fraction,
    sample_dataset,
    uniform_prior,
    with_test_prior,
)

logger = logging.getLogger(__name__)

KINDS = ("quadrant2d", "hull-growth", "group-complexity", "ablation", "custom")
AED_KINDS = ("orthogonal", "quadrant")

# one RGB colour per flat group index of a 2 x 2 grid
PALETTE = np.array([
    [68, 119, 170],
    [238, 102, 119],
    [34, 136, 51],
    [204, 187, 68],
], dtype=np.uint8)


# ---------------------------
# Config
# ---------------------------
@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    spec: AttributeSpec
    aed_kind: str
    ambient_dim: int
    mean_scale: float
    energy_weight: float
    drop: Tuple[Group, ...]
    retained_fraction: Optional[float]
    train_samples: int
    test_samples: int
    test_prior: Optional[Tuple[float, ...]]
    train: TrainConfig
    seeds: Tuple[int, ...]
    output_dir: Path
    threads: int = 1
    continue_on_error: bool = True
    settings: Dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_settings(cls, cfg: Dict[str, Any], kind: Optional[str] = None) -> "ExperimentConfig":
        kind = kind or cfg.get("Experiment", "quadrant2d")
        if kind not in KINDS:
            raise ConfigError(f"Unknown experiment kind {kind!r}; expected one of {KINDS}")
        aed = cfg.get("Aed", {})
        scen = cfg.get("Scenario", {})
        aed_kind = str(aed.get("Kind", "orthogonal"))
        if aed_kind not in AED_KINDS:
            raise ConfigError(f"Unknown Aed.Kind {aed_kind!r}; expected one of {AED_KINDS}")
        cards = (2, 2) if aed_kind == "quadrant" else tuple(int(c) for c in aed.get("Cardinalities", [2, 2]))
        seeds = tuple(int(s) for s in cfg.get("Seeds") or [])
        if not seeds:
            raise ConfigError("Seeds must be a non-empty list")
        threads = int(cfg.get("Threads", 1))
        if threads < 1:
            raise ConfigError("Threads must be >= 1")
        fraction = scen.get("RetainedFraction")
        if fraction is not None and not 0.0 < float(fraction) <= 1.0:
            raise ConfigError(f"Scenario.RetainedFraction must be in (0, 1], got {fraction}")
        prior = scen.get("TestPrior")
        try:
            spec = AttributeSpec(cards)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return cls(
            kind=kind,
            spec=spec,
            aed_kind=aed_kind,
            ambient_dim=int(aed.get("AmbientDim", 8)),
            mean_scale=float(aed.get("MeanScale", 1.0)),
            energy_weight=float(aed.get("EnergyWeight", 1.0)),
            drop=tuple(tuple(int(v) for v in z) for z in scen.get("Drop") or []),
            retained_fraction=None if fraction is None else float(fraction),
            train_samples=int(scen.get("TrainSamples", 20000)),
            test_samples=int(scen.get("TestSamples", 10000)),
            test_prior=None if prior is None else tuple(float(p) for p in prior),
            train=TrainConfig.from_settings(cfg.get("Train", {})),
            seeds=seeds,
            output_dir=Path(cfg.get("OutputDir", "output")),
            threads=threads,
            continue_on_error=bool(cfg.get("ContinueOnError", True)),
            settings=cfg,
        )

    def section(self, name: str) -> Dict[str, Any]:
        return dict(self.settings.get(name, {}))

    def train_for(self, seed: int, **overrides) -> TrainConfig:
        return dataclasses.replace(self.train, seed=int(seed), **overrides)

    @property
    def run_dir(self) -> Path:
        return self.output_dir / self.kind


def build_aed(config: ExperimentConfig, seed: int) -> GaussianAedSpec:
    if config.aed_kind == "quadrant":
        return make_2d_quadrant_spec()
    return make_orthogonal_means(config.spec, config.ambient_dim, seed, config.mean_scale, config.energy_weight)


def build_scenario(config: ExperimentConfig, seed: int) -> ShiftScenario:
    grid = full_grid(config.spec)
    if config.retained_fraction is not None:
        scenario = retain_random_fraction(config.spec, config.retained_fraction, seed)
    elif config.drop:
        scenario = drop_groups(grid, config.drop)
    else:
        scenario = full_support_scenario(config.spec)
    if config.test_prior is not None:
        scenario = with_test_prior(scenario, config.test_prior)
    return scenario


# ---------------------------
# Results, jobs, bookkeeping
# ---------------------------
@dataclass
class Check:
    name: str
    passed: bool
    value: Any = None
    limit: Any = None

    def to_json(self) -> dict:
        return {"passed": bool(self.passed), "value": _plain(self.value), "limit": _plain(self.limit)}


@dataclass
class ExperimentResult:
    kind: str
    out_dir: Path
    rows: List[Dict[str, Any]] = field(default_factory=list)
    checks: List[Check] = field(default_factory=list)
    errors: List[str] = field(default_factory=list)
    log: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks) and not self.errors

    def failed_checks(self) -> List[str]:
        return [c.name for c in self.checks if not c.passed] + [f"job:{e}" for e in self.errors]


@dataclass
class JobOutcome:
    key: Tuple
    status: str                     # "ok" | "error"
    value: Any = None
    error: str = ""
    log: List[str] = field(default_factory=list)


def _plain(v: Any) -> Any:
    if isinstance(v, (np.floating, float)):
        return None if not math.isfinite(float(v)) else float(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    return v


def _job_name(key: Tuple) -> str:
    return ":".join(str(k) for k in key)


def run_jobs(jobs: Sequence[Tuple[Tuple, Callable[[List[str]], Any]]], threads: int,
             continue_on_error: bool) -> List[JobOutcome]:
    """
    Run independent jobs, each with its own run-log buffer, and return outcomes
    sorted by key. A failing job is recorded as status="error" unless
    continue_on_error is false, in which case the first failure (in key order)
    is re-raised after the pool drains.
    """
    def one(key, fn):
        buf: List[str] = []
        try:
            return JobOutcome(key, "ok", fn(buf), log=buf)
        except Exception as e:
            log_error(buf, _job_name(key), "Job failed", exc=e)
            if not continue_on_error:
                raise
            return JobOutcome(key, "error", error=repr(e), log=buf)

    ordered = sorted(jobs, key=lambda kv: tuple(str(k) for k in kv[0]))
    if threads > 1 and len(ordered) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(one, k, fn) for k, fn in ordered]
            outcomes, first_error = [], None
            for fut in futures:
                try:
                    outcomes.append(fut.result())
                except Exception as e:
                    first_error = first_error or e
            if first_error is not None:
                raise first_error
            return outcomes
    return [one(k, fn) for k, fn in ordered]


def _collect(result: ExperimentResult, outcomes: List[JobOutcome]) -> List[JobOutcome]:
    ok = []
    for o in outcomes:
        result.log.extend(o.log)
        if o.status == "ok":
            ok.append(o)
        else:
            result.errors.append(f"{_job_name(o.key)}: {o.error}")
    return ok


def prepare_output_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        marker = path / ".write-test"
        marker.write_text("", encoding="utf-8")
        marker.unlink()
    except OSError as e:
        raise ConfigError(f"Output directory {path} is not writable: {e}") from e
    return path


def finish(result: ExperimentResult, config: ExperimentConfig) -> ExperimentResult:
    """Write acceptance.json, manifest.json and run.log for a finished run."""
    out = result.out_dir
    write_json(out / "acceptance.json", {
        "kind": result.kind,
        "passed": result.passed,
        "checks": {c.name: c.to_json() for c in result.checks},
        "job_errors": list(result.errors),
    })
    outputs = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.suffix in (".csv", ".json") and p.name != "manifest.json":
            outputs[p.relative_to(out).as_posix()] = sha256_hex(p.read_bytes())
    manifest = {
        "kind": result.kind,
        "package_version": __version__,
        "seeds": list(config.seeds),
        "threads": config.threads,
        "outputs": outputs,
    }
    manifest.update(config_hashes(config.settings))
    write_json(out / "manifest.json", manifest)
    log_info(result.log, result.kind, f"finished: {len(result.checks)} checks, passed={result.passed}")
    (out / "run.log").write_text("\n".join(result.log) + "\n", encoding="utf-8")
    return result


# ---------------------------
# Shared pieces
# ---------------------------
def _report(post: np.ndarray, support: GroupSet, test: Dataset, scenario: ShiftScenario, seed: int,
            method: str, reference: Optional[np.ndarray] = None):
    report = evaluate(argmax_groups(post, support), test.labels, None, groups=scenario.test_support,
                      scenario=scenario.name, seed=seed, method=method)
    if reference is not None:
        with_agreement(report, *oracle_agreement(post, reference))
    return report


def _bias_diagnostic(b_star: ExtrapolatedBias, model: EnergyModel, dropped: GroupSet, crm, hat) -> Dict[str, Any]:
    """How far B* moves on the dropped groups, and what the B̂ (0 off-support) variant costs or gains in WGA."""
    seen = np.array([b_star.value(z) for z in model.train_support])
    unseen = np.array([b_star.value(z) for z in dropped])
    gap = float(np.max(np.abs(unseen - seen.mean()))) if unseen.size else 0.0
    return {
        "b_star_seen_mean": float(seen.mean()),
        "b_star_unseen_mean": float(unseen.mean()) if unseen.size else None,
        "b_star_unseen_gap": gap,
        "b_hat_seen_mean": float(np.mean(model.params["B"])),
        "crm_wga": crm.worst_group_acc,
        "b_hat_unf_wga": hat.worst_group_acc,
        "crm_minus_b_hat_unf_wga": crm.worst_group_acc - hat.worst_group_acc,
    }


def _slug(text: str) -> str:
    text = text.replace("B̂", "Bhat").replace("B*", "Bstar").replace("+", "-")
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in text)


def _write_report(out: Path, report) -> None:
    stem = _slug(f"{report.method}_seed{report.seed}")
    write_json(out / "reports" / f"{stem}.json", report.to_json())
    (out / "reports" / f"{stem}.txt").write_text(report_to_text(report), encoding="utf-8")


def _flat_index(groups: np.ndarray, spec: AttributeSpec) -> np.ndarray:
    return np.ravel_multi_index(tuple(np.asarray(groups).T), spec.cardinalities)


def render_raster_png(labels: np.ndarray, side: int, path: Path) -> Path:
    """Colour a (side*side,) raster of flat group indices; x1 runs left to right, x2 bottom to top."""
    img = PALETTE[np.asarray(labels, dtype=np.int64) % len(PALETTE)].reshape(side, side, 3)[::-1]
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(img)).save(path, format="PNG")
    return path


# ---------------------------
# 2D quadrant
# ---------------------------
def _quadrant_job(config: ExperimentConfig, seed: int, out: Path, buf: List[str]) -> Dict[str, Any]:
    q = config.section("Quadrant")
    aed = make_2d_quadrant_spec()
    spec = aed.spec
    grid = full_grid(spec)
    scenario = drop_groups(grid, config.drop or [(0, 0)])
    dropped = scenario.dropped()
    train_cfg = config.train_for(seed, learning_rate=float(q.get("LearningRate", config.train.learning_rate)),
                                 batch_size=int(q.get("BatchSize", config.train.batch_size)))
    train = sample_dataset(aed, "train", scenario, int(q.get("TrainSamples", config.train_samples)), seed)
    test = sample_dataset(aed, "test", scenario, int(q.get("TestSamples", config.test_samples)), seed)
    log_info(buf, f"quadrant2d:{seed}", f"train {len(train)} / test {len(test)}; dropped {dropped.to_json()}")

    crm = fit_crm(train, scenario, train_cfg)
    b_star = extrapolate_bias(crm, train, grid)
    predictor = build_predictor(crm, b_star, grid)
    erm = fit_erm_group(train, scenario, train_cfg)
    erm_z1 = fit_erm_attribute(train, scenario, train_cfg, 0)

    bayes = bayes_posterior(test.features, aed, grid, uniform_prior(grid))
    crm_log_post = log_predict(predictor, test.features)
    crm_report = _report(np.exp(crm_log_post), grid, test, scenario, seed, "CRM", bayes)
    erm_log_post = dense_log_posterior(erm, test.features)
    erm_report = _report(np.exp(erm_log_post), erm.support, test, scenario, seed, "ERM")
    hat = ablation_variants(crm, train, scenario, b_star=b_star)["Bias B̂+Unf Prior"]
    hat_report = _report(np.exp(log_predict(hat, test.features)), grid, test, scenario, seed, "Bias B̂+Unf Prior")
    for r in (crm_report, erm_report, hat_report):
        _write_report(out, r)

    seed_dir = out / f"seed{seed}"
    save_predictor(predictor, seed_dir / "predictor")
    save_b_star(b_star, seed_dir / "b_star.csv", crm)

    # decision-region raster
    limit = float(q.get("RasterLimit", 3.0))
    step = float(q.get("RasterStep", 0.05))
    side = int(round(2 * limit / step)) + 1
    axis = np.round(np.linspace(-limit, limit, side), 10)
    x1, x2 = np.meshgrid(axis, axis)
    pts = np.column_stack([x1.ravel(), x2.ravel()])
    columns = {
        "crm_train_prior": _flat_index(argmax_groups(log_posterior_train(crm, pts), crm.train_support), spec),
        "crm_uniform_prior": _flat_index(argmax_groups(log_predict(predictor, pts), grid), spec),
        "erm": _flat_index(argmax_groups(dense_log_posterior(erm, pts), erm.support), spec),
        "bayes": _flat_index(argmax_groups(bayes_posterior(pts, aed, grid, uniform_prior(grid)), grid), spec),
    }
    write_csv(seed_dir / "raster.csv", ["x1", "x2"] + list(columns),
              ([pts[i, 0], pts[i, 1]] + [int(c[i]) for c in columns.values()] for i in range(pts.shape[0])))
    if bool(q.get("RenderPng", True)):
        for name, labels in columns.items():
            render_raster_png(labels, side, seed_dir / f"raster_{name}.png")

    # marginal boundary for z1 off a thin band around x1 = 0
    z1_pred = np.argmax(marginalize(np.exp(log_predict(predictor, pts)), grid, 0), axis=1)
    band = np.abs(pts[:, 0]) > 0.05
    marginal_agree = float(np.mean(z1_pred[band] == (pts[band, 0] > 0)))

    dropped_rows = dropped.indices_of(test.labels) >= 0
    erm_z1_dropped = float(np.mean(np.argmax(dense_log_posterior(erm_z1, test.features[dropped_rows]), axis=1)
                                   == test.labels[dropped_rows, 0])) if dropped_rows.any() else float("nan")

    ceiling = quadrant_bayes_group_accuracy(aed)
    train_gap = max(abs(b_star.value(z) - float(crm.params["B"][i])) for i, z in enumerate(crm.train_support))
    return {
        "reports": [crm_report, erm_report, hat_report],
        "ceiling": min(ceiling.values()),
        "b_gap": train_gap,
        "b_star_unseen_finite": bool(all(np.isfinite(b_star.value(z)) for z in dropped)),
        "erm_dropped_acc": [erm_report.group_acc.get(z, float("nan")) for z in dropped],
        "crm_regions": int(np.unique(columns["crm_uniform_prior"]).size),
        "erm_regions": int(np.unique(columns["erm"]).size),
        "marginal_agree": marginal_agree,
        "erm_z1_dropped_acc": erm_z1_dropped,
        "crm_risk": compositional_risk(crm_log_post, grid, test.labels),
        "erm_risk": compositional_risk(erm_log_post, erm.support, test.labels),
        "bias": _bias_diagnostic(b_star, crm, dropped, crm_report, hat_report),
    }


def run_quadrant2d(config: ExperimentConfig) -> ExperimentResult:
    out = prepare_output_dir(config.run_dir)
    result = ExperimentResult("quadrant2d", out)
    log_info(result.log, "quadrant2d", f"seeds={list(config.seeds)}")
    jobs = [((seed,), (lambda buf, s=seed: _quadrant_job(config, s, out, buf))) for seed in config.seeds]
    done = _collect(result, run_jobs(jobs, config.threads, config.continue_on_error))

    extra = []
    for o in done:
        seed, v = o.key[0], o.value
        crm, erm, hat = v["reports"]
        result.rows.extend(r.row() for r in v["reports"])
        extra.append({"seed": seed, "oracle_agreement": crm.oracle_agreement, "mean_tv": crm.mean_tv,
                      "bayes_ceiling": v["ceiling"], "b_star_train_gap": v["b_gap"],
                      "crm_regions": v["crm_regions"], "erm_regions": v["erm_regions"],
                      "crm_marginal_z1_agreement": v["marginal_agree"],
                      "erm_z1_dropped_acc": v["erm_z1_dropped_acc"],
                      **v["bias"],
                      "crm_compositional_risk": v["crm_risk"], "erm_compositional_risk": v["erm_risk"]})
        result.checks += [
            Check(f"seed{seed}:crm_oracle_agreement", crm.oracle_agreement >= 0.95, crm.oracle_agreement, 0.95),
            Check(f"seed{seed}:crm_wga_near_ceiling", crm.worst_group_acc >= v["ceiling"] - 0.05,
                  crm.worst_group_acc, v["ceiling"] - 0.05),
            Check(f"seed{seed}:erm_dropped_group_zero", all(a == 0.0 for a in v["erm_dropped_acc"]),
                  v["erm_dropped_acc"], 0.0),
            Check(f"seed{seed}:b_star_matches_b_hat", v["b_gap"] <= 0.05, v["b_gap"], 0.05),
            Check(f"seed{seed}:b_star_unseen_finite", v["b_star_unseen_finite"], v["b_star_unseen_finite"], True),
            Check(f"seed{seed}:crm_four_regions", v["crm_regions"] == 4, v["crm_regions"], 4),
            Check(f"seed{seed}:erm_three_regions", v["erm_regions"] == 3, v["erm_regions"], 3),
            Check(f"seed{seed}:crm_marginal_z1_boundary", v["marginal_agree"] >= 0.95, v["marginal_agree"], 0.95),
            Check(f"seed{seed}:crm_risk_below_erm", v["crm_risk"] <= v["erm_risk"], v["crm_risk"], v["erm_risk"]),
        ]
    write_dict_csv(out / "results.csv", result.rows)
    write_dict_csv(out / "summary.csv", aggregate(result.rows))
    write_dict_csv(out / "diagnostics.csv", [_plain(e) for e in extra])
    return finish(result, config)


# ---------------------------
# Group complexity
# ---------------------------
def hull_coverage(train_support: GroupSet, test_support: GroupSet, cap: int) -> float:
    spec = train_support.spec
    hull = hull_via_components(train_support) if spec.m == 2 else enumerate_hull(train_support, cap=cap)
    return sum(1 for z in test_support if z in hull) / len(test_support)


def _complexity_job(config: ExperimentConfig, cards: Tuple[int, ...], fraction: float, seed: int,
                    buf: List[str]) -> Dict[str, Any]:
    g = config.section("GroupComplexity")
    spec = AttributeSpec(cards)
    aed = make_orthogonal_means(spec, int(g.get("AmbientDim", 100)), seed, config.mean_scale, config.energy_weight)
    scenario = retain_random_fraction(spec, fraction, seed)
    cap = int(config.settings.get("EnumerationCap", 1_000_000))
    coverage = hull_coverage(scenario.train_support, scenario.test_support, cap)
    name = f"{'x'.join(str(c) for c in cards)}:{fraction:g}:{seed}"
    if coverage < 1.0:
        log_info(buf, name, f"hull covers {coverage:.3f} of the test grid")

    n_train = int(g.get("TrainSamplesPerGroup", 100)) * len(scenario.train_support)
    n_test = int(g.get("TestSamplesPerGroup", 50)) * len(scenario.test_support)
    train = sample_dataset(aed, "train", scenario, n_train, seed)
    test = sample_dataset(aed, "test", scenario, n_test, seed)
    train_cfg = config.train_for(seed, learning_rate=float(g.get("LearningRate", config.train.learning_rate)))
    model = fit_crm(train, scenario, train_cfg)
    predictor = build_predictor(model, extrapolate_bias(model, train, scenario.test_support), scenario.test_support)
    report = evaluate(argmax_groups(log_predict(predictor, test.features), scenario.test_support), test.labels,
                      None, groups=scenario.test_support, scenario=name.rsplit(":", 1)[0], seed=seed, method="CRM")
    log_info(buf, name, f"average acc {report.average_acc:.4f}")
    return {"report": report, "coverage": coverage, "train_groups": len(scenario.train_support)}


def run_group_complexity(config: ExperimentConfig) -> ExperimentResult:
    out = prepare_output_dir(config.run_dir)
    result = ExperimentResult("group-complexity", out)
    g = config.section("GroupComplexity")
    sweeps = [tuple(int(c) for c in cards) for cards in g.get("Cardinalities", [[10, 10]])]
    fractions = [float(f) for f in g.get("Fractions", [1.0, 0.5, 0.2, 0.1, 0.05])]
    jobs = [((cards, f, seed), (lambda buf, c=cards, f=f, s=seed: _complexity_job(config, c, f, s, buf)))
            for cards in sweeps for f in fractions for seed in config.seeds]
    done = _collect(result, run_jobs(jobs, config.threads, config.continue_on_error))

    rows = []
    for o in done:
        cards, f, seed = o.key
        r = o.value["report"]
        rows.append({"cardinalities": "x".join(str(c) for c in cards), "fraction": f, "seed": seed,
                     "train_groups": o.value["train_groups"], "hull_coverage": o.value["coverage"],
                     "hull_flagged": o.value["coverage"] < 1.0, "average_acc": r.average_acc,
                     "worst_group_acc": r.worst_group_acc, "balanced_acc": r.balanced_acc})
    result.rows = rows
    write_dict_csv(out / "results.csv", rows)
    summary = aggregate(rows, keys=("cardinalities", "fraction"))
    write_dict_csv(out / "summary.csv", summary)

    means = {(r["cardinalities"], r["fraction"]): r["average_acc_mean"] for r in summary}
    for cards in sweeps:
        key = "x".join(str(c) for c in cards)
        at = 0.2 if len(cards) == 2 else 0.1
        if (key, 1.0) in means and (key, at) in means:
            drop = means[(key, 1.0)] - means[(key, at)]
            result.checks.append(Check(f"{key}:drop_at_{at:g}", drop <= 0.10, drop, 0.10))
    return finish(result, config)


# ---------------------------
# Hull growth
# ---------------------------
def _growth_job(config: ExperimentConfig, cards: Tuple[int, ...], seed: int, out: Path,
                buf: List[str]) -> Dict[str, Any]:
    h = config.section("HullGrowth")
    spec = AttributeSpec(cards)
    name = "x".join(str(c) for c in cards)
    curve = simulate_hull_growth(spec, int(h.get("Trials", 10000)), seed, int(h.get("MaxSamples", 5000)),
                                 threads=1, cap=int(config.settings.get("EnumerationCap", 1_000_000)))
    write_csv(out / f"curve_{name}_seed{seed}.csv", ["trial", "sample_index", "hull_rank", "spanned"],
              ([t, s, r, "true" if sp else "false"] for t, s, r, sp in curve.rows()))
    summary = curve.summary()
    summary["markov"] = [markov_check(curve, float(c)) for c in h.get("C", [2, 4])]

    if spec.total_groups == 4 and spec.m == 2:
        summary["coupon_expectation"] = expected_draws_for_distinct(4, 3)
    if spec.m == 2 and spec.is_uniform() and spec.cardinalities[0] > 2:
        d = spec.cardinalities[0]
        steps = simulate_randomized_procedure(d, int(h.get("RandomizedTrials", 2000)), seed)
        summary["randomized_procedure"] = {
            "d": d,
            "trials": int(steps.size),
            "mean": float(steps.mean()),
            "stderr": float(steps.std(ddof=1) / math.sqrt(steps.size)) if steps.size > 1 else 0.0,
            "expected": expected_randomized_procedure_steps(d),
            "approximation": randomized_procedure_approximation(d),
        }
    write_json(out / f"summary_{name}_seed{seed}.json", _plain(summary))
    log_info(buf, f"hull-growth:{name}:{seed}", f"mean samples to span {summary['mean']}")
    return summary


def run_hull_growth(config: ExperimentConfig) -> ExperimentResult:
    out = prepare_output_dir(config.run_dir)
    result = ExperimentResult("hull-growth", out)
    h = config.section("HullGrowth")
    sweeps = [tuple(int(c) for c in cards) for cards in h.get("Cardinalities", [[2, 2], [10, 10], [20, 20]])]
    jobs = [((cards, seed), (lambda buf, c=cards, s=seed: _growth_job(config, c, s, out, buf)))
            for cards in sweeps for seed in config.seeds]
    done = _collect(result, run_jobs(jobs, config.threads, config.continue_on_error))

    for o in done:
        cards, seed = o.key
        name = f"{'x'.join(str(c) for c in cards)}:seed{seed}"
        s = o.value
        result.rows.append({"cardinalities": "x".join(str(c) for c in cards), "seed": seed,
                            "trials": s["trials"], "mean": s["mean"], "median": s["median"], "p90": s["p90"],
                            "incomplete_fraction": s["incomplete_fraction"]})
        for mk in s["markov"]:
            result.checks.append(Check(f"{name}:markov_c{mk['c']:g}", mk["passed"], mk["fraction_unspanned"],
                                       mk["limit"]))
        if "coupon_expectation" in s and s["mean"] is not None:
            target = s["coupon_expectation"]
            result.checks.append(Check(f"{name}:coupon_mean", abs(s["mean"] - target) <= 0.05 * target,
                                       s["mean"], [0.95 * target, 1.05 * target]))
        rp = s.get("randomized_procedure")
        if rp:
            tol = max(4.0 * rp["stderr"], 0.02 * rp["expected"])
            result.checks.append(Check(f"{name}:randomized_mean_vs_exact", abs(rp["mean"] - rp["expected"]) <= tol,
                                       rp["mean"], [rp["expected"] - tol, rp["expected"] + tol]))
            ratio = rp["mean"] / rp["approximation"]
            result.checks.append(Check(f"{name}:randomized_vs_8dlog", 0.5 <= ratio <= 1.5, ratio, [0.5, 1.5]))
    write_dict_csv(out / "results.csv", result.rows)
    return finish(result, config)


# ---------------------------
# Ablation
# ---------------------------
def _ablation_job(config: ExperimentConfig, dropped: Group, seed: int, buf: List[str]) -> Dict[str, Any]:
    a = config.section("Ablation")
    aed = make_2d_quadrant_spec()
    grid = full_grid(aed.spec)
    scenario = drop_group(grid, dropped)
    test_prior = a.get("TestPrior")
    if test_prior is not None:
        scenario = with_test_prior(scenario, test_prior)
    train = sample_dataset(aed, "train", scenario, int(a.get("TrainSamples", config.train_samples)), seed)
    test = sample_dataset(aed, "test", scenario, int(a.get("TestSamples", config.test_samples)), seed)
    train_cfg = config.train_for(seed, learning_rate=float(a.get("LearningRate", config.train.learning_rate)),
                                 batch_size=int(a.get("BatchSize", config.train.batch_size)))
    model = fit_crm(train, scenario, train_cfg)
    b_star = extrapolate_bias(model, train, scenario.test_support)
    reports = []
    for name, predictor in ablation_variants(model, train, scenario, test_labels=test.labels, b_star=b_star).items():
        post = np.exp(log_predict(predictor, test.features))
        reports.append(_report(post, grid, test, scenario, seed, name))
    by_name = {r.method: r for r in reports}
    bias = _bias_diagnostic(b_star, model, scenario.dropped(), by_name["CRM"], by_name["Bias B̂+Unf Prior"])
    log_info(buf, f"ablation:{scenario.name}:{seed}",
             " ".join(f"{r.method}={r.worst_group_acc:.3f}" for r in reports)
             + f" |B*(unseen)-B*(seen)|={bias['b_star_unseen_gap']:.3f}")
    return {"reports": reports, "bias": bias}


def run_ablation(config: ExperimentConfig) -> ExperimentResult:
    out = prepare_output_dir(config.run_dir)
    result = ExperimentResult("ablation", out)
    a = config.section("Ablation")
    dropped_list = [tuple(int(v) for v in z) for z in a.get("DroppedGroups", [[0, 0]])]
    jobs = [((z, seed), (lambda buf, z=z, s=seed: _ablation_job(config, z, s, buf)))
            for z in dropped_list for seed in config.seeds]
    done = _collect(result, run_jobs(jobs, config.threads, config.continue_on_error))

    diagnostics = []
    for o in done:
        z, seed = o.key
        reports = o.value["reports"]
        result.rows.extend(r.row() for r in reports)
        names = [r.method for r in reports]
        result.checks.append(Check(f"drop{z}:seed{seed}:variant_order", tuple(names) == ABLATION_NAMES, names,
                                   list(ABLATION_NAMES)))
        diagnostics.append({"scenario": reports[0].scenario, "seed": seed, **o.value["bias"]})
    write_dict_csv(out / "results.csv", result.rows)
    write_dict_csv(out / "diagnostics.csv", [_plain(d) for d in diagnostics])
    summary = aggregate(result.rows)
    write_dict_csv(out / "summary.csv", summary)
    if a.get("TestPrior") is not None:
        means = {(r["scenario"], r["method"]): r["average_acc_mean"] for r in summary}
        for scen in sorted({r["scenario"] for r in summary}):
            if (scen, "CRM") in means and (scen, "Bias B*+Emp Prior") in means:
                emp, crm = means[(scen, "Bias B*+Emp Prior")], means[(scen, "CRM")]
                result.checks.append(Check(f"{scen}:emp_prior_avg_not_below_crm", emp >= crm, emp, crm))
    return finish(result, config)


# ---------------------------
# Custom
# ---------------------------
def _custom_job(config: ExperimentConfig, seed: int, out: Path, buf: List[str]) -> List[Any]:
    aed = build_aed(config, seed)
    scenario = build_scenario(config, seed)
    train = sample_dataset(aed, "train", scenario, config.train_samples, seed)
    test = sample_dataset(aed, "test", scenario, config.test_samples, seed)
    model = fit_crm(train, scenario, config.train_for(seed))
    b_star = extrapolate_bias(model, train, scenario.test_support)
    predictor = build_predictor(model, b_star, scenario.test_support, scenario.test_prior)
    reference = bayes_posterior(test.features, aed, scenario.test_support, scenario.test_prior)
    crm = _report(np.exp(log_predict(predictor, test.features)), scenario.test_support, test, scenario, seed,
                  "CRM", reference)
    erm_clf = fit_erm_group(train, scenario, config.train_for(seed))
    erm = _report(np.exp(dense_log_posterior(erm_clf, test.features)), erm_clf.support, test, scenario, seed, "ERM")
    save_predictor(predictor, out / f"seed{seed}" / "predictor")
    save_b_star(b_star, out / f"seed{seed}" / "b_star.csv", model)
    for r in (crm, erm):
        _write_report(out, r)
    log_info(buf, f"custom:{seed}", f"CRM avg {crm.average_acc:.4f} wga {crm.worst_group_acc:.4f}")
    return [crm, erm]


def run_custom(config: ExperimentConfig) -> ExperimentResult:
    out = prepare_output_dir(config.run_dir)
    result = ExperimentResult("custom", out)
    jobs = [((seed,), (lambda buf, s=seed: _custom_job(config, s, out, buf))) for seed in config.seeds]
    for o in _collect(result, run_jobs(jobs, config.threads, config.continue_on_error)):
        result.rows.extend(r.row() for r in o.value)
    write_dict_csv(out / "results.csv", result.rows)
    write_dict_csv(out / "summary.csv", aggregate(result.rows))
    return finish(result, config)


RUNNERS: Dict[str, Callable[[ExperimentConfig], ExperimentResult]] = {
    "quadrant2d": run_quadrant2d,
    "hull-growth": run_hull_growth,
    "group-complexity": run_group_complexity,
    "ablation": run_ablation,
    "custom": run_custom,
}


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    logger.info("Running %s into %s", config.kind, config.run_dir)
    return RUNNERS[config.kind](config)
