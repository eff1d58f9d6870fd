# cli.py
"""
crm-toolkit command line.

    crm-toolkit hull member --cards 2 2 --train "0,0;0,1;1,0" --candidate 1,1
    crm-toolkit --out data/ gen
    crm-toolkit train --data data/ --bundle model/
    crm-toolkit predict --bundle model/ --data data/test
    crm-toolkit eval --bundle model/ --data data/test
    crm-toolkit --check exp quadrant2d

Exit codes: 0 ok, 2 config/input error, 3 numerical failure, 4 failed acceptance check.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .affine_hull import (
    connected_components,
    deterministic_spanning_set,
    enumerate_hull,
    in_affine_hull,
    non_extrapolation_witness,
)
from .attribute_space import AttributeSpec, GroupSet
from .crm_adapt import argmax_groups, build_predictor, extrapolate_bias, fit_crm, log_predict
from .errors import AcceptanceCheckError, ConfigError, CrmError
from .evaluation import evaluate, report_to_text
from .experiments import KINDS, ExperimentConfig, build_aed, build_scenario, run_experiment
from .settings import apply_overrides, configure_logging, load_settings
from .storage import (
    canonical_json,
    load_dataset,
    load_predictor,
    load_scenario,
    save_b_star,
    save_dataset,
    save_predictor,
    save_scenario,
    write_csv,
    write_json,
)
from .synthetic_aed import sample_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CHECK = 4


def _parse_groups(text: str) -> List[List[int]]:
    """'0,0;0,1' -> [[0, 0], [0, 1]]"""
    try:
        return [[int(v) for v in part.split(",")] for part in text.split(";") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"Cannot parse groups {text!r}: {e}") from e


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crm-toolkit", description="Compositional risk minimization toolkit")
    p.add_argument("--config", help="JSON settings file (default: packaged appsettings.json)")
    p.add_argument("--seed", type=int, help="Run a single seed instead of the configured list")
    p.add_argument("--out", help="Output directory")
    p.add_argument("--threads", type=int, help="Worker threads for independent jobs")
    p.add_argument("--check", action="store_true", help="Exit 4 when an acceptance check fails")
    p.add_argument("--log-level", help="Override LogLevel")
    sub = p.add_subparsers(dest="command", required=True)

    h = sub.add_parser("hull", help="Affine hull queries")
    h.add_argument("action", choices=["member", "enumerate", "components", "span", "witness"])
    h.add_argument("--cards", type=int, nargs="+", required=True, help="Cardinalities d_1 .. d_m")
    h.add_argument("--train", default="", help="Groups as 'a,b;c,d' (0-based)")
    h.add_argument("--candidate", help="Group as 'a,b'")

    sub.add_parser("gen", help="Sample train/test datasets from the configured AED and scenario")

    t = sub.add_parser("train", help="Fit CRM on a generated dataset and save a predictor bundle")
    t.add_argument("--data", required=True, help="Directory written by `gen`")
    t.add_argument("--bundle", required=True, help="Predictor bundle directory to write")

    for name, text in (("predict", "Write posteriors for a dataset"), ("eval", "Evaluate a bundle on a dataset")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--bundle", help="Predictor bundle (default: PredictorBundle setting)")
        s.add_argument("--data", required=True, help="Dataset directory")
        if name == "predict":
            s.add_argument("--output", help="CSV path (default: stdout)")

    e = sub.add_parser("exp", help="Run an experiment recipe")
    e.add_argument("kind", choices=KINDS)
    return p


# ---------------------------
# Commands
# ---------------------------
def cmd_hull(args, cfg) -> int:
    spec = AttributeSpec(tuple(args.cards))
    tol = float(cfg.get("MembershipTolerance", 1e-6))
    if args.action == "span":
        print(canonical_json({"groups": deterministic_spanning_set(spec).to_json()}), end="")
        return EXIT_OK
    train = GroupSet.of(spec, _parse_groups(args.train))
    if args.action == "enumerate":
        hull = enumerate_hull(train, spec, cap=int(cfg.get("EnumerationCap", 1_000_000)), tol=tol)
        out = {"hull": hull.to_json(), "size": len(hull), "grid": spec.total_groups}
    elif args.action == "components":
        out = {"components": [c.to_json() for c in connected_components(train)]}
    else:
        if not args.candidate:
            raise ConfigError("--candidate is required for member/witness")
        candidate = _parse_groups(args.candidate)[0]
        if args.action == "member":
            out = in_affine_hull(candidate, train, spec, tol).to_json()
        else:
            w = non_extrapolation_witness(candidate, train, spec, tol)
            out = {"witness": None if w is None else w.tolist()}
    print(canonical_json(out), end="")
    return EXIT_OK


def cmd_gen(args, cfg) -> int:
    config = ExperimentConfig.from_settings(cfg, "custom")
    seed = config.seeds[0]
    out = config.output_dir
    aed = build_aed(config, seed)
    scenario = build_scenario(config, seed)
    save_scenario(scenario, out / "scenario.json")
    save_dataset(sample_dataset(aed, "train", scenario, config.train_samples, seed), out / "train", aed)
    save_dataset(sample_dataset(aed, "test", scenario, config.test_samples, seed), out / "test", aed)
    logger.info("Wrote %s", out)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    config = ExperimentConfig.from_settings(cfg, "custom")
    data = Path(args.data)
    scenario = load_scenario(data / "scenario.json")
    train = load_dataset(data / "train")
    model = fit_crm(train, scenario, config.train_for(config.seeds[0]))
    b_star = extrapolate_bias(model, train, scenario.test_support)
    predictor = build_predictor(model, b_star, scenario.test_support, scenario.test_prior)
    bundle = Path(args.bundle)
    save_predictor(predictor, bundle)
    save_b_star(b_star, bundle / "b_star.csv", model)
    logger.info("Saved predictor bundle to %s", bundle)
    return EXIT_OK


def _bundle_path(args, cfg) -> Path:
    path = args.bundle or cfg.get("PredictorBundle")
    if not path:
        raise ConfigError("No predictor bundle given (--bundle or PredictorBundle)")
    return Path(path)


def cmd_predict(args, cfg) -> int:
    predictor = load_predictor(_bundle_path(args, cfg))
    ds = load_dataset(args.data)
    post = np.exp(log_predict(predictor, ds.features))
    header = [" ".join(str(v) for v in z) for z in predictor.test_support]
    if args.output:
        write_csv(args.output, header, post.tolist())
    else:
        w = sys.stdout
        w.write(",".join(header) + "\n")
        for row in post:
            w.write(",".join(repr(float(v)) for v in row) + "\n")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    predictor = load_predictor(_bundle_path(args, cfg))
    ds = load_dataset(args.data)
    pred = argmax_groups(log_predict(predictor, ds.features), predictor.test_support)
    report = evaluate(pred, ds.labels, None, groups=predictor.test_support, seed=ds.seed, method=predictor.name)
    sys.stdout.write(report_to_text(report))
    if args.out:
        write_json(Path(args.out) / "report.json", report.to_json())
    return EXIT_OK


def cmd_exp(args, cfg) -> int:
    config = ExperimentConfig.from_settings(cfg, args.kind)
    result = run_experiment(config)
    for c in result.checks:
        logger.info("check %-50s %s", c.name, "ok" if c.passed else "FAILED")
    if args.check and not result.passed:
        raise AcceptanceCheckError(result.failed_checks())
    return EXIT_OK


COMMANDS = {
    "hull": cmd_hull,
    "gen": cmd_gen,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "exp": cmd_exp,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_settings(args.config)
        if args.log_level:
            cfg["LogLevel"] = args.log_level
        configure_logging(cfg.get("LogLevel", "INFO"))
        cfg = apply_overrides(cfg, seed=args.seed, out=args.out, threads=args.threads)
        return COMMANDS[args.command](args, cfg)
    except FileNotFoundError as e:
        logger.error("%s", e)
        return EXIT_CONFIG
    except CrmError as e:
        logger.error("%s", e)
        return e.exit_code
    except (FloatingPointError, ArithmeticError) as e:
        logger.error("Numerical failure: %s", e)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
