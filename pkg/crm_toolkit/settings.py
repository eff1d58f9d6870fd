# settings.py
import copy
import datetime
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

from .errors import ConfigError

logger = logging.getLogger(__name__)

ENV_CONFIG = "CRM_TOOLKIT_CONFIG"
ENV_LOG_LEVEL = "CRM_TOOLKIT_LOG_LEVEL"

DEFAULTS: Dict[str, Any] = {
    "Experiment": "quadrant2d",
    "OutputDir": "output",
    "Seeds": [0, 1, 2],
    "Threads": 1,
    "LogLevel": "INFO",
    # Safety / behavior
    "ContinueOnError": True,
    "EnumerationCap": 1_000_000,
    "MembershipTolerance": 1e-6,
    "PredictorBundle": None,
    "Aed": {
        "Kind": "orthogonal",
        "Cardinalities": [2, 2],
        "AmbientDim": 8,
        "MeanScale": 1.0,
        "EnergyWeight": 1.0,
    },
    "Scenario": {
        "Drop": [[0, 0]],
        "RetainedFraction": None,
        "TrainSamples": 20000,
        "TestSamples": 10000,
        "TestPrior": None,
    },
    "Train": {
        "LearningRate": 1e-3,
        "Beta1": 0.9,
        "Beta2": 0.999,
        "Epsilon": 1e-8,
        "WeightDecay": 0.0,
        "RegularizeBias": False,
        "BatchSize": 128,
        "Steps": 3000,
        "Patience": None,
        "ValidationFraction": 0.2,
        "EvalEvery": 100,
        "LogEvery": 500,
        "FeatureMap": "identity",
        "HiddenWidth": 64,
        "InitScale": 0.01,
    },
    "Quadrant": {
        "TrainSamples": 20000,
        "TestSamples": 10000,
        "LearningRate": 1e-2,
        "BatchSize": 512,
        "RasterLimit": 3.0,
        "RasterStep": 0.05,
        "RenderPng": True,
    },
    "HullGrowth": {
        "Cardinalities": [[2, 2], [10, 10], [20, 20], [40, 40]],
        "Trials": 10000,
        "MaxSamples": 5000,
        "C": [2, 4],
        "RandomizedTrials": 2000,
    },
    "GroupComplexity": {
        "Cardinalities": [[10, 10], [2, 2, 2, 2, 2, 2, 2, 2]],
        "AmbientDim": 100,
        "Fractions": [1.0, 0.5, 0.2, 0.1, 0.05],
        "TrainSamplesPerGroup": 100,
        "TestSamplesPerGroup": 50,
        "LearningRate": 1e-2,
    },
    "Ablation": {
        "DroppedGroups": [[0, 0], [0, 1], [1, 0], [1, 1]],
        "TestPrior": [0.1, 0.2, 0.3, 0.4],
        "TrainSamples": 20000,
        "TestSamples": 10000,
        "LearningRate": 1e-2,
        "BatchSize": 512,
    },
}


# ---------------------------
# Config
# ---------------------------
def _merge(base: Dict[str, Any], data: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in (data or {}).items():
        if isinstance(out.get(key), dict):
            if not isinstance(value, dict):
                raise ConfigError(f"Section {key!r} must be an object, got {type(value).__name__}")
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_settings(config_path: Optional[str] = None) -> Dict[str, Any]:
    """
    Load settings from JSON. If config_path is None, use $CRM_TOOLKIT_CONFIG
    or the appsettings.json next to this file. User values are merged over
    the built-in defaults, section by section.
    """
    config_path = config_path or os.environ.get(ENV_CONFIG)
    cfg_path = Path(config_path) if config_path else (Path(__file__).parent / "appsettings.json")
    if not cfg_path.exists():
        raise FileNotFoundError(f"Config file not found: {cfg_path}")
    try:
        with cfg_path.open("r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON in {cfg_path}: {e}") from e
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"Top level of {cfg_path} must be an object")

    cfg = _merge(DEFAULTS, data or {})
    env_level = os.environ.get(ENV_LOG_LEVEL)
    if env_level:
        cfg["LogLevel"] = env_level
    return cfg


def apply_overrides(cfg: Dict[str, Any], seed: Optional[int] = None, out: Optional[str] = None,
                    threads: Optional[int] = None) -> Dict[str, Any]:
    """CLI flag overrides. A single --seed replaces the seed list."""
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["Seeds"] = [int(seed)]
    if out is not None:
        cfg["OutputDir"] = str(out)
    if threads is not None:
        if int(threads) < 1:
            raise ConfigError("--threads must be >= 1")
        cfg["Threads"] = int(threads)
    return cfg


def configure_logging(level: str = "INFO") -> None:
    numeric = logging.getLevelName(str(level).upper())
    if not isinstance(numeric, int):
        raise ConfigError(f"Unknown log level: {level}")
    root = logging.getLogger("crm_toolkit")
    root.setLevel(numeric)
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)


# ---------------------------
# In-memory run log
# ---------------------------
def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).strftime("%Y-%m-%d %H:%M:%S.%fZ")


def log_error(buf: List[str], run_name: str, msg: str, exc: Optional[BaseException] = None) -> None:
    pfx = f"[{_now()}] [{run_name}]"
    if exc:
        buf.append(f"{pfx} ERROR: {msg} :: {repr(exc)}")
        logger.error("[%s] %s :: %r", run_name, msg, exc)
    else:
        buf.append(f"{pfx} ERROR: {msg}")
        logger.error("[%s] %s", run_name, msg)


def log_info(buf: List[str], run_name: str, msg: str) -> None:
    buf.append(f"[{_now()}] [{run_name}] INFO: {msg}")
    logger.info("[%s] %s", run_name, msg)
