# storage.py
"""
On-disk formats. JSON is canonical (sorted keys, indent 2, trailing newline)
and CSV uses "\n" terminators so reruns with the same config and seed are
byte-identical. Arrays are little-endian float64.
"""
import csv
import hashlib
import io
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from .attribute_space import AttributeSpec, GroupSet
from .crm_adapt import ExtrapolatedBias, TestPredictor, b_star_table
from .energy_model import EnergyModel
from .errors import ConfigError
from .synthetic_aed import Dataset, GaussianAedSpec, ShiftScenario

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
FORMAT_VERSION = 1
FEATURE_DTYPE = "<f8"


# ---------------------------
# Primitives
# ---------------------------
def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def write_json(path: PathLike, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj), encoding="utf-8", newline="\n")
    return path


def read_json(path: PathLike) -> Any:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON in {path}: {e}") from e


def _cell(v: Any) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return "" if v is None else str(v)


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(header))
    for r in rows:
        writer.writerow([_cell(v) for v in r])
    path.write_text(buf.getvalue(), encoding="utf-8", newline="\n")
    return path


def write_dict_csv(path: PathLike, rows: List[Dict[str, Any]]) -> Path:
    header = list(rows[0].keys()) if rows else []
    return write_csv(path, header, ([r[k] for k in header] for r in rows))


def read_csv(path: PathLike) -> List[List[str]]:
    with Path(path).open("r", encoding="utf-8", newline="") as f:
        return list(csv.reader(f))


def _write_array(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype=FEATURE_DTYPE).tobytes())


def _read_array(path: Path, shape: Sequence[int]) -> np.ndarray:
    return np.frombuffer(path.read_bytes(), dtype=FEATURE_DTYPE).reshape(tuple(shape)).astype(np.float64)


# ---------------------------
# Hashing
# ---------------------------
def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def git_blob_hash(data: bytes) -> str:
    """Same digest `git hash-object` gives for a file with these bytes."""
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def config_hashes(cfg: Dict[str, Any]) -> Dict[str, str]:
    data = canonical_json(cfg).encode("utf-8")
    return {"config_sha256": sha256_hex(data), "config_blob": git_blob_hash(data)}


# ---------------------------
# Datasets and scenarios
# ---------------------------
def save_dataset(ds: Dataset, directory: PathLike, aed: Optional[GaussianAedSpec] = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": FORMAT_VERSION,
        "n_samples": len(ds),
        "n": int(ds.features.shape[1]),
        "dtype": FEATURE_DTYPE,
        "m": int(ds.labels.shape[1]),
        "spec_id": ds.spec_id,
        "seed": ds.seed,
        "side": ds.side,
    }
    if aed is not None:
        header["aed"] = aed.to_json()
    write_json(d / "header.json", header)
    _write_array(d / "features.bin", ds.features)
    write_csv(d / "labels.csv", [f"z{i + 1}" for i in range(ds.labels.shape[1])], ds.labels.tolist())
    logger.debug("Saved %s dataset (%d rows) to %s", ds.side, len(ds), d)
    return d


def load_dataset(directory: PathLike) -> Dataset:
    d = Path(directory)
    header = read_json(d / "header.json")
    if header.get("dtype", FEATURE_DTYPE) != FEATURE_DTYPE:
        raise ConfigError(f"Unsupported feature dtype {header['dtype']!r} in {d}")
    shape = (int(header["n_samples"]), int(header["n"]))
    raw = (d / "features.bin").read_bytes()
    if len(raw) != shape[0] * shape[1] * 8:
        raise ConfigError(f"features.bin in {d} has {len(raw)} bytes, header describes {shape}")
    features = _read_array(d / "features.bin", shape)
    rows = read_csv(d / "labels.csv")[1:]
    labels = np.asarray([[int(v) for v in r] for r in rows], dtype=np.int64).reshape(-1, header["m"])
    return Dataset(features, labels, header.get("spec_id", ""), int(header.get("seed", 0)), header.get("side", "train"))


def load_dataset_aed(directory: PathLike) -> Optional[GaussianAedSpec]:
    header = read_json(Path(directory) / "header.json")
    return GaussianAedSpec.from_json(header["aed"]) if "aed" in header else None


def save_scenario(scenario: ShiftScenario, path: PathLike) -> Path:
    return write_json(path, scenario.to_json())


def load_scenario(path: PathLike) -> ShiftScenario:
    return ShiftScenario.from_json(read_json(path))


# ---------------------------
# Checkpoints
# ---------------------------
def save_checkpoint(model: EnergyModel, directory: PathLike) -> Path:
    """model.json header plus params.bin; round-trips bit-exactly."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = sorted(model.params)
    header = {
        "format_version": FORMAT_VERSION,
        "spec": model.spec.to_json(),
        "train_support": model.train_support.to_json(),
        "log_prior_hex": [float(v).hex() for v in model.log_prior],
        "input_dim": model.input_dim,
        "feature_map": model.feature_map,
        "params": [{"name": k, "shape": list(model.params[k].shape)} for k in names],
        "history": {k: float(v) for k, v in model.history.items()},
    }
    write_json(d / "model.json", header)
    blob = b"".join(np.ascontiguousarray(model.params[k], dtype=FEATURE_DTYPE).tobytes() for k in names)
    (d / "params.bin").write_bytes(blob)
    return d


def load_checkpoint(directory: PathLike) -> EnergyModel:
    d = Path(directory)
    header = read_json(d / "model.json")
    spec = AttributeSpec.from_json(header["spec"])
    flat = np.frombuffer((d / "params.bin").read_bytes(), dtype=FEATURE_DTYPE)
    params, pos = {}, 0
    for entry in header["params"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        params[entry["name"]] = flat[pos:pos + size].reshape(entry["shape"]).astype(np.float64)
        pos += size
    if pos != flat.size:
        raise ConfigError(f"params.bin in {d} has {flat.size} values, header describes {pos}")
    return EnergyModel(
        spec=spec,
        train_support=GroupSet.of(spec, header["train_support"]),
        log_prior=np.array([float.fromhex(v) for v in header["log_prior_hex"]]),
        params=params,
        input_dim=int(header["input_dim"]),
        feature_map=header.get("feature_map", "identity"),
        history=dict(header.get("history", {})),
    )


# ---------------------------
# B* and predictors
# ---------------------------
def save_b_star(b_star: ExtrapolatedBias, path: PathLike, model: Optional[EnergyModel] = None) -> Path:
    return write_csv(path, ["group", "b_star", "b_hat_if_any", "std_error"], b_star_table(b_star, model))


def save_predictor(predictor: TestPredictor, directory: PathLike) -> Path:
    d = Path(directory)
    save_checkpoint(predictor.model, d / "model")
    write_json(d / "predictor.json", {
        "format_version": FORMAT_VERSION,
        "name": predictor.name,
        "test_support": predictor.test_support.to_json(),
        "test_log_prior_hex": [float(v).hex() for v in predictor.test_log_prior],
        "bias_hex": [float(v).hex() for v in predictor.bias],
        "metadata": dict(predictor.metadata),
    })
    return d


def load_predictor(directory: PathLike) -> TestPredictor:
    d = Path(directory)
    if not (d / "predictor.json").exists():
        raise FileNotFoundError(f"No predictor bundle in {d}")
    model = load_checkpoint(d / "model")
    data = read_json(d / "predictor.json")
    return TestPredictor(
        model=model,
        test_support=GroupSet.of(model.spec, data["test_support"]),
        test_log_prior=np.array([float.fromhex(v) for v in data["test_log_prior_hex"]]),
        bias=np.array([float.fromhex(v) for v in data["bias_hex"]]),
        name=data.get("name", "CRM"),
        metadata=dict(data.get("metadata", {})),
    )
