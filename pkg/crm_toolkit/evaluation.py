# evaluation.py
"""
Accuracy metrics per group (average, worst-group, group-balanced), agreement
with a reference posterior, and mean/stderr aggregation across seeds.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .attribute_space import Group, GroupSet, format_group
from .errors import InvalidGroupError, SupportMismatchError

logger = logging.getLogger(__name__)


@dataclass
class EvalReport:
    groups: List[Group]
    group_acc: Dict[Group, float]          # NaN for groups without samples
    group_counts: Dict[Group, int]
    average_acc: float
    worst_group_acc: float
    balanced_acc: float
    oracle_agreement: Optional[float] = None
    mean_tv: Optional[float] = None
    scenario: str = ""
    seed: int = 0
    method: str = ""
    empty_groups: List[Group] = field(default_factory=list)

    def to_json(self) -> dict:
        def num(v):
            return None if v is None or not np.isfinite(v) else float(v)

        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "method": self.method,
            "average_acc": num(self.average_acc),
            "worst_group_acc": num(self.worst_group_acc),
            "balanced_acc": num(self.balanced_acc),
            "oracle_agreement": num(self.oracle_agreement),
            "mean_tv": num(self.mean_tv),
            "groups": [
                {"group": list(z), "accuracy": num(self.group_acc[z]), "count": int(self.group_counts[z])}
                for z in self.groups
            ],
            "empty_groups": [list(z) for z in self.empty_groups],
        }

    def row(self) -> Dict[str, object]:
        return {
            "scenario": self.scenario, "method": self.method, "seed": self.seed,
            "average_acc": self.average_acc, "worst_group_acc": self.worst_group_acc,
            "balanced_acc": self.balanced_acc,
        }


def evaluate(predictions: np.ndarray, labels: np.ndarray, target_attribute: Optional[int] = None,
             groups: Optional[GroupSet] = None, scenario: str = "", seed: int = 0, method: str = "") -> EvalReport:
    """
    Per-group accuracy of `predictions` against `labels`.

    With `target_attribute` set, predictions are values of that attribute and are
    compared against labels[:, target_attribute]; with None they are whole groups
    (N, m). Groups are the label groups (plus `groups` when given, so groups
    without samples are still listed and flagged).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim == 1:
        labels = labels[:, None]
    predictions = np.asarray(predictions, dtype=np.int64)
    if predictions.shape[0] != labels.shape[0]:
        raise InvalidGroupError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")

    if target_attribute is None:
        correct = np.all(predictions.reshape(labels.shape) == labels, axis=1)
    else:
        if not 0 <= target_attribute < labels.shape[1]:
            raise InvalidGroupError(f"Attribute index {target_attribute} outside [0, {labels.shape[1]})")
        correct = predictions.reshape(-1) == labels[:, target_attribute]

    keys, inverse = np.unique(labels, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=len(keys))
    hits = np.bincount(inverse, weights=correct.astype(np.float64), minlength=len(keys))
    seen = {tuple(int(v) for v in k): (int(c), float(h)) for k, c, h in zip(keys, counts, hits)}

    all_groups = sorted(set(seen) | (set(groups) if groups is not None else set()))
    group_acc: Dict[Group, float] = {}
    group_counts: Dict[Group, int] = {}
    empty: List[Group] = []
    for z in all_groups:
        c, h = seen.get(z, (0, 0.0))
        group_counts[z] = c
        if c == 0:
            group_acc[z] = float("nan")
            empty.append(z)
        else:
            group_acc[z] = h / c
    if empty:
        logger.warning("Groups without samples excluded from metrics: %s", [format_group(z) for z in empty])

    accs = np.array([group_acc[z] for z in all_groups if group_counts[z] > 0])
    n = int(counts.sum())
    return EvalReport(
        groups=all_groups,
        group_acc=group_acc,
        group_counts=group_counts,
        average_acc=float(hits.sum() / n) if n else float("nan"),
        worst_group_acc=float(accs.min()) if accs.size else float("nan"),
        balanced_acc=float(accs.mean()) if accs.size else float("nan"),
        scenario=scenario,
        seed=seed,
        method=method,
        empty_groups=empty,
    )


def oracle_agreement(post: np.ndarray, reference: np.ndarray, support: Optional[GroupSet] = None,
                     reference_support: Optional[GroupSet] = None) -> Tuple[float, float]:
    """(argmax agreement, mean total-variation distance) between two posterior tables."""
    if support is not None and reference_support is not None and tuple(support) != tuple(reference_support):
        raise SupportMismatchError("Posterior tables are over different supports")
    post = np.atleast_2d(post)
    reference = np.atleast_2d(reference)
    if post.shape != reference.shape:
        raise SupportMismatchError(f"Posterior tables have shapes {post.shape} and {reference.shape}")
    agree = float(np.mean(np.argmax(post, axis=1) == np.argmax(reference, axis=1)))
    tv = float(np.mean(0.5 * np.abs(post - reference).sum(axis=1)))
    return agree, tv


def with_agreement(report: EvalReport, agreement: float, tv: float) -> EvalReport:
    report.oracle_agreement = agreement
    report.mean_tv = tv
    return report


def report_to_text(report: EvalReport) -> str:
    lines = [
        f"{report.method or 'method'} | scenario={report.scenario or '-'} seed={report.seed}",
        f"  {'group':<14}{'count':>8}{'acc':>10}",
    ]
    for z in report.groups:
        acc = report.group_acc[z]
        acc_s = "-" if not np.isfinite(acc) else f"{acc:.4f}"
        lines.append(f"  {format_group(z):<14}{report.group_counts[z]:>8}{acc_s:>10}")
    lines.append(f"  {'average':<22}{report.average_acc:>10.4f}")
    lines.append(f"  {'worst-group':<22}{report.worst_group_acc:>10.4f}")
    lines.append(f"  {'balanced':<22}{report.balanced_acc:>10.4f}")
    if report.oracle_agreement is not None:
        lines.append(f"  {'oracle agreement':<22}{report.oracle_agreement:>10.4f}")
        lines.append(f"  {'mean TV':<22}{report.mean_tv:>10.4f}")
    if report.empty_groups:
        lines.append("  empty: " + " ".join(format_group(z) for z in report.empty_groups))
    return "\n".join(lines) + "\n"


METRICS = ("average_acc", "worst_group_acc", "balanced_acc")


def aggregate(rows: Iterable[Dict[str, object]], keys: Sequence[str] = ("scenario", "method"),
              metrics: Sequence[str] = METRICS) -> List[Dict[str, object]]:
    """Mean and standard error over seeds, one row per key, in sorted key order."""
    buckets: Dict[Tuple, List[Dict[str, object]]] = {}
    for r in rows:
        buckets.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key in sorted(buckets, key=lambda k: tuple(str(v) for v in k)):
        members = buckets[key]
        row: Dict[str, object] = dict(zip(keys, key))
        row["n_seeds"] = len(members)
        for m in metrics:
            vals = np.array([float(r[m]) for r in members], dtype=np.float64)
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_stderr"] = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
        out.append(row)
    return out
