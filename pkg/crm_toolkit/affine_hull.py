# affine_hull.py
"""
Discrete affine hull of a set of groups.

A group z' belongs to DAff(S) when its one-hot encoding is an affine
combination of the encodings of S. Membership is decided by least squares on
the encoding matrix augmented with a row of ones (which enforces sum(alpha) = 1).
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components as _csgraph_components

from .attribute_space import (
    AttributeSpec,
    Group,
    GroupSet,
    encode_many,
    full_grid,
    marginal_values,
    one_hot_encode,
)
from .errors import EmptySupportError, EnumerationTooLargeError, UnsupportedArityError
from .rng import make_rng

logger = logging.getLogger(__name__)

MEMBERSHIP_TOL = 1e-6
ENUMERATION_CAP = 1_000_000
EXACT_CHECKPOINT_CAP = 10_000
_BATCH = 4096


@dataclass
class AffineMembershipResult:
    is_member: bool
    residual_norm: float
    coefficients: Optional[np.ndarray] = None  # aligned with the train GroupSet order

    def to_json(self) -> dict:
        return {
            "is_member": self.is_member,
            "residual_norm": self.residual_norm,
            "coefficients": None if self.coefficients is None else self.coefficients.tolist(),
        }


def _augmented(encodings: np.ndarray) -> np.ndarray:
    """Columns [sigma(z); 1] for each row encoding."""
    return np.vstack([encodings.T, np.ones((1, encodings.shape[0]))])


def _require_train(train: GroupSet) -> None:
    if len(train) == 0:
        raise EmptySupportError("Affine hull of an empty group set is empty")


# ---------------------------
# Membership
# ---------------------------
def in_affine_hull(candidate: Sequence[int], train: GroupSet, spec: Optional[AttributeSpec] = None,
                   tol: float = MEMBERSHIP_TOL) -> AffineMembershipResult:
    _require_train(train)
    spec = spec or train.spec
    A = _augmented(encode_many(train, spec))
    b = np.append(one_hot_encode(candidate, spec), 1.0)
    # gelsd is SVD based, so duplicate / dependent columns are fine.
    alpha, _, _, _ = linalg.lstsq(A, b, lapack_driver="gelsd")
    residual = float(np.linalg.norm(A @ alpha - b))
    if residual <= tol:
        return AffineMembershipResult(True, residual, alpha)
    return AffineMembershipResult(False, residual, None)


def non_extrapolation_witness(candidate: Sequence[int], train: GroupSet,
                              spec: Optional[AttributeSpec] = None,
                              tol: float = MEMBERSHIP_TOL) -> Optional[np.ndarray]:
    """
    For a candidate outside DAff(train), the least-squares residual
    r = [sigma(c); 1] - A alpha. It is orthogonal to every [sigma(z); 1] of the
    train set and <r, [sigma(c); 1]> = ||r||^2 > 0, so moving the energies along
    r[:-1] shifts all train logits by the same amount while moving the
    candidate's logit. Returns None for members.
    """
    _require_train(train)
    spec = spec or train.spec
    A = _augmented(encode_many(train, spec))
    b = np.append(one_hot_encode(candidate, spec), 1.0)
    alpha, _, _, _ = linalg.lstsq(A, b, lapack_driver="gelsd")
    r = b - A @ alpha
    if np.linalg.norm(r) <= tol:
        return None
    return r


def affine_rank(groups: GroupSet, spec: Optional[AttributeSpec] = None) -> int:
    """Linear rank of the augmented encodings (affine dimension + 1)."""
    if len(groups) == 0:
        return 0
    spec = spec or groups.spec
    return int(np.linalg.matrix_rank(_augmented(encode_many(groups, spec))))


def full_affine_rank(spec: AttributeSpec) -> int:
    return int(sum(d - 1 for d in spec.cardinalities)) + 1


# ---------------------------
# Enumeration
# ---------------------------
def _encode_flat(flat: np.ndarray, spec: AttributeSpec) -> np.ndarray:
    """Augmented encodings (rows) for flat row-major grid indices."""
    values = np.stack(np.unravel_index(flat, spec.cardinalities), axis=1)
    out = np.zeros((flat.shape[0], spec.total_onehot_len + 1), dtype=np.float64)
    out[np.arange(flat.shape[0])[:, None], values + np.asarray(spec.offsets)] = 1.0
    out[:, -1] = 1.0
    return out


def enumerate_hull(train: GroupSet, spec: Optional[AttributeSpec] = None, cap: int = ENUMERATION_CAP,
                   tol: float = MEMBERSHIP_TOL) -> GroupSet:
    """All groups of the grid inside DAff(train), in row-major order."""
    _require_train(train)
    spec = spec or train.spec
    if spec.total_groups > cap:
        raise EnumerationTooLargeError(
            f"Grid has {spec.total_groups} groups > cap {cap}; "
            "use hull_via_components (m=2) or in_affine_hull on specific candidates"
        )
    Q = linalg.orth(_augmented(encode_many(train, spec)))
    members: List[Group] = []
    for start in range(0, spec.total_groups, _BATCH):
        flat = np.arange(start, min(start + _BATCH, spec.total_groups))
        B = _encode_flat(flat, spec)
        resid = B - (B @ Q) @ Q.T
        hit = np.linalg.norm(resid, axis=1) <= tol
        for idx in flat[hit]:
            members.append(tuple(int(v) for v in np.unravel_index(int(idx), spec.cardinalities)))
    return GroupSet(spec, tuple(members))


# ---------------------------
# m = 2 characterization
# ---------------------------
def connected_components(train: GroupSet) -> List[GroupSet]:
    """Partition of train under Hamming-distance-1 adjacency, ordered by first member."""
    _require_train(train)
    arr = train.as_array()
    adjacency = (arr[:, None, :] != arr[None, :, :]).sum(axis=-1) == 1
    _, labels = _csgraph_components(csr_matrix(adjacency), directed=False)
    order: Dict[int, List[Group]] = {}
    for z, lab in zip(train, labels.tolist()):
        order.setdefault(lab, []).append(z)
    return [GroupSet(train.spec, tuple(parts)) for parts in order.values()]


def hull_via_components(train: GroupSet, spec: Optional[AttributeSpec] = None) -> GroupSet:
    spec = spec or train.spec
    if spec.m != 2:
        raise UnsupportedArityError(f"Component characterization needs m=2, got m={spec.m}")
    cells = set()
    for comp in connected_components(train):
        for a in marginal_values(comp, 0):
            for b in marginal_values(comp, 1):
                cells.add((a, b))
    return GroupSet(spec, tuple(sorted(cells)))


def deterministic_spanning_set(spec: AttributeSpec) -> GroupSet:
    """2d-1 groups whose hull is the full d x d grid."""
    if spec.m != 2:
        raise UnsupportedArityError(f"Spanning construction needs m=2, got m={spec.m}")
    if not spec.is_uniform():
        raise UnsupportedArityError(f"Spanning construction needs uniform d, got {spec.cardinalities}")
    d = spec.cardinalities[0]
    if d == 1:
        return GroupSet(spec, ((0, 0),))
    groups = [(0, 0), (0, 1), (1, 0)]
    for i in range(1, d - 1):
        groups += [(0, i + 1), (i + 1, 0)]
    return GroupSet(spec, tuple(groups))


# ---------------------------
# Hull growth under uniform sampling
# ---------------------------
@dataclass
class TrialRecord:
    trial: int
    events: List[Tuple[int, int]]           # (samples drawn so far, hull rank) at every rank increase
    samples_to_span: Optional[int]          # None when max_samples was reached first
    samples: Optional[List[int]] = None     # flat grid indices, kept on request
    hull_sizes: Optional[List[int]] = None  # exact |DAff| at each event (small grids only)

    @property
    def spanned(self) -> bool:
        return self.samples_to_span is not None


@dataclass
class HullGrowthCurve:
    spec: AttributeSpec
    seed: int
    max_samples: int
    full_rank: int
    trials: List[TrialRecord] = field(default_factory=list)

    def spanning_times(self) -> np.ndarray:
        return np.array([t.samples_to_span for t in self.trials if t.spanned], dtype=np.float64)

    def incomplete_fraction(self) -> float:
        if not self.trials:
            return 0.0
        return sum(1 for t in self.trials if not t.spanned) / len(self.trials)

    def fraction_unspanned_at(self, s: int) -> float:
        if not self.trials:
            return 0.0
        late = sum(1 for t in self.trials if not t.spanned or t.samples_to_span > s)
        return late / len(self.trials)

    def summary(self) -> dict:
        times = self.spanning_times()
        out = {
            "cardinalities": list(self.spec.cardinalities),
            "seed": self.seed,
            "trials": len(self.trials),
            "completed": int(times.size),
            "incomplete_fraction": self.incomplete_fraction(),
            "max_samples": self.max_samples,
            "mean": None,
            "median": None,
            "p90": None,
        }
        if times.size:
            out["mean"] = float(times.mean())
            out["median"] = float(np.median(times))
            out["p90"] = float(np.quantile(times, 0.9))
        return out

    def rows(self):
        """CSV rows trial,sample_index,hull_rank,spanned at every rank change."""
        for t in self.trials:
            for s, rank in t.events:
                yield (t.trial, s, rank, rank == self.full_rank)


def _run_trials(spec: AttributeSpec, trial_ids: Sequence[int], seed: int, max_samples: int,
                keep_samples: bool, tol: float) -> List[TrialRecord]:
    K = spec.total_groups
    dim = spec.total_onehot_len + 1
    full_rank = full_affine_rank(spec)
    T = len(trial_ids)
    draws = np.stack([make_rng(seed + t, "hull-growth").integers(0, K, size=max_samples) for t in trial_ids])

    basis = np.zeros((T, full_rank, dim))
    rank = np.zeros(T, dtype=np.int64)
    spanned_at = np.full(T, -1, dtype=np.int64)
    events: List[List[Tuple[int, int]]] = [[] for _ in range(T)]

    for s in range(max_samples):
        active = np.flatnonzero(spanned_at < 0)
        if active.size == 0:
            break
        v = _encode_flat(draws[active, s], spec)
        Q = basis[active]
        # two Gram-Schmidt passes keep the basis orthonormal to round-off
        r = v - np.einsum("tkl,tk->tl", Q, np.einsum("tkl,tl->tk", Q, v))
        r = r - np.einsum("tkl,tk->tl", Q, np.einsum("tkl,tl->tk", Q, r))
        norms = np.linalg.norm(r, axis=1)
        grow = norms > tol
        for j in np.flatnonzero(grow):
            t = active[j]
            basis[t, rank[t]] = r[j] / norms[j]
            rank[t] += 1
            events[t].append((s + 1, int(rank[t])))
            if rank[t] == full_rank:
                spanned_at[t] = s + 1

    records = []
    for j, t in enumerate(trial_ids):
        done = int(spanned_at[j]) if spanned_at[j] > 0 else None
        used = done if done is not None else max_samples
        samples = draws[j, :used].tolist() if keep_samples else None
        records.append(TrialRecord(trial=int(t), events=events[j], samples_to_span=done, samples=samples))
    return records


def _attach_hull_sizes(spec: AttributeSpec, record: TrialRecord) -> None:
    sizes = []
    for s, _ in record.events:
        seen = [tuple(int(v) for v in np.unravel_index(i, spec.cardinalities)) for i in record.samples[:s]]
        sizes.append(len(enumerate_hull(GroupSet(spec, tuple(seen)), spec)))
    record.hull_sizes = sizes


def simulate_hull_growth(spec: AttributeSpec, trials: int, seed: int, max_samples: int,
                         threads: int = 1, exact_checkpoints: bool = False,
                         cap: int = ENUMERATION_CAP, tol: float = MEMBERSHIP_TOL,
                         chunk: int = 2000) -> HullGrowthCurve:
    """
    Draw groups i.i.d. uniformly (with replacement) from the full grid and track
    the affine rank of the sampled encodings incrementally. A trial ends when
    the rank reaches sum(d_i - 1) + 1, i.e. the hull is the whole grid, or when
    max_samples is reached (trial incomplete).
    """
    if spec.total_groups > cap:
        raise EnumerationTooLargeError(f"Grid has {spec.total_groups} groups > cap {cap}")
    keep = exact_checkpoints and spec.total_groups <= EXACT_CHECKPOINT_CAP
    ids = list(range(trials))
    chunks = [ids[i:i + chunk] for i in range(0, len(ids), chunk)]

    def work(c):
        return _run_trials(spec, c, seed, max_samples, keep, tol)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]

    records = [r for part in parts for r in part]
    if keep:
        for r in records:
            _attach_hull_sizes(spec, r)
    curve = HullGrowthCurve(spec=spec, seed=seed, max_samples=max_samples,
                            full_rank=full_affine_rank(spec), trials=records)
    logger.debug("hull growth %s: %s", spec.cardinalities, curve.summary())
    return curve


# ---------------------------
# Randomized subgrid procedure (m = 2)
# ---------------------------
def simulate_randomized_procedure(d: int, trials: int, seed: int) -> np.ndarray:
    """
    Steps taken by the flag-alternating subgrid procedure on a d x d grid.

    Starting from one sampled group, a sample sharing an x-value with the
    current subgrid but lying outside it grows the subgrid by its y-value
    (flag x), then a sample sharing a y-value grows it by its x-value (flag y),
    alternating until the subgrid is the whole grid. The count includes the
    first draw.
    """
    steps = np.zeros(trials, dtype=np.int64)
    for t in range(trials):
        rng = make_rng(seed + t, "randomized-procedure")
        buf = rng.integers(0, d, size=(1024, 2))
        pos = 0

        def draw():
            nonlocal buf, pos
            if pos == buf.shape[0]:
                buf = rng.integers(0, d, size=(1024, 2))
                pos = 0
            g = buf[pos]
            pos += 1
            return int(g[0]), int(g[1])

        gx, gy = draw()
        sx, sy = {gx}, {gy}
        n = 1
        flag_x = True
        while len(sx) < d or len(sy) < d:
            gx, gy = draw()
            n += 1
            inside = gx in sx and gy in sy
            if inside:
                continue
            if flag_x and gx in sx:
                sy.add(gy)
                flag_x = False
            elif not flag_x and gy in sy:
                sx.add(gx)
                flag_x = True
        steps[t] = n
    return steps


def expected_randomized_procedure_steps(d: int) -> float:
    """Exact mean of simulate_randomized_procedure, first draw included."""
    total = 1.0
    for k in range(1, d):
        total += d * d / (k * (d - k)) + d * d / ((k + 1) * (d - k))
    return total


def randomized_procedure_approximation(d: int) -> float:
    """Closed-form approximation 8 d log(d/2) of the expected step count."""
    return 8.0 * d * math.log(d / 2.0)


# ---------------------------
# Bounds and oracles
# ---------------------------
def spanning_sample_bound(m: int, d: int, c: float) -> float:
    """2c(md + d log d): samples after which the hull is the grid w.p. > 1 - 1/c."""
    return 2.0 * c * (m * d + d * math.log(d))


def markov_check(curve: HullGrowthCurve, c: float) -> dict:
    spec = curve.spec
    m, d = spec.m, max(spec.cardinalities)
    s = int(math.ceil(spanning_sample_bound(m, d, c)))
    frac = curve.fraction_unspanned_at(s)
    p = 1.0 / c
    slack = 3.0 * math.sqrt(p * (1.0 - p) / max(len(curve.trials), 1))
    return {
        "m": m,
        "d": d,
        "c": c,
        "samples": s,
        "fraction_unspanned": frac,
        "limit": p + slack,
        "passed": frac <= p + slack,
    }


def expected_draws_for_distinct(total: int, k: int) -> float:
    """Coupon-collector mean number of draws until k distinct of `total` are seen."""
    return float(sum(total / (total - j) for j in range(k)))
