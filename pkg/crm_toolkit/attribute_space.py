# attribute_space.py
"""
Categorical product space of m attributes.

Groups are plain tuples of 0-based value indices; `GroupSet` is the ordered,
duplicate-free container used for supports. One-hot encodings are dense float
vectors laid out attribute block after attribute block.
"""
import itertools
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DecodeError, EmptySupportError, InvalidGroupError

Group = Tuple[int, ...]


@dataclass(frozen=True)
class AttributeSpec:
    cardinalities: Tuple[int, ...]

    def __post_init__(self):
        cards = tuple(int(c) for c in self.cardinalities)
        if len(cards) < 1:
            raise InvalidGroupError("AttributeSpec needs at least one attribute")
        if any(c < 1 for c in cards):
            raise InvalidGroupError(f"Cardinalities must be >= 1, got {cards}")
        object.__setattr__(self, "cardinalities", cards)

    @property
    def m(self) -> int:
        return len(self.cardinalities)

    @property
    def total_onehot_len(self) -> int:
        return int(sum(self.cardinalities))

    @property
    def total_groups(self) -> int:
        return int(np.prod(self.cardinalities, dtype=np.int64))

    @property
    def offsets(self) -> Tuple[int, ...]:
        """Start index of each attribute block inside a one-hot vector."""
        return tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.cardinalities)[:-1]]))

    def is_uniform(self) -> bool:
        return len(set(self.cardinalities)) == 1

    def check_group(self, z: Sequence[int]) -> Group:
        values = tuple(int(v) for v in z)
        if len(values) != self.m:
            raise InvalidGroupError(f"Group {values} has {len(values)} values, spec has m={self.m}")
        for i, (v, d) in enumerate(zip(values, self.cardinalities)):
            if not 0 <= v < d:
                raise InvalidGroupError(f"Group {values}: attribute {i} value {v} outside [0, {d})")
        return values

    def groups(self) -> Iterator[Group]:
        return itertools.product(*(range(d) for d in self.cardinalities))

    def to_json(self) -> dict:
        return {"cardinalities": list(self.cardinalities)}

    @classmethod
    def from_json(cls, data: dict) -> "AttributeSpec":
        return cls(tuple(data["cardinalities"]))

    @classmethod
    def uniform(cls, m: int, d: int) -> "AttributeSpec":
        return cls(tuple([d] * m))


@dataclass(frozen=True)
class GroupSet:
    """Ordered, duplicate-free groups under one spec."""

    spec: AttributeSpec
    members: Tuple[Group, ...]
    _index: Dict[Group, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        checked = []
        index: Dict[Group, int] = {}
        for z in self.members:
            g = self.spec.check_group(z)
            if g in index:
                continue
            index[g] = len(checked)
            checked.append(g)
        object.__setattr__(self, "members", tuple(checked))
        object.__setattr__(self, "_index", index)

    @classmethod
    def of(cls, spec: AttributeSpec, groups: Iterable[Sequence[int]]) -> "GroupSet":
        return cls(spec, tuple(tuple(int(v) for v in z) for z in groups))

    def __iter__(self) -> Iterator[Group]:
        return iter(self.members)

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, z) -> bool:
        return tuple(z) in self._index

    def __getitem__(self, i: int) -> Group:
        return self.members[i]

    def index_of(self, z: Sequence[int]) -> int:
        return self._index[tuple(int(v) for v in z)]

    def indices_of(self, labels: np.ndarray) -> np.ndarray:
        """Support index per label row; -1 where the label is not a member."""
        labels = np.asarray(labels, dtype=np.int64).reshape(-1, self.spec.m)
        return np.array([self._index.get(tuple(row), -1) for row in labels.tolist()], dtype=np.int64)

    def as_array(self) -> np.ndarray:
        return np.array(self.members, dtype=np.int64).reshape(len(self.members), self.spec.m)

    def union(self, other: "GroupSet") -> "GroupSet":
        return GroupSet(self.spec, self.members + other.members)

    def difference(self, other: "GroupSet") -> "GroupSet":
        return GroupSet(self.spec, tuple(z for z in self.members if z not in other))

    def issubset(self, other: "GroupSet") -> bool:
        return all(z in other for z in self.members)

    def sorted(self) -> "GroupSet":
        return GroupSet(self.spec, tuple(sorted(self.members)))

    def to_json(self) -> List[List[int]]:
        return [list(z) for z in self.members]


# ---------------------------
# Encoding
# ---------------------------
def one_hot_encode(z: Sequence[int], spec: AttributeSpec) -> np.ndarray:
    g = spec.check_group(z)
    v = np.zeros(spec.total_onehot_len, dtype=np.float64)
    for off, val in zip(spec.offsets, g):
        v[off + val] = 1.0
    return v


def encode_many(groups: Iterable[Sequence[int]], spec: AttributeSpec) -> np.ndarray:
    """Row-stacked one-hot encodings, shape (k, sum(d_i))."""
    arr = np.asarray([spec.check_group(z) for z in groups], dtype=np.int64).reshape(-1, spec.m)
    out = np.zeros((arr.shape[0], spec.total_onehot_len), dtype=np.float64)
    cols = arr + np.asarray(spec.offsets, dtype=np.int64)
    out[np.arange(arr.shape[0])[:, None], cols] = 1.0
    return out


def decode(v: Sequence[float], spec: AttributeSpec) -> Group:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (spec.total_onehot_len,):
        raise DecodeError(f"Vector of shape {v.shape} does not match one-hot length {spec.total_onehot_len}")
    values = []
    for i, (off, d) in enumerate(zip(spec.offsets, spec.cardinalities)):
        block = v[off:off + d]
        if not np.all((block == 0.0) | (block == 1.0)) or block.sum() != 1.0:
            raise DecodeError(f"Attribute block {i} is not one-hot: {block.tolist()}")
        values.append(int(np.argmax(block)))
    return tuple(values)


# ---------------------------
# Supports
# ---------------------------
def full_grid(spec: AttributeSpec) -> GroupSet:
    return GroupSet(spec, tuple(spec.groups()))


def marginal_values(s: GroupSet, i: int) -> List[int]:
    return sorted({z[i] for z in s})


def cartesian_product_of_marginals(s: GroupSet, spec: Optional[AttributeSpec] = None) -> GroupSet:
    if len(s) == 0:
        raise EmptySupportError("Cartesian product of an empty support is undefined")
    spec = spec or s.spec
    marginals = [marginal_values(s, i) for i in range(spec.m)]
    return GroupSet(spec, tuple(itertools.product(*marginals)))


def format_group(z: Sequence[int], labels: Optional[Sequence[Sequence[str]]] = None) -> str:
    """1-based display form, or per-attribute value labels when given."""
    if labels is not None:
        return "(" + ",".join(labels[i][v] for i, v in enumerate(z)) + ")"
    return "(" + ",".join(str(v + 1) for v in z) + ")"
