"""Synthetic datasets, the basket-split simulator, and basket file I/O.

A labeled dataset carries ground-truth global classes.  The splitter hides
them: each class is scattered over one or more baskets, each basket assigns
its own contiguous local labels, and only the simulator/evaluation side ever
sees the global ids again.

Features are stored float32; all ids are 1-based.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baskets import LabelSpace, build_label_space

MAGIC = b"BBS1"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Sample:
    """One record of a basket: feature plus simulation-side bookkeeping."""

    feature: np.ndarray
    global_class: int
    basket: int
    local_label: int


@dataclass
class LabeledData:
    """Flat dataset of float32 features with ground-truth class labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be (n, d) with one label per row")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain NaN or Inf")
        if len(self.labels) and self.labels.min() < 1:
            raise ValueError("global classes are 1-based")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class Basket:
    """One basket: per-sample features, local labels, and hidden global ids.

    Local labels are contiguous 1..N and each maps to exactly one global
    class (labels inside a basket are clean).
    """

    features: np.ndarray
    local_labels: np.ndarray
    global_classes: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.local_labels = np.ascontiguousarray(self.local_labels, dtype=np.int64)
        self.global_classes = np.ascontiguousarray(
            self.global_classes, dtype=np.int64
        )
        n = len(self.local_labels)
        if len(self.features) != n or len(self.global_classes) != n:
            raise ValueError("basket arrays must have equal length")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("basket features contain NaN or Inf")
        if n:
            labels = np.unique(self.local_labels)
            if labels[0] != 1 or labels[-1] != len(labels):
                raise ValueError("local labels must be contiguous from 1")
            pairs = {(int(l), int(g)) for l, g in
                     zip(self.local_labels, self.global_classes)}
            if len({l for l, _ in pairs}) != len(pairs):
                raise ValueError("a local label maps to several global classes")

    @property
    def num_classes(self) -> int:
        return int(self.local_labels.max()) if len(self.local_labels) else 0

    @property
    def class_set(self) -> set[int]:
        return set(int(g) for g in np.unique(self.global_classes))

    def label_to_global(self) -> np.ndarray:
        """Array mapping local label l (1-based) to its global class."""
        out = np.zeros(self.num_classes, dtype=np.int64)
        out[self.local_labels - 1] = self.global_classes
        return out


@dataclass
class BasketSet:
    """A list of baskets sharing one feature dimensionality."""

    baskets: list[Basket]
    dim: int

    def __post_init__(self) -> None:
        for i, b in enumerate(self.baskets, start=1):
            if len(b.features) and b.features.shape[1] != self.dim:
                raise ValueError(
                    f"basket {i} has dimension {b.features.shape[1]}, "
                    f"expected {self.dim}"
                )

    @property
    def num_baskets(self) -> int:
        return len(self.baskets)

    def total_samples(self) -> int:
        return sum(len(b.local_labels) for b in self.baskets)

    def label_space(self) -> LabelSpace:
        return build_label_space([b.num_classes for b in self.baskets])

    def iter_samples(self):
        for m, b in enumerate(self.baskets, start=1):
            for i in range(len(b.local_labels)):
                yield Sample(b.features[i], int(b.global_classes[i]), m,
                             int(b.local_labels[i]))


@dataclass(frozen=True)
class SplitSpec:
    """How many parts to draw per class and with which probabilities."""

    parts: int
    probs: tuple[float, ...]
    seed: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        if self.parts < 1:
            raise ValueError("parts must be >= 1")
        if len(self.probs) != self.parts:
            raise ValueError("need one probability per part count")
        if any(p < 0 for p in self.probs):
            raise ValueError("probabilities must be nonnegative")
        if abs(sum(self.probs) - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {sum(self.probs)}, not 1")


def overlap_probs(ratio: float) -> tuple[float, float]:
    """Two-part probabilities giving an expected class overlap of ``ratio``."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    return (1.0 - ratio, ratio)


def geometric_probs(parts: int) -> tuple[float, ...]:
    """Probabilities decaying by 3x per extra part: p_i = 3 * p_{i+1}."""
    if parts < 2:
        raise ValueError("geometric probabilities need at least 2 parts")
    weights = np.array([3.0 ** (parts - i) for i in range(1, parts + 1)])
    return tuple(weights / weights.sum())


def overlap_ratio(basket_a: Basket, basket_b: Basket) -> float:
    """Jaccard overlap of the two baskets' global class sets."""
    a, b = basket_a.class_set, basket_b.class_set
    if not a or not b:
        raise ValueError("overlap ratio needs nonempty baskets")
    return len(a & b) / len(a | b)


def split_dataset(data: LabeledData, spec: SplitSpec) -> BasketSet:
    """Scatter each class over 1..parts baskets drawn from ``spec.probs``.

    The class's samples are shuffled once and dealt round-robin into as many
    nonempty parts as drawn (capped by its sample count); the receiving
    baskets are a uniformly random prefix of a basket permutation.  The
    sample multiset is preserved exactly and local labels are assigned in
    arrival order per basket.
    """
    if len(data) == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(spec.seed)
    by_basket_feats: list[list[np.ndarray]] = [[] for _ in range(spec.parts)]
    by_basket_globals: list[list[int]] = [[] for _ in range(spec.parts)]
    by_basket_counts: list[list[int]] = [[] for _ in range(spec.parts)]
    order = np.argsort(data.labels, kind="stable")
    classes, starts = np.unique(data.labels[order], return_index=True)
    bounds = np.append(starts, len(order))
    for c, cls in enumerate(classes):
        idx = order[bounds[c]:bounds[c + 1]]
        multiplicity = int(rng.choice(spec.parts, p=spec.probs)) + 1
        multiplicity = min(multiplicity, len(idx))
        shuffled = idx[rng.permutation(len(idx))]
        targets = rng.permutation(spec.parts)[:multiplicity]
        for part, basket in enumerate(targets):
            part_idx = shuffled[part::multiplicity]
            by_basket_feats[basket].append(data.features[part_idx])
            by_basket_globals[basket].append(int(cls))
            by_basket_counts[basket].append(len(part_idx))
    baskets = []
    for feats, globals_, counts in zip(by_basket_feats, by_basket_globals,
                                       by_basket_counts):
        if not feats:
            baskets.append(Basket(
                np.empty((0, data.dim), dtype=np.float32),
                np.empty(0, dtype=np.int64),
                np.empty(0, dtype=np.int64),
            ))
            continue
        locals_ = np.repeat(np.arange(1, len(counts) + 1), counts)
        glob = np.repeat(np.asarray(globals_, dtype=np.int64), counts)
        baskets.append(Basket(np.concatenate(feats), locals_, glob))
    return BasketSet(baskets, data.dim)


def gen_synthetic(num_classes: int, samples_per_class: int, dim: int,
                  cluster_spread: float, seed: int) -> LabeledData:
    """Unit-sphere Gaussian clusters: centers uniform, noise isotropic.

    Samples are ``normalize(center + spread * noise)``; with zero spread
    every sample equals its class center.
    """
    if num_classes < 1 or samples_per_class < 1 or dim < 1:
        raise ValueError("num_classes, samples_per_class, dim must be >= 1")
    if cluster_spread < 0:
        raise ValueError("cluster_spread must be >= 0")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    feats = np.repeat(centers, samples_per_class, axis=0)
    feats = feats + cluster_spread * rng.standard_normal(feats.shape)
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    labels = np.repeat(np.arange(1, num_classes + 1), samples_per_class)
    return LabeledData(feats.astype(np.float32), labels)


def _read_exact(fh, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise ValueError(f"truncated basket file: unexpected end of {what}")
    return buf


def _sample_dtype(dim: int) -> np.dtype:
    return np.dtype([("local", "<u4"), ("global", "<u4"), ("feat", "<f4", (dim,))])


def save_baskets(path, basket_set: BasketSet) -> None:
    """Write a basket set to the binary basket format."""
    if not basket_set.baskets:
        raise ValueError("refusing to save an empty basket list")
    dtype = _sample_dtype(basket_set.dim)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<3I", FORMAT_VERSION, basket_set.num_baskets,
                             basket_set.dim))
        for b in basket_set.baskets:
            n = len(b.local_labels)
            fh.write(struct.pack("<2I", b.num_classes, n))
            records = np.empty(n, dtype=dtype)
            records["local"] = b.local_labels
            records["global"] = b.global_classes
            records["feat"] = b.features
            fh.write(records.tobytes())


def load_baskets(path) -> BasketSet:
    """Read a basket set; malformed input raises with a specific cause."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "header")
        if magic != MAGIC:
            raise ValueError(
                f"not a basket file: bad magic {magic!r} (expected {MAGIC!r})"
            )
        version, num_baskets, dim = struct.unpack(
            "<3I", _read_exact(fh, 12, "header")
        )
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported basket file version {version}")
        dtype = _sample_dtype(dim)
        baskets = []
        for m in range(1, num_baskets + 1):
            num_classes, count = struct.unpack(
                "<2I", _read_exact(fh, 8, f"basket {m} header")
            )
            raw = _read_exact(fh, count * dtype.itemsize, f"basket {m} samples")
            records = np.frombuffer(raw, dtype=dtype)
            basket = Basket(
                records["feat"].copy(),
                records["local"].astype(np.int64),
                records["global"].astype(np.int64),
            )
            if basket.num_classes != num_classes:
                raise ValueError(
                    f"basket {m} header claims {num_classes} classes but the "
                    f"samples cover {basket.num_classes}"
                )
            baskets.append(basket)
        trailing = fh.read(1)
        if trailing:
            raise ValueError("trailing data after the last basket")
    return BasketSet(baskets, dim)


def to_labeled(basket_set: BasketSet) -> LabeledData:
    """Flatten a basket set back to (features, global labels)."""
    feats = np.concatenate([b.features for b in basket_set.baskets]) \
        if basket_set.total_samples() else np.empty((0, basket_set.dim),
                                                    dtype=np.float32)
    labels = np.concatenate([b.global_classes for b in basket_set.baskets]) \
        if basket_set.total_samples() else np.empty(0, dtype=np.int64)
    return LabeledData(feats, labels)


def single_basket(data: LabeledData) -> BasketSet:
    """Wrap a labeled dataset as one basket (local labels = rank of global)."""
    classes = np.unique(data.labels)
    remap = {int(g): i + 1 for i, g in enumerate(classes)}
    locals_ = np.array([remap[int(g)] for g in data.labels], dtype=np.int64)
    order = np.argsort(locals_, kind="stable")
    basket = Basket(data.features[order], locals_[order], data.labels[order])
    return BasketSet([basket], data.dim)
