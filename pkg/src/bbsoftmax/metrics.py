"""Verification and retrieval metrics over embedding pairs and galleries.

All scores default to cosine similarity (the losses here are cosine-based);
plain Euclidean scoring is available behind a flag for unnormalized runs.
Ties in rankings break toward the lower gallery index, making every metric
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .losses import NORM_EPS


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.sqrt(np.sum(a * a, axis=1) + NORM_EPS)
    nb = np.sqrt(np.sum(b * b, axis=1) + NORM_EPS)
    return np.sum(a * b, axis=1) / (na * nb)


def _pair_scores(pairs: "PairSet", score: str) -> np.ndarray:
    a = np.asarray(pairs.emb_a, dtype=np.float64)
    b = np.asarray(pairs.emb_b, dtype=np.float64)
    if score == "cosine":
        return _cosine(a, b)
    if score == "euclidean":
        return -np.sqrt(np.sum((a - b) ** 2, axis=1))
    raise ValueError(f"unknown score type {score!r}")


@dataclass
class PairSet:
    """Verification pairs: two embedding matrices plus genuine/impostor flags."""

    emb_a: np.ndarray
    emb_b: np.ndarray
    is_genuine: np.ndarray

    def __post_init__(self) -> None:
        self.emb_a = np.atleast_2d(np.asarray(self.emb_a, dtype=np.float64))
        self.emb_b = np.atleast_2d(np.asarray(self.emb_b, dtype=np.float64))
        self.is_genuine = np.asarray(self.is_genuine, dtype=bool)
        if not (len(self.emb_a) == len(self.emb_b) == len(self.is_genuine)):
            raise ValueError("pair arrays must have equal length")
        if len(self.is_genuine) == 0:
            raise ValueError("pair set is empty")


@dataclass
class RetrievalSet:
    """Ranked-retrieval protocol: labeled queries against a labeled gallery."""

    query_emb: np.ndarray
    query_class: np.ndarray
    gallery_emb: np.ndarray
    gallery_class: np.ndarray

    def __post_init__(self) -> None:
        self.query_emb = np.atleast_2d(np.asarray(self.query_emb, np.float64))
        self.gallery_emb = np.atleast_2d(np.asarray(self.gallery_emb,
                                                    np.float64))
        self.query_class = np.asarray(self.query_class, dtype=np.int64)
        self.gallery_class = np.asarray(self.gallery_class, dtype=np.int64)
        if len(self.query_emb) != len(self.query_class):
            raise ValueError("one class per query required")
        if len(self.gallery_emb) != len(self.gallery_class):
            raise ValueError("one class per gallery item required")
        if len(self.query_class) == 0:
            raise ValueError("retrieval set has no queries")
        missing = set(map(int, self.query_class)) - set(
            map(int, self.gallery_class))
        if missing:
            raise ValueError(f"query classes missing from gallery: {missing}")


class TarAtFar(NamedTuple):
    tar: float
    threshold: float
    far_resolvable: bool


def tar_at_far(pairs: PairSet, far: float, score: str = "cosine") -> TarAtFar:
    """True-accept rate at a false-accept budget.

    The threshold is the smallest candidate score at which the fraction of
    impostor pairs scoring >= threshold stays within ``far``; accepted means
    score >= threshold.  When even one accepted impostor overshoots the
    budget (fewer impostors than 1/far), ``far_resolvable`` comes back False
    and the threshold excludes all impostors.
    """
    if not 0.0 < far <= 1.0:
        raise ValueError(f"far must lie in (0, 1], got {far}")
    scores = _pair_scores(pairs, score)
    genuine = scores[pairs.is_genuine]
    impostor = scores[~pairs.is_genuine]
    if len(genuine) == 0 or len(impostor) == 0:
        raise ValueError("need at least one genuine and one impostor pair")
    allowed = int(np.floor(far * len(impostor)))
    resolvable = allowed >= 1
    threshold = None
    for cand in np.unique(impostor):  # ascending candidate sweep
        if np.count_nonzero(impostor >= cand) <= allowed:
            threshold = float(cand)
            break
    if threshold is None:
        threshold = float(np.nextafter(impostor.max(), np.inf))
    tar = float(np.mean(genuine >= threshold))
    return TarAtFar(tar, threshold, resolvable)


def verification_accuracy(pairs: PairSet, score: str = "cosine") -> float:
    """Best correctly-classified fraction over candidate thresholds.

    Candidates are the midpoints of consecutive sorted scores plus the two
    accept-all / reject-all extremes.
    """
    scores = _pair_scores(pairs, score)
    labels = pairs.is_genuine
    order = np.sort(scores)
    candidates = np.concatenate((
        [order[0] - 1.0],
        (order[:-1] + order[1:]) / 2.0,
        [order[-1] + 1.0],
    ))
    best = 0.0
    for th in candidates:
        acc = float(np.mean((scores >= th) == labels))
        best = max(best, acc)
    return best


def _ranking(rs: RetrievalSet, score: str) -> np.ndarray:
    if score == "cosine":
        q = rs.query_emb / np.sqrt(
            np.sum(rs.query_emb**2, axis=1, keepdims=True) + NORM_EPS)
        g = rs.gallery_emb / np.sqrt(
            np.sum(rs.gallery_emb**2, axis=1, keepdims=True) + NORM_EPS)
        sims = q @ g.T
    elif score == "euclidean":
        diff = rs.query_emb[:, None, :] - rs.gallery_emb[None, :, :]
        sims = -np.sqrt(np.sum(diff**2, axis=2))
    else:
        raise ValueError(f"unknown score type {score!r}")
    # stable argsort on negated scores: equal scores keep lower index first
    return np.argsort(-sims, axis=1, kind="stable")


def cmc_topk(rs: RetrievalSet, k: int, score: str = "cosine") -> float:
    """Fraction of queries with a same-class gallery item within rank k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    order = _ranking(rs, score)
    ranked = rs.gallery_class[order[:, :k]]
    hits = (ranked == rs.query_class[:, None]).any(axis=1)
    return float(np.mean(hits))


def mean_ap(rs: RetrievalSet, score: str = "cosine") -> float:
    """Mean over queries of average precision down the full ranking."""
    order = _ranking(rs, score)
    matches = rs.gallery_class[order] == rs.query_class[:, None]
    ranks = np.arange(1, matches.shape[1] + 1)
    cum_hits = np.cumsum(matches, axis=1)
    precision = cum_hits / ranks
    ap = np.sum(precision * matches, axis=1) / matches.sum(axis=1)
    return float(np.mean(ap))


def build_pairs(embeddings: np.ndarray, labels: np.ndarray,
                genuine_pairs: int, impostor_pairs: int,
                seed: int) -> PairSet:
    """Seeded verification pairs: same-class positives, cross-class negatives."""
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    by_class: dict[int, np.ndarray] = {}
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) >= 2:
            by_class[int(cls)] = idx
    if not by_class:
        raise ValueError("no class has two samples; cannot build genuine pairs")
    classes = sorted(by_class)
    a_idx, b_idx, genuine = [], [], []
    for _ in range(genuine_pairs):
        cls = classes[int(rng.integers(len(classes)))]
        i, j = rng.choice(by_class[cls], size=2, replace=False)
        a_idx.append(i)
        b_idx.append(j)
        genuine.append(True)
    all_classes = np.unique(labels)
    if len(all_classes) < 2:
        raise ValueError("need two classes for impostor pairs")
    for _ in range(impostor_pairs):
        ca, cb = rng.choice(all_classes, size=2, replace=False)
        i = int(rng.choice(np.flatnonzero(labels == ca)))
        j = int(rng.choice(np.flatnonzero(labels == cb)))
        a_idx.append(i)
        b_idx.append(j)
        genuine.append(False)
    return PairSet(emb[a_idx], emb[b_idx], np.asarray(genuine))


def build_retrieval(embeddings: np.ndarray, labels: np.ndarray,
                    queries_per_class: int, seed: int) -> RetrievalSet:
    """Seeded query/gallery split keeping at least one gallery item per class."""
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    q_idx, g_idx = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < queries_per_class + 1:
            raise ValueError(
                f"class {cls} has {len(idx)} samples; needs at least "
                f"{queries_per_class + 1} for this query split"
            )
        perm = idx[rng.permutation(len(idx))]
        q_idx.extend(perm[:queries_per_class])
        g_idx.extend(perm[queries_per_class:])
    return RetrievalSet(emb[q_idx], labels[q_idx], emb[g_idx], labels[g_idx])
