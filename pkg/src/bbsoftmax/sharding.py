"""Sharded execution of the basket-based loss across worker threads.

Class centers are partitioned into ``G`` contiguous shards, one per worker.
Each worker mines negatives inside the intersections of its shard with the
foreign baskets ("truncated baskets"), computes masked partial sums of its
own columns, and the partials are combined in fixed shard order so results
are bit-reproducible for a given shard count.

Workers are threads in one process: each exclusively owns its column range
of the classifier (reads and writes), the sample embeddings are broadcast
read-only, and the gather/combine is the only synchronization point.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .baskets import (
    LabelSpace,
    NegativeMask,
    _ceil_count,
    top_similar_indices,
)
from .losses import (
    Classifier,
    LossConfig,
    class_scores,
    masked_softmax,
    scores_backward,
    similarity_values,
    target_scores,
)


@dataclass(frozen=True)
class ShardLayout:
    """Contiguous 1-based class-id ranges, one per shard.

    ``ranges[g]`` is the closed interval [lo, hi] owned by shard ``g``
    (0-based shard index); a shard past the end of the id space has
    ``lo > hi`` and owns nothing.
    """

    num_shards: int
    ranges: tuple[tuple[int, int], ...]

    def shard_slice(self, g: int) -> slice:
        lo, hi = self.ranges[g]
        return slice(lo - 1, hi)

    def nonempty(self) -> list[int]:
        return [g for g, (lo, hi) in enumerate(self.ranges) if lo <= hi]

    def shard_of(self, network_id: int) -> int:
        chunk = self.ranges[0][1] - self.ranges[0][0] + 1
        return (network_id - 1) // chunk


def shard_layout(total: int, num_shards: int) -> ShardLayout:
    """Split ids 1..total into ``num_shards`` chunks of ceil(total/G)."""
    if total < 1 or num_shards < 1:
        raise ValueError("total and num_shards must be >= 1")
    chunk = -(-total // num_shards)
    ranges = tuple(
        (g * chunk + 1, min((g + 1) * chunk, total)) for g in range(num_shards)
    )
    return ShardLayout(num_shards, ranges)


@dataclass(frozen=True)
class ShardSegment:
    """Intersection of one shard's range with one basket's range.

    ``shard`` is the 0-based worker index, ``basket`` the 1-based basket id,
    and [lo, hi] the covered network ids (1-based, closed, nonempty).
    """

    shard: int
    basket: int
    lo: int
    hi: int

    @property
    def length(self) -> int:
        return self.hi - self.lo + 1


def shard_segments(layout: ShardLayout, space: LabelSpace,
                   exclude_basket: int) -> list[ShardSegment]:
    """All nonempty shard-by-basket intersections, skipping one basket.

    Ordered by shard then basket, which fixes the combine order everywhere.
    """
    space._check_basket(exclude_basket)
    segments = []
    for g, (s_lo, s_hi) in enumerate(layout.ranges):
        if s_lo > s_hi:
            continue
        for k in range(1, space.num_baskets + 1):
            if k == exclude_basket:
                continue
            b_lo, b_hi = space.basket_range(k)
            lo, hi = max(s_lo, b_lo), min(s_hi, b_hi)
            if lo <= hi:
                segments.append(ShardSegment(g, k, lo, hi))
    return segments


def segment_ignored_count(length: int, tau: int, ratio: float) -> int:
    """Ignored count for one truncated basket: min(len, max(tau, ceil(len*r)))."""
    return min(length, max(tau, _ceil_count(length * ratio)))


def shard_mask(segment: ShardSegment, cfg: LossConfig, clf: Classifier,
               x: np.ndarray, tau: int, ratio: float) -> np.ndarray:
    """Mask bits over one segment: 0 for its most similar centers, 1 elsewhere.

    The segment is treated as a basket of its own length when sizing the
    ignored count; ties go to the lower network id.
    """
    sims = similarity_values(cfg, clf.weights[segment.lo - 1:segment.hi], x)
    return _segment_bits(sims, segment.length, tau, ratio)


def _segment_bits(sims: np.ndarray, length: int, tau: int,
                  ratio: float) -> np.ndarray:
    bits = np.ones(length, dtype=np.uint8)
    bits[top_similar_indices(sims, segment_ignored_count(length, tau, ratio))] = 0
    return bits


class ShardWorkerPool:
    """Thread pool that evaluates one function per shard, in shard order.

    Results always come back ordered by shard index regardless of thread
    scheduling.  With a single shard the call runs inline.
    """

    def __init__(self, num_workers: int):
        self.num_workers = num_workers
        self._executor = (
            ThreadPoolExecutor(max_workers=num_workers, thread_name_prefix="shard")
            if num_workers > 1
            else None
        )

    def run(self, fn, shard_ids) -> list:
        if self._executor is None:
            return [fn(g) for g in shard_ids]
        futures = [self._executor.submit(fn, g) for g in shard_ids]
        return [f.result() for f in futures]

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)

    def __enter__(self) -> "ShardWorkerPool":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _segments_by_shard(layout: ShardLayout, space: LabelSpace,
                       exclude_basket: int) -> dict[int, list[ShardSegment]]:
    grouped: dict[int, list[ShardSegment]] = {}
    for seg in shard_segments(layout, space, exclude_basket):
        grouped.setdefault(seg.shard, []).append(seg)
    return grouped


def parallel_negative_mask(layout: ShardLayout, space: LabelSpace,
                           cfg: LossConfig, clf: Classifier, x: np.ndarray,
                           owner: tuple[int, int], taus, ratio: float,
                           ) -> NegativeMask:
    """Negative mask assembled from per-segment mining on every shard."""
    bits = np.ones(space.total, dtype=np.uint8)
    bits[space.network_id(*owner) - 1] = 0
    for seg in shard_segments(layout, space, owner[0]):
        bits[seg.lo - 1:seg.hi] = shard_mask(
            seg, cfg, clf, x, taus[seg.basket - 1], ratio
        )
    return NegativeMask(bits, tuple(owner))


def _owner_of(space: LabelSpace, y: int, owner_basket: int) -> tuple[int, int]:
    m, local = space.basket_of(y)
    if m != owner_basket:
        raise ValueError(
            f"network id {y} lies in basket {m}, not owner basket {owner_basket}"
        )
    return m, local


def parallel_bbs_loss(layout: ShardLayout, space: LabelSpace, cfg: LossConfig,
                      clf: Classifier, x: np.ndarray, y: int,
                      owner_basket: int, taus, ratio: float,
                      pool: ShardWorkerPool | None = None) -> float:
    """Basket-based loss evaluated shard by shard with a fixed-order gather.

    Every worker mines its truncated baskets, masks its partial exponential
    sums, and the partial maxima/sums combine in shard order, so the result
    is reproducible bit-for-bit and matches the serial loss exactly when the
    masks coincide (always for a single shard).
    """
    loss, *_ = _parallel_forward(
        layout, space, cfg, clf, x, y, owner_basket, taus, ratio, pool
    )
    return float(loss)


def parallel_bbs_grad(layout: ShardLayout, space: LabelSpace, cfg: LossConfig,
                      clf: Classifier, x: np.ndarray, y: int,
                      owner_basket: int, taus, ratio: float,
                      pool: ShardWorkerPool | None = None):
    """Gradients of :func:`parallel_bbs_loss`.

    Each worker produces the gradient block of its own columns (masked-out
    columns stay exactly zero); embedding-gradient contributions are summed
    in shard order.
    """
    loss, shard_state, denom, x2d = _parallel_forward(
        layout, space, cfg, clf, x, y, owner_basket, taus, ratio, pool
    )
    dW = np.zeros_like(clf.weights)
    db = np.zeros_like(clf.biases)
    dx_parts = []

    def backward(g: int):
        cache, include, z_f, t_col = shard_state[g]
        dlogits = np.where(include, np.exp(np.where(include, cache.logits, -np.inf)
                                           - denom[1]), 0.0) / denom[0]
        cols = None
        if t_col is not None:
            dlogits[0, t_col] = np.exp(z_f - denom[1]) / denom[0] - 1.0
            cols = np.array([t_col])
        sl = layout.shard_slice(g)
        dX_g, dW_g, db_g = scores_backward(
            cfg, clf.weights[sl], x2d, dlogits, cache, cols
        )
        dW[sl] = dW_g
        db[sl] = db_g
        return dX_g[0]

    pool_ = pool or ShardWorkerPool(1)
    shards = [g for g in layout.nonempty()]
    results = pool_.run(backward, shards)
    dx = np.zeros(clf.weights.shape[1])
    for part in results:  # fixed shard order
        dx = dx + part
    if pool is None:
        pool_.close()
    return dx, dW, db


def _parallel_forward(layout, space, cfg, clf, x, y, owner_basket, taus,
                      ratio, pool):
    m, _local = _owner_of(space, y, owner_basket)
    if clf.num_classes != space.total:
        raise ValueError("classifier width does not match the label space")
    x2d = np.atleast_2d(np.asarray(x, dtype=np.float64))
    segments = _segments_by_shard(layout, space, m)
    own_lo, own_hi = space.basket_range(m)

    def forward(g: int):
        sl = layout.shard_slice(g)
        s_lo, s_hi = layout.ranges[g]
        cache = class_scores(cfg, clf.weights[sl], clf.biases[sl], x2d)
        include = np.zeros((1, s_hi - s_lo + 1), dtype=bool)
        o_lo, o_hi = max(s_lo, own_lo), min(s_hi, own_hi)
        if o_lo <= o_hi:
            include[0, o_lo - s_lo:o_hi - s_lo + 1] = True
        for seg in segments.get(g, ()):
            sims = cache.raw_g[0, seg.lo - s_lo:seg.hi - s_lo + 1]
            bits = _segment_bits(sims, seg.length, taus[seg.basket - 1], ratio)
            include[0, seg.lo - s_lo:seg.hi - s_lo + 1] = bits.astype(bool)
        z_f = None
        t_col = None
        if s_lo <= y <= s_hi:
            t_col = y - s_lo
            include[0, t_col] = False
            z_f = float(
                target_scores(cfg, cache, clf.biases[sl], np.array([t_col]))[0]
            )
        masked = np.where(include, cache.logits, -np.inf)
        part_max = float(masked.max())
        return cache, include, z_f, t_col, part_max

    pool_ = pool or ShardWorkerPool(1)
    shards = layout.nonempty()
    fwd = pool_.run(forward, shards)

    z_f = next(state[2] for state in fwd if state[2] is not None)
    big = z_f
    for state in fwd:  # fixed shard order
        big = max(big, state[4])

    def partial_sum(i: int):
        cache, include, *_ = fwd[i]
        p = np.where(include, np.exp(np.where(include, cache.logits, -np.inf)
                                     - big), 0.0)
        return float(p.sum())

    sums = pool_.run(partial_sum, range(len(shards)))
    total = float(np.exp(z_f - big))
    for s in sums:  # fixed shard order
        total += s
    loss = -z_f + big + np.log(total)
    if pool is None:
        pool_.close()

    shard_state = {
        g: (cache, include, zf, t_col)
        for g, (cache, include, zf, t_col, _pm) in zip(shards, fwd)
    }
    return loss, shard_state, (total, big), x2d
