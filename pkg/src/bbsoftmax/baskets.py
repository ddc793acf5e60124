"""Basket label spaces, negative-class mining, and the basket-based loss.

A "basket" is a dataset whose local labels 1..N_m are clean, while the same
real-world class may reappear in other baskets under a different local label.
Concatenating the baskets' label ranges yields network ids 1..L_M; the loss
for a sample then mixes its own basket's classes (always negatives, except
the target) with a mined subset of the other baskets' classes.  The most
similar ``d_k`` centers of each foreign basket are ignored because they are
the likely duplicates of the sample's own class.

All ids in this module (basket ``m``, local label ``l``, network id) are
1-based; numpy arrays are indexed with ``id - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

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
class LabelSpace:
    """Sizes and offsets of the concatenated basket label ranges."""

    basket_sizes: tuple[int, ...]
    offsets: tuple[int, ...]
    total: int

    @property
    def num_baskets(self) -> int:
        return len(self.basket_sizes)

    def network_id(self, basket: int, local: int) -> int:
        """Map (basket, local label) to the concatenated 1-based id."""
        self._check_basket(basket)
        if not 1 <= local <= self.basket_sizes[basket - 1]:
            raise ValueError(
                f"local label {local} outside 1..{self.basket_sizes[basket - 1]} "
                f"of basket {basket}"
            )
        return self.offsets[basket - 1] + local

    def basket_of(self, network_id: int) -> tuple[int, int]:
        """Inverse of :meth:`network_id`: (basket, local label) of an id."""
        if not 1 <= network_id <= self.total:
            raise ValueError(f"network id {network_id} outside 1..{self.total}")
        m = int(np.searchsorted(self.offsets, network_id - 1, side="right"))
        return m, network_id - self.offsets[m - 1]

    def basket_range(self, basket: int) -> tuple[int, int]:
        """Closed 1-based interval [lo, hi] of a basket's network ids."""
        self._check_basket(basket)
        lo = self.offsets[basket - 1] + 1
        return lo, lo + self.basket_sizes[basket - 1] - 1

    def basket_slice(self, basket: int) -> slice:
        """0-based array slice of a basket's columns."""
        lo, hi = self.basket_range(basket)
        return slice(lo - 1, hi)

    def _check_basket(self, basket: int) -> None:
        if not 1 <= basket <= self.num_baskets:
            raise ValueError(f"basket {basket} outside 1..{self.num_baskets}")


def build_label_space(basket_sizes) -> LabelSpace:
    """Concatenate per-basket label ranges into one id space."""
    sizes = tuple(int(n) for n in basket_sizes)
    if not sizes:
        raise ValueError("at least one basket is required")
    if any(n < 1 for n in sizes):
        raise ValueError(f"every basket needs >= 1 class, got {sizes}")
    offsets = tuple(int(v) for v in np.concatenate([[0], np.cumsum(sizes)[:-1]]))
    return LabelSpace(sizes, offsets, sum(sizes))


@dataclass(frozen=True)
class MiningSchedule:
    """Controls how many similar classes are ignored as training progresses.

    ``taus[k-1]`` is the minimum ignored count of basket k; the ignored ratio
    drops stepwise every ``drop_every`` epochs and reaches 0 at epoch
    ``total_epochs``.
    """

    taus: tuple[int, ...]
    drop_every: int
    total_epochs: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "taus", tuple(int(t) for t in self.taus))
        if any(t < 1 for t in self.taus):
            raise ValueError("every tau must be >= 1")
        if self.drop_every < 1 or self.total_epochs < 1:
            raise ValueError("drop_every and total_epochs must be positive")

    @classmethod
    def uniform(cls, tau: int, num_baskets: int, drop_every: int,
                total_epochs: int) -> "MiningSchedule":
        return cls((tau,) * num_baskets, drop_every, total_epochs)


def schedule_ratio(sched: MiningSchedule, epoch: int) -> float:
    """Ignored ratio ceil((T - t)/t_r) * t_r / T at epoch t, capped at 1."""
    if not 1 <= epoch <= sched.total_epochs:
        raise ValueError(
            f"epoch {epoch} outside 1..{sched.total_epochs}"
        )
    steps = -((sched.total_epochs - epoch) // -sched.drop_every)
    return min(1.0, steps * sched.drop_every / sched.total_epochs)


def _ceil_count(value: float) -> int:
    # Tolerate float fuzz: values within 1e-9 of an integer round down.
    return max(0, math.ceil(value - 1e-9))


def ignored_count(basket_size: int, tau: int, ratio: float) -> int:
    """Number of most-similar classes to ignore: min(N, max(tau, ceil(N*r)))."""
    if basket_size < 1 or tau < 1:
        raise ValueError("basket_size and tau must be >= 1")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    return min(basket_size, max(tau, _ceil_count(basket_size * ratio)))


def top_similar_indices(values: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` largest values, ties going to lower indices.

    Deterministic across platforms: elements strictly above the count-th
    largest value always win; remaining slots fill with the lowest indices
    among the elements equal to it.
    """
    n = len(values)
    if count <= 0:
        return np.empty(0, dtype=np.intp)
    if count >= n:
        return np.arange(n)
    part = np.argpartition(-values, count - 1)[:count]
    threshold = values[part].min()
    definite = np.flatnonzero(values > threshold)
    need = count - len(definite)
    at_threshold = np.flatnonzero(values == threshold)[:need]
    return np.concatenate([definite, at_threshold])


@dataclass
class NegativeMask:
    """Per-sample indicator of which classes enter the loss denominator.

    ``bits[j-1]`` is 1 when network id j participates as a negative class.
    The owner's own id is 0 by construction (its term is the numerator), the
    rest of the owner's basket is always 1, and foreign baskets hold the
    mining outcome.
    """

    bits: np.ndarray
    owner: tuple[int, int]

    def __post_init__(self) -> None:
        self.bits = np.asarray(self.bits, dtype=np.uint8)


def full_negatives_mask(space: LabelSpace, owner: tuple[int, int]) -> NegativeMask:
    """Every class except the target is a negative (concatenated training)."""
    bits = np.ones(space.total, dtype=np.uint8)
    bits[space.network_id(*owner) - 1] = 0
    return NegativeMask(bits, owner)


def own_basket_mask(space: LabelSpace, owner: tuple[int, int]) -> NegativeMask:
    """Only the owner's basket participates (multi-task training)."""
    bits = np.zeros(space.total, dtype=np.uint8)
    bits[space.basket_slice(owner[0])] = 1
    bits[space.network_id(*owner) - 1] = 0
    return NegativeMask(bits, owner)


def mining_mask(space: LabelSpace, cfg: LossConfig, clf: Classifier,
                x: np.ndarray, owner: tuple[int, int],
                ignored) -> NegativeMask:
    """Mask out, per foreign basket k, its ``ignored[k-1]`` most similar centers.

    Similarity is the loss's own g(W, x); ties break toward lower network
    ids.  The owner's basket is untouched apart from the target bit.
    """
    m = owner[0]
    space._check_basket(m)
    if clf.num_classes != space.total:
        raise ValueError("classifier width does not match the label space")
    ignored = [int(d) for d in ignored]
    if len(ignored) != space.num_baskets:
        raise ValueError("need one ignored count per basket")
    for k, (d, n) in enumerate(zip(ignored, space.basket_sizes), start=1):
        if k != m and not 0 <= d <= n:
            raise ValueError(f"ignored count {d} exceeds basket {k} size {n}")
    sims = similarity_values(cfg, clf.weights, x)
    mask = full_negatives_mask(space, owner)
    for k in range(1, space.num_baskets + 1):
        if k == m:
            continue
        sl = space.basket_slice(k)
        top = top_similar_indices(sims[sl], ignored[k - 1])
        mask.bits[sl.start + top] = 0
    return mask


def _masked_loss_parts(space: LabelSpace, cfg: LossConfig, clf: Classifier,
                       x: np.ndarray, owner: tuple[int, int],
                       mask: NegativeMask):
    if mask.owner != tuple(owner):
        raise ValueError(
            f"mask built for owner {mask.owner}, used with {tuple(owner)}"
        )
    if mask.bits.shape != (space.total,):
        raise ValueError("mask length does not match the label space")
    target = space.network_id(*owner)
    xv = np.asarray(x, dtype=np.float64)
    cache = class_scores(cfg, clf.weights, clf.biases, xv)
    cols = np.array([target - 1])
    z_f = target_scores(cfg, cache, clf.biases, cols)
    include = mask.bits.astype(bool)[None, :].copy()
    include[0, target - 1] = False
    loss, dlogits, q_t = masked_softmax(z_f, cache.logits, include)
    return loss, dlogits, q_t, cache, cols, xv


def bbs_loss(space: LabelSpace, cfg: LossConfig, clf: Classifier,
             x: np.ndarray, owner: tuple[int, int],
             mask: NegativeMask) -> float:
    """Basket-based softmax loss for one sample under a given negative mask.

    With an all-ones cross-basket mask this reduces to the plain unified loss
    over all network ids; with all zeros it is the per-basket loss.
    """
    loss, _, _, _, _, _ = _masked_loss_parts(space, cfg, clf, x, owner, mask)
    return float(loss[0])


def bbs_loss_grad(space: LabelSpace, cfg: LossConfig, clf: Classifier,
                  x: np.ndarray, owner: tuple[int, int], mask: NegativeMask):
    """Gradients of :func:`bbs_loss`; masked-out centers get exact zeros.

    The mask is treated as a constant of the differentiation (selection is
    discrete), so only the smooth terms propagate.
    """
    loss_parts = _masked_loss_parts(space, cfg, clf, x, owner, mask)
    _, dlogits, q_t, cache, cols, xv = loss_parts
    dlogits[0, cols[0]] = q_t[0] - 1.0
    dX, dW, db = scores_backward(cfg, clf.weights, xv, dlogits, cache, cols)
    return dX[0], dW, db
