"""End-to-end training: MLP embedding backbone, SGD, and the loss modes.

Four ways to train on a basket set share one loop:

* ``baseline1`` treats every (basket, local label) pair as its own class and
  runs the plain loss over all network ids.
* ``baseline2`` is the multi-task setup: every sample's loss sees only its
  own basket's classes.  One wide classifier whose cross-basket terms are
  masked out is mathematically identical to independent per-basket heads,
  because neither the loss, the gradients, nor SGD ever couple the blocks.
* ``bbs`` mines cross-basket negative classes per sample with the scheduled
  ignored ratio.
* ``pbbs`` evaluates the same loss sharded across worker threads.

Everything is float64 internally and deterministic given the seed (and, for
``pbbs``, the shard count).
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .baskets import (
    LabelSpace,
    MiningSchedule,
    NegativeMask,
    ignored_count,
    schedule_ratio,
    top_similar_indices,
)
from .datasim import BasketSet
from .losses import (
    NORM_EPS,
    Classifier,
    LossConfig,
    Method,
    class_scores,
    scores_backward,
    target_scores,
)
from .sharding import (
    ShardLayout,
    ShardWorkerPool,
    _segments_by_shard,
    segment_ignored_count,
    shard_layout,
)

# Methods whose scores ignore the embedding magnitude; for these the
# backbone output is L2-normalized by default.
_NORMALIZED_METHODS = frozenset(
    {Method.L2SOFTMAX, Method.NORMFACE, Method.COSFACE, Method.ARCFACE}
)

MODEL_MAGIC = b"BBSM"
MODEL_VERSION = 1


class TrainMode(str, Enum):
    BASELINE1 = "baseline1"
    BASELINE2 = "baseline2"
    BBS = "bbs"
    PARALLEL_BBS = "pbbs"


@dataclass
class ModelParams:
    """MLP with ReLU hidden activations; optional unit-norm output."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    normalize_embedding: bool = True

    def __post_init__(self) -> None:
        self.layers = [
            (np.ascontiguousarray(w, dtype=np.float64),
             np.ascontiguousarray(b, dtype=np.float64))
            for w, b in self.layers
        ]
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i} has inconsistent shapes")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} contains NaN or Inf")
            if i and w.shape[1] != self.layers[i - 1][0].shape[0]:
                raise ValueError(f"layer {i} input does not chain")

    @property
    def embed_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out


def init_model(input_dim: int, hidden_dims, embed_dim: int,
               normalize_embedding: bool, rng: np.random.Generator,
               ) -> ModelParams:
    """He-style random init; biases start at zero."""
    dims = [input_dim, *hidden_dims, embed_dim]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        scale = np.sqrt(2.0 / fan_in)
        layers.append((scale * rng.standard_normal((fan_out, fan_in)),
                       np.zeros(fan_out)))
    return ModelParams(layers, normalize_embedding)


def forward_embed(params: ModelParams, feature: np.ndarray) -> np.ndarray:
    """Embedding of a single input vector."""
    emb, _ = _forward_batch(params, np.asarray(feature, dtype=np.float64))
    return emb[0]


def _forward_batch(params: ModelParams, X: np.ndarray):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != params.input_dim:
        raise ValueError(
            f"input dimension {X.shape[1]} != model input {params.input_dim}"
        )
    acts = [X]
    pre = []
    a = X
    for i, (w, b) in enumerate(params.layers):
        z = a @ w.T + b
        pre.append(z)
        a = np.maximum(z, 0.0) if i < len(params.layers) - 1 else z
        acts.append(a)
    if params.normalize_embedding:
        norms = np.sqrt(np.sum(a * a, axis=1) + NORM_EPS)
        emb = a / norms[:, None]
    else:
        norms = None
        emb = a
    return emb, (acts, pre, norms, emb)


def _backward_batch(params: ModelParams, cache, d_emb: np.ndarray):
    acts, pre, norms, emb = cache
    if params.normalize_embedding:
        inner = np.sum(d_emb * emb, axis=1)
        da = (d_emb - emb * inner[:, None]) / norms[:, None]
    else:
        da = d_emb
    grads: list[tuple[np.ndarray, np.ndarray]] = []
    for i in reversed(range(len(params.layers))):
        w, _b = params.layers[i]
        dz = da if i == len(params.layers) - 1 else da * (pre[i] > 0)
        grads.append((dz.T @ acts[i], dz.sum(axis=0)))
        da = dz @ w
    grads.reverse()
    return grads


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float, weight_decay: float):
    """Classic momentum with decoupled-from-nothing weight decay.

    v <- momentum*v + grad + weight_decay*param;  param <- param - lr*v.
    Returns the updated (param, velocity) pair.
    """
    v = momentum * velocity + grad + weight_decay * param
    return param - lr * v, v


@dataclass(frozen=True)
class OptimizerConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drop_epochs: tuple[int, ...] = (5, 10, 15)


def lr_at(opt: OptimizerConfig, epoch: int) -> float:
    """Step schedule: divide lr by 10 at every listed drop epoch."""
    drops = sum(1 for d in opt.lr_drop_epochs if d <= epoch)
    return opt.lr0 / 10.0 ** drops


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig
    mode: TrainMode
    sched: MiningSchedule
    optimizer: OptimizerConfig = OptimizerConfig()
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    shards: int = 1
    hidden_dims: tuple[int, ...] = (64,)
    embed_dim: int = 16
    normalize_embedding: bool | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", TrainMode(self.mode))
        if self.epochs != self.sched.total_epochs:
            raise ValueError("epochs must equal the schedule's total_epochs")
        if self.shards < 1:
            raise ValueError("shards must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def normalized(self) -> bool:
        if self.normalize_embedding is not None:
            return self.normalize_embedding
        return self.loss.method in _NORMALIZED_METHODS


@dataclass
class EpochStats:
    epoch: int
    lr: float
    ratio: float
    mean_loss: float
    wall_ms: float


@dataclass
class TrainResult:
    params: ModelParams
    classifier: Classifier
    log: list[EpochStats]


def _flatten(data: BasketSet, space: LabelSpace):
    feats, owners, tcols = [], [], []
    for m, basket in enumerate(data.baskets, start=1):
        feats.append(basket.features.astype(np.float64))
        owners.append(np.full(len(basket.local_labels), m))
        tcols.append(space.offsets[m - 1] + basket.local_labels - 1)
    return (np.concatenate(feats), np.concatenate(owners),
            np.concatenate(tcols))


def _mine_include(cfg, space, cache, owners, tcols, counts):
    """Include matrix for the mined loss: per row, per foreign basket,
    drop the ``counts[k-1]`` most similar centers."""
    include = np.ones_like(cache.raw_g, dtype=bool)
    for i in range(include.shape[0]):
        m = owners[i]
        for k in range(1, space.num_baskets + 1):
            if k == m:
                continue
            sl = space.basket_slice(k)
            top = top_similar_indices(cache.raw_g[i, sl], counts[k - 1])
            include[i, sl.start + top] = False
    rows = np.arange(include.shape[0])
    include[rows, tcols] = False
    return include


def _serial_batch(cfg, space, clf, X_emb, owners, tcols, mode, counts):
    """Loss values and (dX, dW, db) of the mean loss over one batch."""
    cache = class_scores(cfg, clf.weights, clf.biases, X_emb)
    rows = np.arange(len(X_emb))
    if mode is TrainMode.BASELINE1:
        include = np.ones_like(cache.logits, dtype=bool)
        include[rows, tcols] = False
    elif mode is TrainMode.BASELINE2:
        include = np.zeros_like(cache.logits, dtype=bool)
        for i in range(len(rows)):
            include[i, space.basket_slice(owners[i])] = True
        include[rows, tcols] = False
    else:
        include = _mine_include(cfg, space, cache, owners, tcols, counts)
    z_f = target_scores(cfg, cache, clf.biases, tcols)
    masked = np.where(include, cache.logits, -np.inf)
    row_max = masked.max(axis=1)
    m = np.maximum(z_f, row_max)
    p = np.exp(masked - m[:, None])
    rest = p.sum(axis=1)
    exp_t = np.exp(z_f - m)
    denom = exp_t + rest
    losses = -z_f + m + np.log(denom)
    dlogits = p / denom[:, None]
    dlogits[rows, tcols] = exp_t / denom - 1.0
    dlogits /= len(rows)
    dX, dW, db = scores_backward(cfg, clf.weights, X_emb, dlogits, cache, tcols)
    return losses, dX, dW, db


def _parallel_batch(cfg, space, clf, X_emb, owners, tcols, layout, taus,
                    ratio, pool, segment_map):
    """Sharded batch step; combines partials in fixed shard order."""
    rows = np.arange(len(X_emb))
    own_ranges = [space.basket_range(m) for m in range(1, space.num_baskets + 1)]
    shards = layout.nonempty()

    def forward(g: int):
        s_lo, s_hi = layout.ranges[g]
        sl = layout.shard_slice(g)
        cache = class_scores(cfg, clf.weights[sl], clf.biases[sl], X_emb)
        include = np.zeros_like(cache.logits, dtype=bool)
        for i in rows:
            o_lo, o_hi = own_ranges[owners[i] - 1]
            o_lo, o_hi = max(s_lo, o_lo), min(s_hi, o_hi)
            if o_lo <= o_hi:
                include[i, o_lo - s_lo:o_hi - s_lo + 1] = True
            for seg in segment_map[owners[i]].get(g, ()):
                sims = cache.raw_g[i, seg.lo - s_lo:seg.hi - s_lo + 1]
                d = segment_ignored_count(seg.length, taus[seg.basket - 1],
                                          ratio)
                bits = np.ones(seg.length, dtype=bool)
                bits[top_similar_indices(sims, d)] = False
                include[i, seg.lo - s_lo:seg.hi - s_lo + 1] = bits
        owned = np.flatnonzero((tcols >= s_lo - 1) & (tcols <= s_hi - 1))
        z_f_part = None
        if len(owned):
            local_cols = tcols[owned] - (s_lo - 1)
            include[owned, local_cols] = False
            z_f_part = target_scores(
                cfg, _rows_view(cache, owned), clf.biases[sl], local_cols
            )
        masked = np.where(include, cache.logits, -np.inf)
        return cache, include, masked, owned, z_f_part, masked.max(axis=1)

    fwd = pool.run(forward, shards)
    z_f = np.empty(len(rows))
    for _cache, _inc, _masked, owned, z_f_part, _rm in fwd:
        if len(owned):
            z_f[owned] = z_f_part
    m = z_f
    for state in fwd:  # fixed shard order
        m = np.maximum(m, state[5])

    def partial(i: int):
        _cache, _inc, masked, *_ = fwd[i]
        p = np.exp(masked - m[:, None])
        return p, p.sum(axis=1)

    parts = pool.run(partial, range(len(shards)))
    exp_t = np.exp(z_f - m)
    denom = exp_t.copy()
    for _p, rest in parts:  # fixed shard order
        denom += rest
    losses = -z_f + m + np.log(denom)

    dW = np.zeros_like(clf.weights)
    db = np.zeros_like(clf.biases)

    def backward(i: int):
        g = shards[i]
        cache, _include, _masked, owned, _zf, _rm = fwd[i]
        p, _rest = parts[i]
        dlogits = p / denom[:, None]
        cols = None
        if len(owned):
            local_cols = tcols[owned] - (layout.ranges[g][0] - 1)
            dlogits[owned, local_cols] = exp_t[owned] / denom[owned] - 1.0
            cols = (owned, local_cols)
        dlogits /= len(rows)
        sl = layout.shard_slice(g)
        dX_g, dW_g, db_g = _shard_backward(cfg, clf.weights[sl], X_emb,
                                           dlogits, cache, cols)
        dW[sl] = dW_g
        db[sl] = db_g
        return dX_g

    dx_parts = pool.run(backward, range(len(shards)))
    dX = np.zeros_like(X_emb)
    for part in dx_parts:  # fixed shard order
        dX = dX + part
    return losses, dX, dW, db


def _rows_view(cache, rows):
    """Row-sliced view of a score cache (for target scoring of owned rows)."""
    from .losses import ScoreCache

    sub = ScoreCache(cache.dots[rows], cache.w_norm, cache.x_norm[rows],
                     None if cache.cos is None else cache.cos[rows],
                     cache.raw_g[rows])
    sub.logits = cache.logits[rows]
    return sub


def _shard_backward(cfg, weights, X, dlogits, cache, cols):
    if cols is None:
        return scores_backward(cfg, weights, X, dlogits, cache, None)
    owned, local_cols = cols
    # scores_backward patches one target per row; rows without a target in
    # this shard keep their g-coefficients, so patch just the owned rows.
    from .losses import _f_coefficients, _g_coefficients

    hu, bw, dxc = _g_coefficients(cfg, cache)
    sub = _rows_view(cache, owned)
    fhu, fbw, fdx = _f_coefficients(cfg, sub, local_cols)
    hu[owned, local_cols] = fhu
    bw[owned, local_cols] = fbw
    dxc[owned, local_cols] = fdx
    st = cfg.scale_s * dlogits
    a = st * hu
    X2d = np.atleast_2d(X)
    dW = a.T @ X2d + weights * np.sum(st * bw, axis=0)[:, None]
    dX = a @ weights + X2d * np.sum(st * dxc, axis=1)[:, None]
    db = np.sum(st, axis=0)
    return dX, dW, db


def train(config: TrainConfig, data: BasketSet) -> TrainResult:
    """Run the configured mode over the basket set.

    Returns the trained backbone, the classifier over all network ids, and
    one log row per epoch (learning rate, ignored ratio, mean loss, wall
    time).  Aborts with a diagnostic if the loss goes non-finite.
    """
    space = data.label_space()
    if len(config.sched.taus) != space.num_baskets:
        raise ValueError("schedule needs one tau per basket")
    feats, owners, tcols = _flatten(data, space)
    n_samples = len(feats)
    if config.batch_size > n_samples:
        raise ValueError("batch_size exceeds the number of samples")
    rng = np.random.default_rng(config.seed)
    params = init_model(feats.shape[1], config.hidden_dims, config.embed_dim,
                        config.normalized, rng)
    clf = Classifier(rng.standard_normal((space.total, config.embed_dim))
                     / np.sqrt(config.embed_dim))
    layout = shard_layout(space.total, config.shards)
    segment_map = {
        m: _segments_by_shard(layout, space, m)
        for m in range(1, space.num_baskets + 1)
    }
    velocities = [np.zeros_like(a) for a in params.arrays()]
    v_w = np.zeros_like(clf.weights)
    v_b = np.zeros_like(clf.biases)
    log: list[EpochStats] = []
    pool = ShardWorkerPool(config.shards if config.mode is TrainMode.PARALLEL_BBS
                           else 1)
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            lr = lr_at(config.optimizer, epoch)
            ratio = schedule_ratio(config.sched, epoch)
            counts = [ignored_count(n, tau, ratio)
                      for n, tau in zip(space.basket_sizes, config.sched.taus)]
            order = rng.permutation(n_samples)
            loss_sum = 0.0
            for start in range(0, n_samples, config.batch_size):
                batch = order[start:start + config.batch_size]
                X_emb, cache = _forward_batch(params, feats[batch])
                if config.mode is TrainMode.PARALLEL_BBS:
                    losses, dX, dW, db = _parallel_batch(
                        config.loss, space, clf, X_emb, owners[batch],
                        tcols[batch], layout, config.sched.taus, ratio, pool,
                        segment_map,
                    )
                else:
                    losses, dX, dW, db = _serial_batch(
                        config.loss, space, clf, X_emb, owners[batch],
                        tcols[batch], config.mode, counts,
                    )
                if not np.all(np.isfinite(losses)):
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch}, "
                        f"step {start // config.batch_size + 1}"
                    )
                loss_sum += float(losses.sum())
                bgrads = _backward_batch(params, cache, dX)
                opt = config.optimizer
                new_layers = []
                for i, ((w, b), (gw, gb)) in enumerate(zip(params.layers,
                                                           bgrads)):
                    w, velocities[2 * i] = sgd_step(
                        w, gw, velocities[2 * i], lr, opt.momentum,
                        opt.weight_decay)
                    b, velocities[2 * i + 1] = sgd_step(
                        b, gb, velocities[2 * i + 1], lr, opt.momentum,
                        opt.weight_decay)
                    new_layers.append((w, b))
                params.layers = new_layers
                clf.weights, v_w = sgd_step(clf.weights, dW, v_w, lr,
                                            opt.momentum, opt.weight_decay)
                if config.loss.use_bias:
                    clf.biases, v_b = sgd_step(clf.biases, db, v_b, lr,
                                               opt.momentum, opt.weight_decay)
            wall = (time.perf_counter() - t0) * 1000.0
            log.append(EpochStats(epoch, lr, ratio, loss_sum / n_samples,
                                  wall))
    finally:
        pool.close()
    return TrainResult(params, clf, log)


@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    num_params: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def grad_check(config: TrainConfig, data: BasketSet,
               tolerance: float = 1e-5) -> GradCheckReport:
    """Central finite differences vs the analytic gradient of one sample.

    Covers the full chain (backbone plus classifier) with the negative mask
    held fixed at its pre-check value, since mask selection is discrete.
    """
    space = data.label_space()
    feats, owners, tcols = _flatten(data, space)
    rng = np.random.default_rng(config.seed)
    params = init_model(feats.shape[1], config.hidden_dims, config.embed_dim,
                        config.normalized, rng)
    clf = Classifier(rng.standard_normal((space.total, config.embed_dim))
                     / np.sqrt(config.embed_dim))
    x = feats[:1]
    owner_arr, tcol_arr = owners[:1], tcols[:1]
    ratio = schedule_ratio(config.sched, 1)
    counts = [ignored_count(n, tau, ratio)
              for n, tau in zip(space.basket_sizes, config.sched.taus)]

    mode = (TrainMode.BBS if config.mode is TrainMode.PARALLEL_BBS
            else config.mode)
    X_emb, _ = _forward_batch(params, x)
    cache0 = class_scores(config.loss, clf.weights, clf.biases, X_emb)
    if mode is TrainMode.BASELINE1:
        include = np.ones_like(cache0.logits, dtype=bool)
        include[0, tcol_arr[0]] = False
    elif mode is TrainMode.BASELINE2:
        include = np.zeros_like(cache0.logits, dtype=bool)
        include[0, space.basket_slice(owner_arr[0])] = True
        include[0, tcol_arr[0]] = False
    else:
        include = _mine_include(config.loss, space, cache0, owner_arr,
                                tcol_arr, counts)

    def loss_of(layers, W, b) -> float:
        p = ModelParams([(w.copy(), bb.copy()) for w, bb in layers],
                        config.normalized)
        emb, _ = _forward_batch(p, x)
        cache = class_scores(config.loss, W, b, emb)
        z_f = target_scores(config.loss, cache, b, tcol_arr)
        masked = np.where(include, cache.logits, -np.inf)
        m = np.maximum(z_f, masked.max(axis=1))
        denom = np.exp(z_f - m) + np.exp(masked - m[:, None]).sum(axis=1)
        return float((-z_f + m + np.log(denom))[0])

    # analytic
    emb, bcache = _forward_batch(params, x)
    cache = class_scores(config.loss, clf.weights, clf.biases, emb)
    z_f = target_scores(config.loss, cache, clf.biases, tcol_arr)
    masked = np.where(include, cache.logits, -np.inf)
    m = np.maximum(z_f, masked.max(axis=1))
    p = np.exp(masked - m[:, None])
    denom = np.exp(z_f - m) + p.sum(axis=1)
    dlogits = p / denom[:, None]
    dlogits[0, tcol_arr[0]] = float((np.exp(z_f - m) / denom)[0]) - 1.0
    dX, dW, db = scores_backward(config.loss, clf.weights, emb, dlogits,
                                 cache, tcol_arr)
    bgrads = _backward_batch(params, bcache, dX)

    analytic = []
    for gw, gb in bgrads:
        analytic.extend((gw, gb))
    analytic.extend((dW, db))

    h = 1e-5
    worst = 0.0
    total = 0
    arrays = params.arrays() + [clf.weights, clf.biases]
    for target, grad in zip(arrays, analytic):
        numeric = np.zeros_like(target)
        it = np.nditer(target, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = target[idx]
            target[idx] = orig + h
            up = loss_of(params.layers, clf.weights, clf.biases)
            target[idx] = orig - h
            down = loss_of(params.layers, clf.weights, clf.biases)
            target[idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        scale = max(np.abs(grad).max(), np.abs(numeric).max(), 1e-6)
        worst = max(worst, float(np.abs(grad - numeric).max() / scale))
        total += target.size
    return GradCheckReport(worst, tolerance, total)


def save_model(path, params: ModelParams, clf: Classifier) -> None:
    """Serialize backbone and classifier (float32 storage, little-endian)."""
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<3I", MODEL_VERSION,
                             int(params.normalize_embedding),
                             len(params.layers)))
        for w, b in params.layers:
            fh.write(struct.pack("<2I", w.shape[0], w.shape[1]))
            fh.write(w.astype("<f4").tobytes())
            fh.write(b.astype("<f4").tobytes())
        fh.write(struct.pack("<2I", clf.num_classes, clf.dim))
        fh.write(clf.weights.astype("<f4").tobytes())
        fh.write(clf.biases.astype("<f4").tobytes())


def load_model(path) -> tuple[ModelParams, Classifier]:
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise ValueError(f"not a model file: bad magic {data[:4]!r}")
    version, normalize, n_layers = struct.unpack_from("<3I", data, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model file version {version}")
    off = 16
    layers = []
    for _ in range(n_layers):
        out_d, in_d = struct.unpack_from("<2I", data, off)
        off += 8
        w = np.frombuffer(data, dtype="<f4", count=out_d * in_d, offset=off)
        off += 4 * out_d * in_d
        b = np.frombuffer(data, dtype="<f4", count=out_d, offset=off)
        off += 4 * out_d
        layers.append((w.reshape(out_d, in_d).astype(np.float64),
                       b.astype(np.float64)))
    n, d = struct.unpack_from("<2I", data, off)
    off += 8
    w = np.frombuffer(data, dtype="<f4", count=n * d, offset=off)
    off += 4 * n * d
    b = np.frombuffer(data, dtype="<f4", count=n, offset=off)
    off += 4 * n
    if off != len(data):
        raise ValueError("trailing data after model parameters")
    return (ModelParams(layers, bool(normalize)),
            Classifier(w.reshape(n, d).astype(np.float64),
                       b.astype(np.float64)))
