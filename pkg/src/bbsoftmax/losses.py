"""Softmax-family classification losses with analytic gradients.

Seven losses share one cross-entropy formulation: the target class is scored
by ``f(W, x)``, every other class by a similarity ``g(W, x)``, both shifted by
an optional per-class bias and multiplied by a scale ``s`` before the softmax.

    method      f(W, x)                  g(W, x)              bias   s
    ----------  -----------------------  -------------------  -----  ---
    softmax     W.x                      W.x                  yes    no
    lsoftmax    |W||x| psi(theta)        |W||x| cos(theta)    no     no
    l2softmax   |W| cos(theta)           |W| cos(theta)       yes    yes
    normface    cos(theta)               cos(theta)           no     yes
    sphereface  |x| psi(theta)           |x| cos(theta)       no     no
    cosface     cos(theta) - m           cos(theta)           no     yes
    arcface     cos(theta + m)           cos(theta)           no     yes

``theta`` is the angle between the class center ``W`` and the embedding ``x``.
``psi`` is the piecewise angular-margin function

    psi(theta) = (-1)^k cos(m*theta) - 2k,   theta in [k*pi/m, (k+1)*pi/m],

with integer ``m >= 1`` and ``k in {0, ..., m-1}``; ties at segment boundaries
resolve to the lower ``k``.

All arithmetic is float64.  Norms are guarded as ``sqrt(|v|^2 + 1e-12)`` to
avoid division by zero, so callers should keep vector norms >= 1e-3 where
cosines are meant to be meaningful.  Every function here is pure and safe to
call from multiple threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

NORM_EPS = 1e-12


class Method(str, Enum):
    SOFTMAX = "softmax"
    LSOFTMAX = "lsoftmax"
    L2SOFTMAX = "l2softmax"
    NORMFACE = "normface"
    SPHEREFACE = "sphereface"
    COSFACE = "cosface"
    ARCFACE = "arcface"


# Methods whose scores depend on the angle theta (i.e. need nonzero norms).
ANGULAR_METHODS = frozenset(Method) - {Method.SOFTMAX}
# Methods that rescale logits by s; the rest must keep s == 1.
SCALED_METHODS = frozenset(
    {Method.L2SOFTMAX, Method.NORMFACE, Method.COSFACE, Method.ARCFACE}
)
# Methods that may carry a bias term.
BIAS_METHODS = frozenset({Method.SOFTMAX, Method.L2SOFTMAX})
# Methods using the piecewise psi margin (integer m in {1,2,3,4}).
PSI_METHODS = frozenset({Method.LSOFTMAX, Method.SPHEREFACE})
# Methods with an additive margin (cosface: cosine units, arcface: radians).
ADDITIVE_MARGIN_METHODS = frozenset({Method.COSFACE, Method.ARCFACE})


@dataclass(frozen=True)
class LossConfig:
    """Which loss variant to use plus its scalar hyperparameters.

    ``margin_m`` is method-dependent: an integer in {1,2,3,4} for
    lsoftmax/sphereface, an additive cosine offset for cosface, additive
    radians for arcface, and ignored otherwise.  ``scale_s`` must be 1 for
    methods that do not rescale logits.
    """

    method: Method
    scale_s: float = 1.0
    margin_m: float = 0.0
    use_bias: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", Method(self.method))
        if self.method in SCALED_METHODS:
            if not self.scale_s > 0:
                raise ValueError(
                    f"{self.method.value} requires scale_s > 0, got {self.scale_s}"
                )
        elif self.scale_s != 1.0:
            raise ValueError(
                f"{self.method.value} does not use a scale; scale_s must be 1, "
                f"got {self.scale_s}"
            )
        if self.use_bias and self.method not in BIAS_METHODS:
            raise ValueError(f"{self.method.value} does not use a bias term")
        if self.method in PSI_METHODS:
            if self.margin_m != int(self.margin_m) or not 1 <= self.margin_m <= 4:
                raise ValueError(
                    f"{self.method.value} needs an integer margin in 1..4, "
                    f"got {self.margin_m}"
                )
        elif self.method in ADDITIVE_MARGIN_METHODS and self.margin_m < 0:
            raise ValueError(f"margin_m must be >= 0, got {self.margin_m}")


@dataclass
class Classifier:
    """Class centers and biases of the last fully connected layer.

    ``weights[j]`` is the d-dimensional center of network id ``j + 1``
    (network ids are 1-based everywhere in the public API).  ``biases`` stays
    all-zero when the loss does not use a bias term.
    """

    weights: np.ndarray
    biases: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("classifier weights must be a 2-d array")
        if self.biases is None:
            self.biases = np.zeros(self.weights.shape[0])
        self.biases = np.ascontiguousarray(self.biases, dtype=np.float64)
        if self.biases.shape != (self.weights.shape[0],):
            raise ValueError("biases length must match the number of classes")
        if not np.all(np.isfinite(self.weights)) or not np.all(
            np.isfinite(self.biases)
        ):
            raise ValueError("classifier parameters contain NaN or Inf")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def random(cls, num_classes: int, dim: int, rng: np.random.Generator,
               scale: float = 1.0) -> "Classifier":
        return cls(scale * rng.standard_normal((num_classes, dim)))


def _check_nonzero(name: str, v: np.ndarray) -> None:
    if not float(np.dot(v, v)) > 0.0:
        raise ValueError(f"zero-norm {name} is invalid for an angular method")


def _guarded_norm_sq(v: np.ndarray, axis=None) -> np.ndarray:
    return np.sum(v * v, axis=axis) + NORM_EPS


def _psi_pieces(cos_t: np.ndarray, m: int):
    """psi value plus its derivative w.r.t. cos(theta).

    The segment index k comes from theta = arccos(clipped cosine); boundary
    ties go to the lower k, which matches the continuous extension of psi.
    """
    c = np.clip(cos_t, -1.0, 1.0)
    theta = np.arccos(c)
    t = theta * m / math.pi
    k = np.clip(np.ceil(t) - 1.0, 0.0, m - 1)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    psi = sign * np.cos(m * theta) - 2.0 * k
    sin_t = np.sqrt(np.maximum(1.0 - c * c, 0.0))
    # d psi / d cos: singular at the poles; callers exclude those points.
    dpsi = sign * m * np.sin(m * theta) / np.maximum(sin_t, 1e-30)
    return psi, dpsi


@dataclass
class ScoreCache:
    """Per-call forward state reused by the backward pass.

    Shapes: ``dots``/``cos``/``raw_g`` are (batch, classes); ``w_norm`` is
    (classes,); ``x_norm`` is (batch,).  ``cos`` is None for plain softmax.
    """

    dots: np.ndarray
    w_norm: np.ndarray
    x_norm: np.ndarray
    cos: np.ndarray | None
    raw_g: np.ndarray
    logits: np.ndarray = field(default=None)  # type: ignore[assignment]


def class_scores(cfg: LossConfig, weights: np.ndarray, biases: np.ndarray,
                 x: np.ndarray) -> ScoreCache:
    """Similarity logits ``s*(g(W_j, x_i) + b_j)`` for a batch of embeddings.

    ``x`` may be a single vector or a (batch, dim) matrix.  Returns the cache
    holding both raw similarities (used for negative-class mining) and the
    scaled logits.
    """
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    dots = X @ weights.T
    w_norm = np.sqrt(_guarded_norm_sq(weights, axis=1))
    x_norm = np.sqrt(_guarded_norm_sq(X, axis=1))
    method = cfg.method
    if method is Method.SOFTMAX:
        cos = None
        raw_g = dots
    else:
        cos = dots / (x_norm[:, None] * w_norm[None, :])
        if method is Method.LSOFTMAX:
            raw_g = dots
        elif method is Method.L2SOFTMAX:
            raw_g = dots / x_norm[:, None]
        elif method is Method.SPHEREFACE:
            raw_g = dots / w_norm[None, :]
        else:  # normface, cosface, arcface
            raw_g = cos
    cache = ScoreCache(dots, w_norm, x_norm, cos, raw_g)
    cache.logits = cfg.scale_s * (raw_g + biases[None, :])
    return cache


def target_scores(cfg: LossConfig, cache: ScoreCache, biases: np.ndarray,
                  cols: np.ndarray) -> np.ndarray:
    """Target logits ``s*(f(W_y, x_i) + b_y)``, one per batch row."""
    rows = np.arange(len(cache.x_norm))
    cols = np.asarray(cols)
    method = cfg.method
    if method in (Method.SOFTMAX, Method.L2SOFTMAX, Method.NORMFACE):
        f = cache.raw_g[rows, cols]
    elif method is Method.COSFACE:
        f = cache.cos[rows, cols] - cfg.margin_m
    elif method is Method.ARCFACE:
        c = np.clip(cache.cos[rows, cols], -1.0, 1.0)
        sin_t = np.sqrt(np.maximum(1.0 - c * c, 0.0))
        f = c * math.cos(cfg.margin_m) - sin_t * math.sin(cfg.margin_m)
    else:  # psi-margin methods
        psi, _ = _psi_pieces(cache.cos[rows, cols], int(cfg.margin_m))
        if method is Method.LSOFTMAX:
            f = cache.w_norm[cols] * cache.x_norm[rows] * psi
        else:  # sphereface
            f = cache.x_norm[rows] * psi
    return cfg.scale_s * (f + biases[cols])


def _g_coefficients(cfg: LossConfig, cache: ScoreCache):
    """Partial derivatives of g as (hu, bw, dx) coefficient arrays.

    For every score h we have dh/dW_j = hu*x_i + bw*W_j and
    dh/dx_i = hu*W_j + dx*x_i; all three arrays broadcast to
    (batch, classes).
    """
    method = cfg.method
    w_norm = cache.w_norm[None, :]
    x_norm = cache.x_norm[:, None]
    if method in (Method.SOFTMAX, Method.LSOFTMAX):
        # bw and dx must be distinct arrays: the target entry of each gets
        # patched independently in scores_backward.
        return (
            np.ones_like(cache.dots),
            np.zeros_like(cache.dots),
            np.zeros_like(cache.dots),
        )
    if method is Method.L2SOFTMAX:
        hu = np.broadcast_to(1.0 / x_norm, cache.dots.shape).copy()
        bw = np.zeros_like(cache.dots)
        dx = -cache.dots / x_norm**3
        return hu, bw, dx
    if method is Method.SPHEREFACE:
        hu = np.broadcast_to(1.0 / w_norm, cache.dots.shape).copy()
        bw = -cache.dots / w_norm**3
        dx = np.zeros_like(cache.dots)
        return hu, bw, dx
    # cosine similarity: normface, cosface, arcface
    hu = 1.0 / (w_norm * x_norm) * np.ones_like(cache.dots)
    bw = -cache.cos / w_norm**2
    dx = -cache.cos / x_norm**2
    return hu, bw, dx


def _f_coefficients(cfg: LossConfig, cache: ScoreCache, cols: np.ndarray):
    """Same (hu, bw, dx) triple but for the target score f, per batch row."""
    rows = np.arange(len(cache.x_norm))
    method = cfg.method
    if method is Method.SOFTMAX:
        one = np.ones(len(rows))
        zero = np.zeros(len(rows))
        return one, zero, zero
    nw = cache.w_norm[cols]
    nx = cache.x_norm[rows]
    u = cache.dots[rows, cols]
    c = cache.cos[rows, cols]
    if method is Method.L2SOFTMAX:
        return 1.0 / nx, np.zeros(len(rows)), -u / nx**3
    if method is Method.NORMFACE:
        return 1.0 / (nw * nx), -c / nw**2, -c / nx**2
    if method is Method.COSFACE:
        return 1.0 / (nw * nx), -c / nw**2, -c / nx**2
    if method is Method.ARCFACE:
        cc = np.clip(c, -1.0, 1.0)
        sin_t = np.sqrt(np.maximum(1.0 - cc * cc, 0.0))
        dphi = math.cos(cfg.margin_m) + math.sin(cfg.margin_m) * cc / np.maximum(
            sin_t, 1e-30
        )
        return dphi / (nw * nx), -dphi * c / nw**2, -dphi * c / nx**2
    psi, dpsi = _psi_pieces(c, int(cfg.margin_m))
    if method is Method.LSOFTMAX:
        # f = |W||x| psi(cos)
        return dpsi, (nx / nw) * (psi - c * dpsi), (nw / nx) * (psi - c * dpsi)
    # sphereface: f = |x| psi(cos)
    return dpsi / nw, -nx * dpsi * c / nw**2, (psi - c * dpsi) / nx


def scores_backward(cfg: LossConfig, weights: np.ndarray, X: np.ndarray,
                    dlogits: np.ndarray, cache: ScoreCache,
                    target_cols: np.ndarray | None = None):
    """Chain dL/dlogits back to (dL/dX, dL/dW, dL/db).

    ``dlogits`` has shape (batch, classes).  When ``target_cols`` is given,
    the entry (i, target_cols[i]) is differentiated through f instead of g.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    hu, bw, dxc = _g_coefficients(cfg, cache)
    if target_cols is not None:
        rows = np.arange(len(X))
        fhu, fbw, fdx = _f_coefficients(cfg, cache, target_cols)
        hu[rows, target_cols] = fhu
        bw[rows, target_cols] = fbw
        dxc[rows, target_cols] = fdx
    st = cfg.scale_s * dlogits
    a = st * hu
    dW = a.T @ X + weights * np.sum(st * bw, axis=0)[:, None]
    dX = a @ weights + X * np.sum(st * dxc, axis=1)[:, None]
    db = np.sum(st, axis=0)
    return dX, dW, db


def masked_softmax(target_logits: np.ndarray, logits: np.ndarray,
                   include: np.ndarray):
    """Stabilized cross-entropy over the target score plus included logits.

    Returns per-row ``(loss, dlogits, q_target)`` where ``dlogits`` holds the
    softmax probabilities of the included columns (zero elsewhere) and
    ``q_target`` the target's own probability.  Callers subtract 1 at the
    target position themselves when the target column lives in ``logits``.
    """
    masked = np.where(include, logits, -np.inf)
    row_max = masked.max(axis=1)
    m = np.maximum(target_logits, row_max)
    p = np.exp(masked - m[:, None])
    rest = p.sum(axis=1)
    exp_t = np.exp(target_logits - m)
    denom = exp_t + rest
    loss = -target_logits + m + np.log(denom)
    dlogits = p / denom[:, None]
    return loss, dlogits, exp_t / denom


def similarity_values(cfg: LossConfig, weights: np.ndarray,
                      x: np.ndarray) -> np.ndarray:
    """Raw similarities g(W_j, x) used to rank candidate negative classes.

    Biases and the scale s deliberately do not participate in the ranking.
    """
    zeros = np.zeros(weights.shape[0])
    return class_scores(cfg, weights, zeros, x).raw_g[0]


def _validate_angular_inputs(cfg: LossConfig, w: np.ndarray, x: np.ndarray) -> None:
    if cfg.method in ANGULAR_METHODS:
        _check_nonzero("class center", w)
        _check_nonzero("embedding", x)


def similarity_g(cfg: LossConfig, weight: np.ndarray, bias: float,
                 x: np.ndarray) -> float:
    """Similarity score g(W, x) + b for one class center and one embedding."""
    w = np.asarray(weight, dtype=np.float64)
    xv = np.asarray(x, dtype=np.float64)
    _validate_angular_inputs(cfg, w, xv)
    cache = class_scores(cfg, w[None, :], np.zeros(1), xv)
    return float(cache.raw_g[0, 0] + bias)


def target_f(cfg: LossConfig, weight: np.ndarray, bias: float,
             x: np.ndarray) -> float:
    """Target score f(W, x) + b for one class center and one embedding."""
    w = np.asarray(weight, dtype=np.float64)
    xv = np.asarray(x, dtype=np.float64)
    _validate_angular_inputs(cfg, w, xv)
    cache = class_scores(cfg, w[None, :], np.zeros(1), xv)
    f = target_scores(cfg, cache, np.zeros(1), np.array([0]))
    return float(f[0] / cfg.scale_s + bias)


def _check_target(clf: Classifier, y: int) -> None:
    if not 1 <= y <= clf.num_classes:
        raise ValueError(f"target id {y} outside 1..{clf.num_classes}")


def unified_loss(cfg: LossConfig, clf: Classifier, x: np.ndarray,
                 y: int) -> float:
    """Cross-entropy of the unified formulation over all classes.

    ``y`` is the 1-based target id.  The target contributes through f, every
    other class through g; the log-sum-exp is max-stabilized.
    """
    _check_target(clf, y)
    xv = np.asarray(x, dtype=np.float64)
    if cfg.method in ANGULAR_METHODS:
        _check_nonzero("embedding", xv)
    cache = class_scores(cfg, clf.weights, clf.biases, xv)
    col = y - 1
    z_f = target_scores(cfg, cache, clf.biases, np.array([col]))
    include = np.ones((1, clf.num_classes), dtype=bool)
    include[0, col] = False
    loss, _, _ = masked_softmax(z_f, cache.logits, include)
    return float(loss[0])


def unified_loss_grad(cfg: LossConfig, clf: Classifier, x: np.ndarray, y: int):
    """Gradients of :func:`unified_loss` w.r.t. x, the weights, and biases.

    Returns ``(d_x, d_weights, d_biases)`` with shapes matching the inputs.
    """
    _check_target(clf, y)
    xv = np.asarray(x, dtype=np.float64)
    if cfg.method in ANGULAR_METHODS:
        _check_nonzero("embedding", xv)
    cache = class_scores(cfg, clf.weights, clf.biases, xv)
    col = y - 1
    cols = np.array([col])
    z_f = target_scores(cfg, cache, clf.biases, cols)
    include = np.ones((1, clf.num_classes), dtype=bool)
    include[0, col] = False
    _, dlogits, q_t = masked_softmax(z_f, cache.logits, include)
    dlogits[0, col] = q_t[0] - 1.0
    dX, dW, db = scores_backward(cfg, clf.weights, xv, dlogits, cache, cols)
    return dX[0], dW, db
