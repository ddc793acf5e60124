"""Shared test utilities: finite differences and independent loss oracles.

The oracles here deliberately re-derive everything from scalar formulas
(mpmath at 50 significant digits, no log-sum-exp), so they share no code
path with the package internals they check.
"""

from __future__ import annotations

import math

import mpmath as mp
import numpy as np

from bbsoftmax.losses import Method

DPS = 50


def max_rel_err(analytic, numeric) -> float:
    """Max abs difference scaled by the larger array magnitude."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-6)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def central_diff(fn, arrays, h=1e-5):
    """Central finite differences of a scalar function of several arrays.

    ``fn`` is re-evaluated after each in-place single-entry perturbation;
    returns one gradient array per input array.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            up = fn()
            arr[idx] = orig - h
            down = fn()
            arr[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def _mp_norm(v) -> mp.mpf:
    return mp.sqrt(mp.fsum(mp.mpf(float(x)) ** 2 for x in v) + mp.mpf("1e-12"))


def _mp_cos(w, x) -> mp.mpf:
    dot = mp.fsum(mp.mpf(float(a)) * mp.mpf(float(b)) for a, b in zip(w, x))
    return dot / (_mp_norm(w) * _mp_norm(x))


def _mp_psi(c, m: int) -> mp.mpf:
    c = max(min(c, mp.mpf(1)), mp.mpf(-1))
    theta = mp.acos(c)
    t = theta * m / mp.pi
    k = min(max(int(mp.ceil(t)) - 1, 0), m - 1)
    return (-1) ** k * mp.cos(m * theta) - 2 * k


def mp_g(method, w, x) -> mp.mpf:
    dot = mp.fsum(mp.mpf(float(a)) * mp.mpf(float(b)) for a, b in zip(w, x))
    if method is Method.SOFTMAX or method is Method.LSOFTMAX:
        return dot
    c = _mp_cos(w, x)
    if method is Method.L2SOFTMAX:
        return _mp_norm(w) * c
    if method is Method.SPHEREFACE:
        return _mp_norm(x) * c
    return c  # normface, cosface, arcface


def mp_f(method, w, x, margin) -> mp.mpf:
    c = _mp_cos(w, x)
    if method is Method.SOFTMAX:
        return mp_g(method, w, x)
    if method is Method.L2SOFTMAX:
        return _mp_norm(w) * c
    if method is Method.NORMFACE:
        return c
    if method is Method.COSFACE:
        return c - mp.mpf(float(margin))
    if method is Method.ARCFACE:
        cc = max(min(c, mp.mpf(1)), mp.mpf(-1))
        sin_t = mp.sqrt(max(1 - cc * cc, mp.mpf(0)))
        m = mp.mpf(float(margin))
        return cc * mp.cos(m) - sin_t * mp.sin(m)
    if method is Method.LSOFTMAX:
        return _mp_norm(w) * _mp_norm(x) * _mp_psi(c, int(margin))
    if method is Method.SPHEREFACE:
        return _mp_norm(x) * _mp_psi(c, int(margin))
    raise AssertionError(method)


def mp_unified_loss(cfg, weights, biases, x, y: int) -> float:
    """Direct high-precision evaluation of the unified loss, no max trick."""
    with mp.workdps(DPS):
        s = mp.mpf(float(cfg.scale_s))
        num = mp.exp(s * (mp_f(cfg.method, weights[y - 1], x, cfg.margin_m)
                          + mp.mpf(float(biases[y - 1]))))
        den = num
        for j in range(len(weights)):
            if j == y - 1:
                continue
            den += mp.exp(s * (mp_g(cfg.method, weights[j], x)
                               + mp.mpf(float(biases[j]))))
        return float(-mp.log(num / den))


def mp_bbs_loss(cfg, space, weights, biases, x, owner, mask_bits) -> float:
    """Direct high-precision evaluation of the basket-based loss."""
    m, local = owner
    target = space.network_id(m, local)
    with mp.workdps(DPS):
        s = mp.mpf(float(cfg.scale_s))
        num = mp.exp(s * (mp_f(cfg.method, weights[target - 1], x,
                               cfg.margin_m)
                          + mp.mpf(float(biases[target - 1]))))
        den = num
        lo, hi = space.basket_range(m)
        for j in range(lo, hi + 1):
            if j == target:
                continue
            den += mp.exp(s * (mp_g(cfg.method, weights[j - 1], x)
                               + mp.mpf(float(biases[j - 1]))))
        for k in range(1, space.num_baskets + 1):
            if k == m:
                continue
            k_lo, k_hi = space.basket_range(k)
            for j in range(k_lo, k_hi + 1):
                if mask_bits[j - 1]:
                    den += mp.exp(s * (mp_g(cfg.method, weights[j - 1], x)
                                       + mp.mpf(float(biases[j - 1]))))
        return float(-mp.log(num / den))


METHOD_CONFIGS = [
    dict(method=Method.SOFTMAX, use_bias=True),
    dict(method=Method.LSOFTMAX, margin_m=3),
    dict(method=Method.L2SOFTMAX, scale_s=8.0, use_bias=True),
    dict(method=Method.NORMFACE, scale_s=10.0),
    dict(method=Method.SPHEREFACE, margin_m=4),
    dict(method=Method.COSFACE, scale_s=16.0, margin_m=0.1),
    dict(method=Method.ARCFACE, scale_s=16.0, margin_m=0.1),
]
