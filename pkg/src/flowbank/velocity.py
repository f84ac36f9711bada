"""Closed-form optimal empirical flow-matching velocity over a transition bank.

For the Gaussian bridge path ``Z_t = (1-t) x1 + t x2 + c_t xi`` with
``c_t^2 = sigma_min^2 + sigma^2 t (1-t)`` the minimiser of the empirical
conditional flow-matching loss is

    v(t, z) = g(t) z + sum_j alpha_j(t, z) y_j(t),

    g(t)     = sigma^2 (1 - 2t) / (2 c_t^2)
    m_j(t)   = (1-t) x1_j + t x2_j
    y_j(t)   = (x2_j - x1_j) - g(t) m_j(t)
    alpha(t, z) = softmax_j( -|z - m_j(t)|^2 / (2 c_t^2) )

i.e. a Nadaraya-Watson average of per-transition velocity labels with a
Gaussian kernel in the bridge means.  The empirical rectified-flow field
(``x2`` endpoints as targets, standard normal source) is provided for
comparison.

Every batched routine accepts ``z`` of shape ``(B, d)``; the public
single-point helpers accept ``(d,)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from numba import njit

from .bank import TransitionBank
from .errors import (NonFiniteInput, RangeError, TimeDomainError, UnsupportedFamily)

# |g| below this is treated as zero (ETD1 limit, linear-term skipping).
G_ZERO = 1e-12

# Rows per block when forming (B, M, d) temporaries.
_BLOCK_ELEMS = 4_000_000


@dataclass(frozen=True)
class GaussianBridge:
    """Bridge schedule ``c_t^2 = sigma_min^2 + sigma^2 t (1 - t)``."""

    sigma_min: float
    sigma: float = 0.0

    def __post_init__(self):
        if not (self.sigma_min > 0 and np.isfinite(self.sigma_min)):
            raise ValueError(f"sigma_min must be > 0, got {self.sigma_min}")
        if not (self.sigma >= 0 and np.isfinite(self.sigma)):
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")

    def c2(self, t):
        return self.sigma_min ** 2 + self.sigma ** 2 * t * (1 - t)

    def c(self, t):
        return np.sqrt(self.c2(t))

    def g(self, t):
        return self.sigma ** 2 * (1 - 2 * t) / (2 * self.c2(t))

    def phi(self, t, s):
        """Scalar fundamental solution of ``z' = g(t) z``: ``c_t / c_s``."""
        return np.sqrt(self.c2(t) / self.c2(s))


@dataclass(frozen=True)
class RectifiedFlow:
    """Empirical rectified flow from N(0, I) onto the bank's ``x2`` states.

    With ``sigma_min_rf = 0`` the path is ``Z_t = t x + (1 - t) xi``; a
    positive value keeps residual noise ``sigma_min_rf`` at ``t = 1``.
    """

    sigma_min_rf: float = 0.0

    def __post_init__(self):
        if not (0 <= self.sigma_min_rf < 1):
            raise ValueError("sigma_min_rf must lie in [0, 1)")

    def a(self, t):
        return 1 - (1 - self.sigma_min_rf) * t


PathFamily = Union[GaussianBridge, RectifiedFlow]


@dataclass
class VelocityEval:
    """Velocity at one ``(t, z)``.

    ``weights`` are over the full bank (dense) or over ``index`` (top-R);
    ``kept_mass`` is the retained softmax mass before renormalisation.
    """

    v: np.ndarray
    weights: Optional[np.ndarray] = None
    kept_mass: float = 1.0
    jacobian: Optional[np.ndarray] = None
    index: Optional[np.ndarray] = None


def _check_t(t, family):
    t = float(t)
    if isinstance(family, RectifiedFlow):
        if not (0.0 <= t < 1.0):
            raise TimeDomainError(f"rectified flow is defined for t in [0, 1), got {t}")
    elif not (0.0 <= t <= 1.0):
        raise TimeDomainError(f"t must lie in [0, 1], got {t}")
    return t


def _as_batch(z, d):
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    if z2.ndim != 2 or z2.shape[1] != d:
        raise ValueError(f"z must have trailing dimension {d}, got shape {z.shape}")
    if not np.all(np.isfinite(z2)):
        raise NonFiniteInput("z contains non-finite values")
    return z2, single


def _require_bridge(family):
    if not isinstance(family, GaussianBridge):
        raise UnsupportedFamily(f"{type(family).__name__} has no Jacobian/score support")


def bridge_mean(j: int, t: float, bank: TransitionBank) -> np.ndarray:
    """``(1 - t) x1_j + t x2_j``; ``j`` is a 0-based transition index."""
    if not (0 <= j < bank.M):
        raise IndexError(f"transition index {j} out of range for M={bank.M}")
    if not 0.0 <= t <= 1.0:
        raise TimeDomainError(f"t must lie in [0, 1], got {t}")
    return (1 - t) * bank.x1[j] + t * bank.x2[j]


def bridge_means(t: float, bank: TransitionBank) -> np.ndarray:
    return (1 - t) * bank.x1 + t * bank.x2


def velocity_labels(t: float, bank: TransitionBank, schedule: GaussianBridge) -> np.ndarray:
    """``y_j(t) = (x2_j - x1_j) - g(t) m_j(t)`` for all ``j``; shape (M, d)."""
    return bank.increments - schedule.g(t) * bridge_means(t, bank)


def _terms(t, bank, family):
    """Affine mixture ingredients: ``v = a z + sum_j w_j b_j``.

    Returns ``(a, centers, b, bw2)`` where the kernel is
    ``exp(-|z - centers_j|^2 / (2 bw2))``.
    """
    if isinstance(family, GaussianBridge):
        g = family.g(t)
        m = bridge_means(t, bank)
        return g, m, bank.increments - g * m, family.c2(t)
    a_t = family.a(t)
    return (-(1 - family.sigma_min_rf) / a_t, t * bank.x2, bank.x2 / a_t, a_t ** 2)


def _sqdist(z, centers):
    """Row-independent squared distances, shape (B, M).

    Elementwise differences instead of the ``|z|^2 - 2 z.m + |m|^2`` matmul
    trick: exact at large ``|z|`` and bit-identical regardless of batch size.
    """
    B, d = z.shape
    M = centers.shape[0]
    out = np.empty((B, M))
    step = max(1, _BLOCK_ELEMS // max(1, M * d))
    for lo in range(0, B, step):
        diff = z[lo:lo + step, None, :] - centers[None, :, :]
        np.einsum("bmd,bmd->bm", diff, diff, out=out[lo:lo + step])
    return out


def _log_weights(d2, bw2):
    """Shifted log-weights ``-(d2 - min d2) / (2 bw2)`` per row (max is 0)."""
    return -(d2 - d2.min(axis=1, keepdims=True)) / (2.0 * bw2)


def _softmax_rows(s):
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# numpy error model: an overflowed row yields NaN (reported as a blowup) instead of raising
@njit(cache=True, error_model="numpy")
def _mixture_kernel(z, centers, b, bw2, R, out_h, out_kept, out_idx, out_w):
    """Per-row Gaussian-kernel mixture ``sum_j w_j b_j`` over the ``R`` nearest centres.

    One sequential pass per row, so every row's result is independent of
    the batch it sits in.  ``R == M`` is the dense mixture.  Ties at the
    selection boundary go to the lowest index; selected indices are
    visited in ascending order.
    """
    B, d = z.shape
    M = centers.shape[0]
    d2 = np.empty(M)
    acc = np.empty(d)
    inv = 1.0 / (2.0 * bw2)
    for i in range(B):
        dmin = np.inf
        for j in range(M):
            s = 0.0
            for k in range(d):
                diff = z[i, k] - centers[j, k]
                s += diff * diff
            d2[j] = s
            if s < dmin:
                dmin = s
        if R < M:
            kth = np.partition(d2, R - 1)[R - 1]
            n_lt = 0
            for j in range(M):
                if d2[j] < kth:
                    n_lt += 1
            need = R - n_lt
        else:
            kth = np.inf
            need = 0
        for k in range(d):
            acc[k] = 0.0
        tot = 0.0
        tot_all = 0.0
        n = 0
        for j in range(M):
            x = (d2[j] - dmin) * inv
            # exp(-x) is exactly 0.0 beyond ~745.2; skipping is bit-identical
            e = np.exp(-x) if x < 750.0 else 0.0
            tot_all += e
            take = R == M or d2[j] < kth
            if not take and d2[j] == kth and need > 0:
                take = True
                need -= 1
            if take:
                tot += e
                for k in range(d):
                    acc[k] += e * b[j, k]
                if out_idx.shape[1] > 0:
                    out_idx[i, n] = j
                if out_w.shape[1] > 0:
                    out_w[i, n] = e
                n += 1
        for k in range(d):
            out_h[i, k] = acc[k] / tot
        out_kept[i] = 1.0 if R == M else tot / tot_all
        if out_w.shape[1] > 0:
            for q in range(n):
                out_w[i, q] /= tot


@dataclass
class FieldBatch:
    """Batched velocity evaluation; internal currency of the sampler."""

    v: np.ndarray
    h: np.ndarray
    a: float
    weights: Optional[np.ndarray] = None
    kept_mass: Optional[np.ndarray] = None
    index: Optional[np.ndarray] = None


def field_batch(t, z, bank, family, top_r=None, keep_weights=False) -> FieldBatch:
    """Velocity for a batch ``z`` of shape (B, d) at a common time ``t``.

    With ``top_r`` set only the ``top_r`` nearest centres contribute, with
    renormalised weights; distances are still computed to all ``M``.
    """
    a, centers, b, bw2 = _terms(t, bank, family)
    M = bank.M
    R = M if top_r is None else int(top_r)
    if not (1 <= R <= M):
        raise RangeError(f"top_r must lie in [1, {M}], got {top_r}")
    z = np.ascontiguousarray(z, dtype=float)
    B = z.shape[0]
    h = np.empty((B, bank.d))
    kept = np.empty(B)
    idx = np.empty((B, R if top_r is not None else 0), dtype=np.int64)
    w = np.empty((B, R if keep_weights else 0))
    _mixture_kernel(z, np.ascontiguousarray(centers), np.ascontiguousarray(b),
                    float(bw2), R, h, kept, idx, w)
    v = h if a == 0 else a * z + h
    return FieldBatch(v, h, a, w if keep_weights else None, kept,
                      idx if top_r is not None else None)


def responsibilities(t, z, bank: TransitionBank, schedule: GaussianBridge) -> np.ndarray:
    """Posterior weights ``alpha_j(t, z)`` over all transitions.

    Computed with max-subtraction, so squared distances up to ~1e300 neither
    overflow nor produce an all-zero row.
    """
    t = _check_t(t, schedule)
    zb, single = _as_batch(z, bank.d)
    _, centers, _, bw2 = _terms(t, bank, schedule)
    w = _softmax_rows(_log_weights(_sqdist(zb, centers), bw2))
    return w[0] if single else w


def velocity_dense(t, z, bank: TransitionBank, family: PathFamily,
                   jacobian: bool = False) -> VelocityEval:
    """Closed-form velocity using every transition in the bank."""
    t = _check_t(t, family)
    zb, _ = _as_batch(z, bank.d)
    if zb.shape[0] != 1:
        raise ValueError("velocity_dense evaluates a single point; use field_batch")
    fb = field_batch(t, zb, bank, family, keep_weights=True)
    jac = velocity_jacobian(t, zb[0], bank, family) if jacobian else None
    return VelocityEval(fb.v[0], fb.weights[0], 1.0, jac)


def velocity_topR(t, z, bank: TransitionBank, family: PathFamily, R: int) -> VelocityEval:
    """Velocity from the ``R`` largest-weight transitions, renormalised."""
    if not (1 <= int(R) <= bank.M):
        raise RangeError(f"R must lie in [1, {bank.M}], got {R}")
    t = _check_t(t, family)
    zb, _ = _as_batch(z, bank.d)
    if zb.shape[0] != 1:
        raise ValueError("velocity_topR evaluates a single point; use field_batch")
    fb = field_batch(t, zb, bank, family, top_r=int(R), keep_weights=True)
    return VelocityEval(fb.v[0], fb.weights[0], float(fb.kept_mass[0]), None,
                        np.asarray(fb.index[0]))


def velocity_jacobian(t, z, bank: TransitionBank, schedule: GaussianBridge) -> np.ndarray:
    """Analytic ``d v / d z`` for the Gaussian bridge field.

    Uses ``grad alpha_j = alpha_j (m_j - m_bar) / c_t^2``, so
    ``J = g I + (1 / c_t^2) sum_j alpha_j y_j (m_j - m_bar)^T``.
    """
    _require_bridge(schedule)
    t = _check_t(t, schedule)
    zb, single = _as_batch(z, bank.d)
    if not single:
        raise ValueError("velocity_jacobian expects a single point of shape (d,)")
    g, m, y, c2 = _terms(t, bank, schedule)
    alpha = _softmax_rows(_log_weights(_sqdist(zb, m), c2))[0]
    m_bar = alpha @ m
    jac = ((alpha[:, None] * y).T @ (m - m_bar)) / c2
    return jac + g * np.eye(bank.d)


def score(t, z, bank: TransitionBank, schedule: GaussianBridge) -> np.ndarray:
    """Gradient of the log of the Gaussian-mixture density at time ``t``."""
    _require_bridge(schedule)
    t = _check_t(t, schedule)
    zb, single = _as_batch(z, bank.d)
    _, m, _, c2 = _terms(t, bank, schedule)
    alpha = _softmax_rows(_log_weights(_sqdist(zb, m), c2))
    out = (alpha @ m - zb) / c2
    return out[0] if single else out


def forcing(t, z, bank: TransitionBank, schedule: GaussianBridge) -> np.ndarray:
    """Nonlinear part ``h(t, z) = sum_j alpha_j y_j`` of the bridge field."""
    _require_bridge(schedule)
    t = _check_t(t, schedule)
    zb, single = _as_batch(z, bank.d)
    h = field_batch(t, zb, bank, schedule).h
    return h[0] if single else h


__all__ = [
    "GaussianBridge", "RectifiedFlow", "PathFamily", "VelocityEval", "FieldBatch",
    "bridge_mean", "bridge_means", "velocity_labels", "responsibilities",
    "velocity_dense", "velocity_topR", "velocity_jacobian", "score", "forcing",
    "field_batch", "G_ZERO",
]
