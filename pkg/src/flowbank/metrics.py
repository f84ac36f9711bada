"""Forecast evaluation metrics: sMAPE, VPT, CRPS, correlation dimension, KL."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.distance import pdist

from .errors import InsufficientScaling

VPT_EPSILON = 20.0


def smape(y, yhat) -> np.ndarray:
    """Per-step symmetric MAPE in percent, averaged over state dimensions.

    Coordinates where ``y == yhat == 0`` contribute 0.  Values lie in
    ``[0, 200]``.

    Parameters
    ----------
    y, yhat : array_like of shape (H, d) or (H,)

    Returns
    -------
    ndarray of shape (H,)
    """
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {yhat.shape}")
    if y.ndim == 1:
        y, yhat = y[:, None], yhat[:, None]
    num = np.abs(y - yhat)
    den = (np.abs(y) + np.abs(yhat)) / 2
    ratio = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return 100.0 * ratio.mean(axis=-1)


def vpt(y, yhat, epsilon: float = VPT_EPSILON, lyapunov_time_points: int = 100) -> float:
    """Valid prediction time in Lyapunov times.

    Number of leading steps whose per-step sMAPE stays below ``epsilon``,
    divided by ``lyapunov_time_points``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return vpt_from_smape(smape(y, yhat), epsilon, lyapunov_time_points)


def vpt_from_smape(per_step, epsilon: float = VPT_EPSILON, lyapunov_time_points: int = 100) -> float:
    per_step = np.asarray(per_step, dtype=float)
    over = np.flatnonzero(~(per_step < epsilon))
    steps = over[0] if over.size else per_step.size
    return steps / lyapunov_time_points


def crps(samples, y) -> float:
    """Empirical CRPS of a scalar ensemble against observation ``y``.

    ``mean|x_i - y| - (1 / 2 S^2) sum_ij |x_i - x_j|`` (all pairs, i = j
    included).  The pair term is evaluated in O(S log S) via sorting.
    """
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    S = x.size
    if S == 0:
        raise ValueError("need at least one sample")
    first = np.abs(x - y).mean()
    # sum_{i,j} |x_i - x_j| = 2 sum_i (2i - S + 1) x_(i) over sorted samples
    coef = 2 * np.arange(S) - S + 1
    pair = 2 * np.dot(coef, x)
    return float(first - pair / (2 * S * S))


def crps_ensemble(samples, truth) -> np.ndarray:
    """Per-step CRPS averaged over dimensions.

    Parameters
    ----------
    samples : array_like of shape (S, H, d)
    truth : array_like of shape (H, d)
    """
    samples = np.asarray(samples, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if samples.ndim == 2:
        samples = samples[..., None]
        truth = truth[..., None]
    S, H, d = samples.shape
    x = np.sort(samples, axis=0)
    first = np.abs(x - truth[None]).mean(axis=0)
    coef = (2 * np.arange(S) - S + 1)[:, None, None]
    pair = 2 * (coef * x).sum(axis=0)
    return (first - pair / (2 * S * S)).mean(axis=-1)


def correlation_sum(points, r_grid) -> np.ndarray:
    """Fraction of distinct pairs closer than each radius."""
    dist = np.sort(pdist(np.asarray(points, dtype=float)))
    return np.searchsorted(dist, np.asarray(r_grid, dtype=float), side="left") / dist.size


def correlation_dimension(points, r_grid=None, fit_quantiles=(1e-3, 1e-2),
                          return_fit: bool = False):
    """Grassberger-Procaccia dimension of a point cloud in full state space.

    The slope of ``log C(r)`` against ``log r`` is fitted by least squares
    over the radii where ``C(r)`` lies inside ``fit_quantiles``.  The
    default grid puts 20 radii at log-spaced pair-distance quantiles across
    that window.  Keeping the window at small ``C`` avoids the edge
    bias that flattens the slope at large radii (a uniform square fitted up
    to ``C = 0.5`` reads about 1.7).

    Raises
    ------
    InsufficientScaling
        Fewer than three radii fall in the scaling region.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if points.shape[0] < 100:
        raise ValueError("need at least 100 points")
    dist = np.sort(pdist(points))
    if r_grid is None:
        r_grid = np.quantile(dist, np.geomspace(*fit_quantiles, 20))
        if not (r_grid[0] > 0 and r_grid[-1] > r_grid[0]):
            raise InsufficientScaling("degenerate pair-distance distribution")
    r_grid = np.asarray(r_grid, dtype=float)
    C = np.searchsorted(dist, r_grid, side="left") / dist.size
    lo_q, hi_q = fit_quantiles
    # small slack so radii placed exactly at the window edges are kept
    sel = (C >= lo_q * 0.999) & (C <= hi_q * 1.001) & (r_grid > 0)
    if sel.sum() < 3:
        raise InsufficientScaling(f"only {int(sel.sum())} radii in the scaling region")
    slope, intercept = np.polyfit(np.log(r_grid[sel]), np.log(C[sel]), 1)
    if return_fit:
        return float(slope), {"r": r_grid, "C": C, "used": sel, "intercept": float(intercept)}
    return float(slope)


def kl_divergence(truth_points, pred_points, bins_per_dim: int = 30) -> float:
    """Mean over dimensions of ``KL(P || Q)`` between marginal histograms.

    Histograms share equal-width bins over the union range and get one
    pseudo-count per bin, so the value is always finite.
    """
    P = np.asarray(truth_points, dtype=float)
    Q = np.asarray(pred_points, dtype=float)
    if P.ndim == 1:
        P, Q = P[:, None], Q[:, None]
    if P.shape[0] == 0 or Q.shape[0] == 0:
        raise ValueError("both point clouds must be nonempty")
    if P.shape[1] != Q.shape[1]:
        raise ValueError("dimension mismatch")
    out = []
    for k in range(P.shape[1]):
        lo = min(P[:, k].min(), Q[:, k].min())
        hi = max(P[:, k].max(), Q[:, k].max())
        if hi == lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, bins_per_dim + 1)
        p = np.histogram(P[:, k], edges)[0] + 1.0
        q = np.histogram(Q[:, k], edges)[0] + 1.0
        p /= p.sum()
        q /= q.sum()
        out.append(float(np.sum(p * np.log(p / q))))
    return max(0.0, float(np.mean(out)))


@dataclass
class MetricReport:
    smape_per_step: list
    vpt: float
    epsilon: float
    crps_per_step: Optional[list] = None
    corr_dim: Optional[dict] = None
    kl: Optional[float] = None
    settings: dict = field(default_factory=dict)

    def as_dict(self):
        return asdict(self)


DEFAULT_SETTINGS = {
    "smape": "per step, mean over state dimensions; 0/0 coordinates count as 0",
    "vpt": "leading steps with per-step sMAPE < epsilon, in Lyapunov times",
    "crps": "all-pairs estimator including i = j, mean over dimensions",
    "corr_dim": "Grassberger-Procaccia on full states, no delay embedding",
    "kl": "smoothed (+1) marginal histograms on the union range, mean over dimensions",
}


__all__ = [
    "smape", "vpt", "vpt_from_smape", "crps", "crps_ensemble", "correlation_sum",
    "correlation_dimension", "kl_divergence", "MetricReport", "DEFAULT_SETTINGS",
    "VPT_EPSILON",
]
