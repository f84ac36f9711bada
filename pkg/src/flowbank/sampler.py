"""ODE/SDE samplers driven by the closed-form bank velocity.

One forecast step starts from ``Z_0 ~ N(x_tau, sigma_min^2 I)`` and
integrates ``dZ/dt = v(t, Z)`` over a uniform grid ``t_l = l / L`` up to
``t = 1``; ``Z_1`` is the next-state estimate.  Iterating gives rollouts,
and independent rollouts give ensembles.

Randomness is keyed, not streamed: the generator used for forecast step
``k`` of a row with key ``key`` is

    numpy.random.default_rng(SeedSequence([seed, *key, k]))

(``key = (sample,)`` for :func:`ensemble`, ``(trajectory, sample)`` for
batched multi-origin forecasts).  It first draws the ``d`` initial-noise
values, then, for the SDE scheme, ``L x d`` Wiener increments.  Results
therefore do not depend on batching or worker count.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bank import TransitionBank
from numba import njit

from .errors import ConfigError, NumericalBlowup, RangeError
from .velocity import G_ZERO, GaussianBridge, PathFamily, RectifiedFlow, _mixture_kernel

SCHEMES = ("euler", "rk4", "integrating_factor", "etd1", "euler_maruyama")
_ALIASES = {
    "forwardeuler": "euler", "forward_euler": "euler",
    "integratingfactor": "integrating_factor", "if": "integrating_factor",
    "exponentialeuleretd1": "etd1", "exponential_euler": "etd1", "expeuler": "etd1",
    "eulermaruyamasde": "euler_maruyama", "em": "euler_maruyama", "sde": "euler_maruyama",
}


def normalize_scheme(name: str) -> str:
    key = name.strip().lower().replace("-", "_")
    key = _ALIASES.get(key.replace("_", ""), _ALIASES.get(key, key))
    if key not in SCHEMES:
        raise ConfigError(f"unknown scheme {name!r}; choose from {SCHEMES}")
    return key


@dataclass(frozen=True)
class SolverConfig:
    """Integration settings for one forecast step.

    ``sde_diffusion`` is the constant isotropic diffusion of the SDE scheme.
    ``init_noise=False`` starts every step exactly at the previous output
    instead of sampling ``N(x, sigma_min^2 I)`` around it.
    """

    scheme: str = "euler"
    steps: int = 100
    sde_diffusion: float = 0.0
    top_r: Optional[int] = None
    seed: int = 0
    init_noise: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scheme", normalize_scheme(self.scheme))
        if int(self.steps) < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.sde_diffusion < 0:
            raise ConfigError("sde_diffusion must be >= 0")
        if self.top_r is not None and int(self.top_r) < 1:
            raise ConfigError("top_r must be >= 1")

    def check_family(self, family):
        if self.scheme in ("integrating_factor", "etd1") and not isinstance(family, GaussianBridge):
            raise ConfigError(f"scheme {self.scheme!r} needs the Gaussian bridge family")

    def as_dict(self):
        return asdict(self)


@dataclass
class ForecastEnsemble:
    """Ensemble of rollouts from one origin.

    ``samples`` holds only the successful rollouts, in ``sample_ids`` order;
    ``failures`` maps failed sample ids to their error message.
    """

    samples: np.ndarray
    origin: np.ndarray
    dt: Optional[float]
    config: dict
    sample_ids: list
    failures: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.samples.shape[1]

    @property
    def timestamps(self) -> np.ndarray:
        steps = np.arange(1, self.horizon + 1)
        return steps * self.dt if self.dt else steps.astype(float)

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)


@dataclass
class ReplayDiagnostics:
    """Time-accumulated responsibilities and Duhamel residual of one step."""

    beta: np.ndarray
    duhamel_residual: float
    z0: np.ndarray
    z1: np.ndarray


def step_generator(seed: int, key: Sequence[int], step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key), int(step)]))


def _draw(rng, B, d, config, family):
    """Initial noise (B, d) and Wiener increments (B, L, d) or None."""
    eps = rng.standard_normal((B, d))
    dw = None
    if config.scheme == "euler_maruyama":
        dw = rng.standard_normal((B, config.steps, d))
    return eps, dw


def _initial(x, eps, family, config):
    if isinstance(family, RectifiedFlow):
        return eps.copy()
    if not config.init_noise:
        return x.copy()
    return x + family.sigma_min * eps


_SCHEME_IDS = {name: k for k, name in enumerate(SCHEMES)}


@njit(cache=True)
def _set_terms(t, fam, smin, sig, srf, x1, x2, inc, centers, b):
    """Fill ``centers`` and ``b`` for time ``t``; returns ``(a, bw2, g)``.

    Mirrors :func:`flowbank.velocity._terms` operation by operation.
    """
    M, d = x1.shape
    if fam == 0:
        c2 = smin ** 2 + sig ** 2 * t * (1 - t)
        g = sig ** 2 * (1 - 2 * t) / (2 * c2)
        for j in range(M):
            for k in range(d):
                m = (1 - t) * x1[j, k] + t * x2[j, k]
                centers[j, k] = m
                b[j, k] = inc[j, k] - g * m
        return g, c2, g
    a_t = 1 - (1 - srf) * t
    for j in range(M):
        for k in range(d):
            centers[j, k] = t * x2[j, k]
            b[j, k] = x2[j, k] / a_t
    return -(1 - srf) / a_t, a_t ** 2, 0.0


@njit(cache=True, error_model="numpy")
def _solve_kernel(z, x1, x2, inc, fam, smin, sig, srf, scheme, L, R, diff, dw,
                  fail_step, fail_g, rec_h, beta):
    """Integrate every row of ``z`` from t=0 to t=1 in place.

    ``fail_step[i]`` receives the first solver step at which row ``i``
    went non-finite (-1 if never).  With ``rec_h`` of shape (L, B, d) the
    forcing at the left end of each step is stored and ``beta`` (B, M)
    accumulates ``dt * alpha``.
    """
    B, d = z.shape
    M = x1.shape[0]
    dt = 1.0 / L
    centers = np.empty((M, d))
    b = np.empty((M, d))
    h = np.empty((B, d))
    kept = np.empty(B)
    idx = np.empty((B, 0), dtype=np.int64)
    record = rec_h.shape[0] > 0
    w = np.empty((B, M if record else 0))
    k1 = np.empty((B, d))
    k2 = np.empty((B, d))
    k3 = np.empty((B, d))
    zs = np.empty((B, d))
    new = np.empty((B, d))
    sq = math.sqrt(dt)
    for ell in range(L):
        t = ell / L
        a, bw2, g = _set_terms(t, fam, smin, sig, srf, x1, x2, inc, centers, b)
        _mixture_kernel(z, centers, b, bw2, R, h, kept, idx, w)
        if record:
            for i in range(B):
                for k in range(d):
                    rec_h[ell, i, k] = h[i, k]
                for j in range(M):
                    beta[i, j] += dt * w[i, j]
        if scheme == 0 or scheme == 4 or scheme == 1:
            for i in range(B):
                for k in range(d):
                    k1[i, k] = h[i, k] if a == 0 else a * z[i, k] + h[i, k]
        if scheme == 0:
            for i in range(B):
                for k in range(d):
                    new[i, k] = z[i, k] + dt * k1[i, k]
        elif scheme == 4:
            for i in range(B):
                for k in range(d):
                    new[i, k] = z[i, k] + dt * k1[i, k] + diff * sq * dw[i, ell, k]
        elif scheme == 1:
            th = t + dt / 2
            a2, bw2h, _ = _set_terms(th, fam, smin, sig, srf, x1, x2, inc, centers, b)
            for i in range(B):
                for k in range(d):
                    zs[i, k] = z[i, k] + dt / 2 * k1[i, k]
            _mixture_kernel(zs, centers, b, bw2h, R, k2, kept, idx, w[:, :0])
            for i in range(B):
                for k in range(d):
                    if a2 != 0:
                        k2[i, k] = a2 * zs[i, k] + k2[i, k]
                    zs[i, k] = z[i, k] + dt / 2 * k2[i, k]
            _mixture_kernel(zs, centers, b, bw2h, R, k3, kept, idx, w[:, :0])
            for i in range(B):
                for k in range(d):
                    if a2 != 0:
                        k3[i, k] = a2 * zs[i, k] + k3[i, k]
                    zs[i, k] = z[i, k] + dt * k3[i, k]
            a4, bw24, _ = _set_terms(min(t + dt, 1.0), fam, smin, sig, srf, x1, x2, inc,
                                     centers, b)
            _mixture_kernel(zs, centers, b, bw24, R, new, kept, idx, w[:, :0])
            for i in range(B):
                for k in range(d):
                    k4 = new[i, k] if a4 == 0 else a4 * zs[i, k] + new[i, k]
                    new[i, k] = z[i, k] + dt / 6 * (k1[i, k] + 2 * k2[i, k] + 2 * k3[i, k] + k4)
        elif scheme == 2:
            c2n = smin ** 2 + sig ** 2 * (t + dt) * (1 - (t + dt))
            phi = math.sqrt(c2n / bw2)
            for i in range(B):
                for k in range(d):
                    new[i, k] = phi * (z[i, k] + dt * h[i, k])
        else:
            if abs(g) < G_ZERO:
                for i in range(B):
                    for k in range(d):
                        new[i, k] = z[i, k] + dt * h[i, k]
            else:
                e = math.exp(g * dt)
                c = math.expm1(g * dt) / g
                for i in range(B):
                    for k in range(d):
                        new[i, k] = e * z[i, k] + c * h[i, k]
        for i in range(B):
            ok = True
            for k in range(d):
                z[i, k] = new[i, k]
                if not math.isfinite(new[i, k]):
                    ok = False
            if not ok and fail_step[i] < 0:
                fail_step[i] = ell
                fail_g[i] = abs(g)


def _family_args(family):
    if isinstance(family, GaussianBridge):
        return 0, float(family.sigma_min), float(family.sigma), 0.0
    return 1, 0.0, 0.0, float(family.sigma_min_rf)


def _integrate(z0, bank, family, config, dw=None, record=False):
    """Integrate a batch from t=0 to t=1.

    Returns ``(z1, failed)`` where ``failed`` maps row -> (step, |g|); with
    ``record`` also the stored forcing (L, B, d) and beta (B, M).
    """
    z = np.array(z0, dtype=float, order="C")
    B, d = z.shape
    L = int(config.steps)
    R = bank.M if config.top_r is None else int(config.top_r)
    if not 1 <= R <= bank.M:
        raise RangeError(f"top_r must lie in [1, {bank.M}], got {config.top_r}")
    fam, smin, sig, srf = _family_args(family)
    dw = np.zeros((B, 0, d)) if dw is None else np.ascontiguousarray(dw, dtype=float)
    fail_step = np.full(B, -1, dtype=np.int64)
    fail_g = np.zeros(B)
    rec_h = np.zeros((L, B, d)) if record else np.zeros((0, B, d))
    beta = np.zeros((B, bank.M)) if record else np.zeros((B, 0))
    _solve_kernel(z, bank.x1, bank.x2, np.ascontiguousarray(bank.increments), fam, smin, sig,
                  srf, _SCHEME_IDS[config.scheme], L, R, float(config.sde_diffusion), dw,
                  fail_step, fail_g, rec_h, beta)
    failed = {int(i): (int(fail_step[i]), float(fail_g[i])) for i in np.flatnonzero(fail_step >= 0)}
    if record:
        return z, failed, rec_h, beta
    return z, failed


def one_step(x_tau, bank: TransitionBank, family: PathFamily, config: SolverConfig,
             rng: np.random.Generator) -> np.ndarray:
    """Sample ``x_{tau+1}`` given ``x_tau`` by integrating the bank ODE/SDE once.

    For the rectified-flow family the start is N(0, I) and ``x_tau`` is
    ignored; that family generates unconditional ``x2`` samples.
    """
    config.check_family(family)
    x = np.asarray(x_tau, dtype=float).reshape(1, -1)
    eps, dw = _draw(rng, 1, bank.d, config, family)
    z1, failed = _integrate(_initial(x, eps, family, config), bank, family, config, dw)
    if failed:
        step, g_abs = failed[0]
        raise NumericalBlowup(step, g_abs)
    return z1[0]


def forecast_batch(origins, horizon: int, bank: TransitionBank, family: PathFamily,
                   config: SolverConfig, keys: Sequence[Sequence[int]]):
    """Roll out every row of ``origins`` for ``horizon`` steps.

    Returns ``(paths, failures)``: ``paths`` is (B, H, d) with NaN rows for
    failed entries, ``failures`` maps row -> NumericalBlowup.
    """
    if horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {horizon}")
    config.check_family(family)
    x = np.array(origins, dtype=float)
    B, d = x.shape
    if len(keys) != B:
        raise ValueError("one key per origin row required")
    paths = np.full((B, horizon, d), np.nan)
    failures = {}
    alive = np.arange(B)
    for k in range(horizon):
        eps = np.empty((alive.size, d))
        dw = np.empty((alive.size, config.steps, d)) if config.scheme == "euler_maruyama" else None
        for i, row in enumerate(alive):
            e, w = _draw(step_generator(config.seed, keys[row], k), 1, d, config, family)
            eps[i] = e[0]
            if dw is not None:
                dw[i] = w[0]
        z1, failed = _integrate(_initial(x[alive], eps, family, config), bank, family, config, dw)
        for i, (step, g_abs) in failed.items():
            row = int(alive[i])
            failures[row] = NumericalBlowup(step, g_abs, forecast_step=k, sample=row)
        ok = np.ones(alive.size, dtype=bool)
        ok[list(failed)] = False
        x[alive[ok]] = z1[ok]
        paths[alive[ok], k] = z1[ok]
        alive = alive[ok]
        if alive.size == 0:
            break
    return paths, failures


def rollout(x_tau, horizon: int, bank: TransitionBank, family: PathFamily,
            config: SolverConfig, rng: Optional[np.random.Generator] = None,
            sample: int = 0) -> np.ndarray:
    """Iterate :func:`one_step` ``horizon`` times; returns (H, d).

    Without ``rng`` each step uses the keyed generator for ``(sample,)``,
    which makes the result equal to sample ``sample`` of :func:`ensemble`.
    """
    if horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {horizon}")
    if rng is None:
        paths, failures = forecast_batch([x_tau], horizon, bank, family, config, [(sample,)])
        if failures:
            raise failures[0]
        return paths[0]
    x = np.asarray(x_tau, dtype=float)
    out = np.empty((horizon, x.size))
    for k in range(horizon):
        try:
            x = one_step(x, bank, family, config, rng)
        except NumericalBlowup as exc:
            exc.forecast_step = k
            raise
        out[k] = x
    return out


def ensemble(x_tau, horizon: int, n_samples: int, bank: TransitionBank, family: PathFamily,
             config: SolverConfig, workers: int = 1, dt: Optional[float] = None,
             ) -> ForecastEnsemble:
    """``n_samples`` keyed rollouts from ``x_tau``, optionally across threads."""
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    x = np.asarray(x_tau, dtype=float)
    ids = list(range(n_samples))
    chunks = [ids[i::max(1, workers)] for i in range(max(1, workers))]
    chunks = [c for c in chunks if c]

    def run(chunk):
        return chunk, forecast_batch(np.tile(x, (len(chunk), 1)), horizon, bank, family,
                                     config, [(s,) for s in chunk])

    if len(chunks) == 1:
        results = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(len(chunks)) as pool:
            results = list(pool.map(run, chunks))
    paths = np.empty((n_samples, horizon, x.size))
    failures = {}
    for chunk, (p, fails) in results:
        paths[chunk] = p
        for row, exc in fails.items():
            exc.sample = chunk[row]
            failures[chunk[row]] = str(exc)
    if len(failures) == n_samples:
        raise NumericalBlowup(*_first_failure(results), sample=None)
    good = [s for s in ids if s not in failures]
    return ForecastEnsemble(paths[good], x.copy(), dt, config.as_dict(), good, failures)


def _first_failure(results):
    for _, (_, fails) in results:
        for exc in fails.values():
            return exc.step, exc.g_abs, exc.forecast_step
    return 0, 0.0, None


def replay_diagnostics(x_tau, bank: TransitionBank, schedule: GaussianBridge,
                       config: SolverConfig, rng: np.random.Generator) -> ReplayDiagnostics:
    """Accumulate ``beta_j = sum_l dt alpha_j(t_l, Z_l)`` along one step.

    Also reports the Duhamel residual
    ``|Z_1 - phi(1,0) Z_0 - sum_l dt phi(1, t_l) h(t_l, Z_l)|`` built from
    the forcing values stored at the left end of every solver step.
    """
    if not isinstance(schedule, GaussianBridge):
        raise ConfigError("replay diagnostics need the Gaussian bridge family")
    dense = SolverConfig(config.scheme, config.steps, config.sde_diffusion, None,
                         config.seed, config.init_noise)
    x = np.asarray(x_tau, dtype=float).reshape(1, -1)
    eps, dw = _draw(rng, 1, bank.d, dense, schedule)
    z0 = _initial(x, eps, schedule, dense)
    dt = 1.0 / dense.steps
    z1, failed, rec_h, beta = _integrate(z0, bank, schedule, dense, dw, record=True)
    if failed:
        raise NumericalBlowup(*failed[0])
    ts = np.arange(dense.steps) * dt
    quad = dt * (schedule.phi(1.0, ts)[:, None] * rec_h[:, 0]).sum(axis=0)
    resid = float(np.linalg.norm(z1[0] - schedule.phi(1.0, 0.0) * z0[0] - quad))
    return ReplayDiagnostics(beta[0], resid, z0[0], z1[0])


__all__ = [
    "SCHEMES", "SolverConfig", "ForecastEnsemble", "ReplayDiagnostics", "one_step",
    "rollout", "ensemble", "forecast_batch", "replay_diagnostics", "step_generator",
    "normalize_scheme",
]
