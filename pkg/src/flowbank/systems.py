"""Chaotic benchmark systems, a fixed-step RK4 integrator and Benettin's method.

Trajectories are sampled at ``dt = 1 / (lambda * points_per_lyapunov_time)``
after integrating at ``dt / 10`` and downsampling.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numba import njit

from .bank import Trajectory
from .errors import ConfigError, DivergedTrajectory, NoData

logger = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e6


def _lorenz(x, p):
    X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([p["sigma"] * (Y - X), X * (p["rho"] - Z) - Y, X * Y - p["beta"] * Z], axis=-1)


def _lorenz_jvp(x, v, p):
    X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
    a, b, c = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([p["sigma"] * (b - a),
                     (p["rho"] - Z) * a - b - X * c,
                     Y * a + X * b - p["beta"] * c], axis=-1)


def _rossler(x, p):
    X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([-Y - Z, X + p["a"] * Y, p["b"] + Z * (X - p["c"])], axis=-1)


def _rossler_jvp(x, v, p):
    X, Z = x[..., 0], x[..., 2]
    a, b, c = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([-b - c, a + p["a"] * b, Z * a + (X - p["c"]) * c], axis=-1)


def _aizawa(x, p):
    X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
    r2 = X * X + Y * Y
    return np.stack([
        (Z - p["b"]) * X - p["d"] * Y,
        p["d"] * X + (Z - p["b"]) * Y,
        p["c"] + p["a"] * Z - Z ** 3 / 3 - r2 * (1 + p["e"] * Z) + p["f"] * Z * X ** 3,
    ], axis=-1)


def _aizawa_jvp(x, v, p):
    X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
    a, b, c = v[..., 0], v[..., 1], v[..., 2]
    r2 = X * X + Y * Y
    dz = (-2 * X * (1 + p["e"] * Z) + 3 * p["f"] * Z * X ** 2) * a \
        - 2 * Y * (1 + p["e"] * Z) * b \
        + (p["a"] - Z ** 2 - p["e"] * r2 + p["f"] * X ** 3) * c
    return np.stack([(Z - p["b"]) * a - p["d"] * b + X * c,
                     p["d"] * a + (Z - p["b"]) * b + Y * c, dz], axis=-1)


def _henon_heiles(x, p):
    X, Y, PX, PY = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    lam = p["lam"]
    return np.stack([PX, PY, -X - 2 * lam * X * Y, -Y - lam * (X * X - Y * Y)], axis=-1)


def _henon_heiles_jvp(x, v, p):
    X, Y = x[..., 0], x[..., 1]
    lam = p["lam"]
    a, b, c, e = v[..., 0], v[..., 1], v[..., 2], v[..., 3]
    return np.stack([c, e, -(1 + 2 * lam * Y) * a - 2 * lam * X * b,
                     -2 * lam * X * a - (1 - 2 * lam * Y) * b], axis=-1)


def henon_heiles_energy(x, lam=1.0):
    x = np.asarray(x, dtype=float)
    X, Y, PX, PY = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    return 0.5 * (PX ** 2 + PY ** 2) + 0.5 * (X ** 2 + Y ** 2) + lam * (X ** 2 * Y - Y ** 3 / 3)


def _linear(x, p):
    return -p["rate"] * x


def _linear_jvp(x, v, p):
    return -p["rate"] * v


# Compiled twins of the right-hand sides above, dispatched on an integer id;
# the integration loops below run entirely in these.
_LORENZ, _ROSSLER, _AIZAWA, _HENON, _LINEAR = range(5)


@njit(cache=True)
def _rhs_nb(sid, x, p, out):
    if sid == _LORENZ:
        out[0] = p[0] * (x[1] - x[0])
        out[1] = x[0] * (p[1] - x[2]) - x[1]
        out[2] = x[0] * x[1] - p[2] * x[2]
    elif sid == _ROSSLER:
        out[0] = -x[1] - x[2]
        out[1] = x[0] + p[0] * x[1]
        out[2] = p[1] + x[2] * (x[0] - p[2])
    elif sid == _AIZAWA:
        r2 = x[0] * x[0] + x[1] * x[1]
        out[0] = (x[2] - p[1]) * x[0] - p[3] * x[1]
        out[1] = p[3] * x[0] + (x[2] - p[1]) * x[1]
        out[2] = (p[2] + p[0] * x[2] - x[2] ** 3 / 3 - r2 * (1 + p[4] * x[2])
                  + p[5] * x[2] * x[0] ** 3)
    elif sid == _HENON:
        out[0] = x[2]
        out[1] = x[3]
        out[2] = -x[0] - 2 * p[0] * x[0] * x[1]
        out[3] = -x[1] - p[0] * (x[0] * x[0] - x[1] * x[1])
    else:
        for i in range(x.shape[0]):
            out[i] = -p[0] * x[i]


@njit(cache=True)
def _jvp_nb(sid, x, v, p, out):
    if sid == _LORENZ:
        out[0] = p[0] * (v[1] - v[0])
        out[1] = (p[1] - x[2]) * v[0] - v[1] - x[0] * v[2]
        out[2] = x[1] * v[0] + x[0] * v[1] - p[2] * v[2]
    elif sid == _ROSSLER:
        out[0] = -v[1] - v[2]
        out[1] = v[0] + p[0] * v[1]
        out[2] = x[2] * v[0] + (x[0] - p[2]) * v[2]
    elif sid == _AIZAWA:
        X, Y, Z = x[0], x[1], x[2]
        r2 = X * X + Y * Y
        out[0] = (Z - p[1]) * v[0] - p[3] * v[1] + X * v[2]
        out[1] = p[3] * v[0] + (Z - p[1]) * v[1] + Y * v[2]
        out[2] = ((-2 * X * (1 + p[4] * Z) + 3 * p[5] * Z * X * X) * v[0]
                  - 2 * Y * (1 + p[4] * Z) * v[1]
                  + (p[0] - Z * Z - p[4] * r2 + p[5] * X ** 3) * v[2])
    elif sid == _HENON:
        out[0] = v[2]
        out[1] = v[3]
        out[2] = -(1 + 2 * p[0] * x[1]) * v[0] - 2 * p[0] * x[0] * v[1]
        out[3] = -2 * p[0] * x[0] * v[0] - (1 - 2 * p[0] * x[1]) * v[1]
    else:
        for i in range(x.shape[0]):
            out[i] = -p[0] * v[i]


@njit(cache=True)
def _rk4_nb(sid, p, x, h, k1, k2, k3, k4, tmp):
    d = x.shape[0]
    _rhs_nb(sid, x, p, k1)
    for i in range(d):
        tmp[i] = x[i] + 0.5 * h * k1[i]
    _rhs_nb(sid, tmp, p, k2)
    for i in range(d):
        tmp[i] = x[i] + 0.5 * h * k2[i]
    _rhs_nb(sid, tmp, p, k3)
    for i in range(d):
        tmp[i] = x[i] + h * k3[i]
    _rhs_nb(sid, tmp, p, k4)
    for i in range(d):
        x[i] += h / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i])


@njit(cache=True)
def _run_nb(sid, p, x0, n_steps, h, record_every, limit):
    B, d = x0.shape
    n_rec = n_steps // record_every + 1
    out = np.full((B, n_rec, d), np.nan)
    bad = np.zeros(B, dtype=np.bool_)
    k1 = np.empty(d)
    k2 = np.empty(d)
    k3 = np.empty(d)
    k4 = np.empty(d)
    tmp = np.empty(d)
    for b in range(B):
        x = x0[b].copy()
        out[b, 0] = x
        for i in range(1, n_steps + 1):
            _rk4_nb(sid, p, x, h, k1, k2, k3, k4, tmp)
            nrm = 0.0
            for j in range(d):
                nrm += x[j] * x[j]
            if not (nrm <= limit * limit):
                bad[b] = True
                break
            if i % record_every == 0:
                out[b, i // record_every] = x
    return out, bad


@njit(cache=True)
def _benettin_nb(sid, p, x0, n_renorm, per, h, limit):
    d = x0.shape[0]
    x = x0.copy()
    v = np.ones(d) / np.sqrt(d)
    logs = np.full(n_renorm, np.nan)
    k1 = np.empty(d)
    k2 = np.empty(d)
    k3 = np.empty(d)
    k4 = np.empty(d)
    j1 = np.empty(d)
    j2 = np.empty(d)
    j3 = np.empty(d)
    j4 = np.empty(d)
    xt = np.empty(d)
    vt = np.empty(d)
    for k in range(n_renorm):
        for _ in range(per):
            _rhs_nb(sid, x, p, k1)
            _jvp_nb(sid, x, v, p, j1)
            for i in range(d):
                xt[i] = x[i] + 0.5 * h * k1[i]
                vt[i] = v[i] + 0.5 * h * j1[i]
            _rhs_nb(sid, xt, p, k2)
            _jvp_nb(sid, xt, vt, p, j2)
            for i in range(d):
                xt[i] = x[i] + 0.5 * h * k2[i]
                vt[i] = v[i] + 0.5 * h * j2[i]
            _rhs_nb(sid, xt, p, k3)
            _jvp_nb(sid, xt, vt, p, j3)
            for i in range(d):
                xt[i] = x[i] + h * k3[i]
                vt[i] = v[i] + h * j3[i]
            _rhs_nb(sid, xt, p, k4)
            _jvp_nb(sid, xt, vt, p, j4)
            for i in range(d):
                x[i] += h / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i])
                v[i] += h / 6.0 * (j1[i] + 2 * j2[i] + 2 * j3[i] + j4[i])
        nx = 0.0
        nv = 0.0
        for i in range(d):
            nx += x[i] * x[i]
            nv += v[i] * v[i]
        if not (nx <= limit * limit) or not (nv > 0.0 and nv < np.inf):
            return logs, k
        nv = np.sqrt(nv)
        logs[k] = np.log(nv)
        for i in range(d):
            v[i] /= nv
    return logs, n_renorm


@dataclass(frozen=True)
class _SystemDef:
    d: int
    rhs: Callable
    jvp: Callable
    params: dict
    box: tuple
    lyapunov: Optional[float]
    sid: int


# ``lyapunov`` values are this module's own Benettin estimates (see
# ``estimate_lyapunov``) and serve as defaults when a plan omits one.
_SYSTEMS = {
    "lorenz63": _SystemDef(3, _lorenz, _lorenz_jvp,
                           {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0},
                           ((-15, 15), (-20, 20), (5, 40)), 0.9056, _LORENZ),
    "rossler": _SystemDef(3, _rossler, _rossler_jvp, {"a": 0.2, "b": 0.2, "c": 5.7},
                          ((-8, 8), (-8, 8), (0, 1)), 0.0722, _ROSSLER),
    "aizawa": _SystemDef(3, _aizawa, _aizawa_jvp,
                         {"a": 0.95, "b": 0.7, "c": 0.6, "d": 3.5, "e": 0.25, "f": 0.1},
                         ((-0.5, 0.5), (-0.5, 0.5), (-0.5, 0.5)), 0.0954, _AIZAWA),
    "henonheiles": _SystemDef(4, _henon_heiles, _henon_heiles_jvp, {"lam": 1.0},
                              ((-0.25, 0.25), (-0.25, 0.25), (-0.25, 0.25), (-0.25, 0.25)), 0.045, _HENON),
    "linear": _SystemDef(1, _linear, _linear_jvp, {"rate": 1.0}, ((-1, 1),), None, _LINEAR),
}

_NAME_ALIASES = {"lorenz": "lorenz63", "lorenz_63": "lorenz63", "rössler": "rossler",
                 "henon_heiles": "henonheiles", "hénonheiles": "henonheiles"}


@dataclass(frozen=True)
class SystemSpec:
    """A named ODE system with parameter overrides.

    ``linear`` (``x' = -rate x``, any dimension via ``d``) exists as an
    analytic reference for the Lyapunov estimator.
    """

    name: str
    params: dict = field(default_factory=dict)
    d: Optional[int] = None

    def __post_init__(self):
        key = self.name.strip().lower().replace("-", "").replace(" ", "")
        key = _NAME_ALIASES.get(key, key)
        if key not in _SYSTEMS:
            raise ConfigError(f"unknown system {self.name!r}; choose from {sorted(_SYSTEMS)}")
        sysdef = _SYSTEMS[key]
        unknown = set(self.params) - set(sysdef.params)
        if unknown:
            raise ConfigError(f"unknown parameter(s) {sorted(unknown)} for {key}")
        params = {**sysdef.params, **{k: float(v) for k, v in self.params.items()}}
        if not all(np.isfinite(v) for v in params.values()):
            raise ConfigError("system parameters must be finite")
        d = self.d if (key == "linear" and self.d) else sysdef.d
        object.__setattr__(self, "name", key)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "d", d)

    @property
    def _def(self):
        return _SYSTEMS[self.name]

    def rhs(self, x):
        return self._def.rhs(np.asarray(x, dtype=float), self.params)

    def jvp(self, x, v):
        return self._def.jvp(np.asarray(x, dtype=float), np.asarray(v, dtype=float), self.params)

    def jacobian(self, x):
        return np.stack([self.jvp(x, e) for e in np.eye(self.d)], axis=-1)

    @property
    def param_vector(self) -> np.ndarray:
        return np.array([self.params[k] for k in self._def.params], dtype=float)

    @property
    def box(self):
        b = self._def.box
        return b * self.d if self.name == "linear" else b

    @property
    def reference_lyapunov(self) -> Optional[float]:
        defaults = self._def.params == self.params
        return self._def.lyapunov if defaults else None


def _run(spec, x0, n_steps, h, record_every=1):
    """Batched fixed-step RK4; ``x0`` is (B, d).  Returns states (B, T, d) and a divergence mask."""
    x0 = np.ascontiguousarray(x0, dtype=float)
    return _run_nb(spec._def.sid, spec.param_vector, x0, int(n_steps), float(h),
                   int(record_every), DIVERGENCE_NORM)


def integrate_system(spec: SystemSpec, x0, total_time: float, dt_internal: float,
                     id: str = "traj") -> Trajectory:
    """Fixed-step RK4 trajectory recorded at every internal step.

    Raises
    ------
    DivergedTrajectory
        If the state leaves the ball of radius 1e6 or becomes non-finite.
    """
    n = int(round(total_time / dt_internal))
    if n < 1:
        raise NoData(f"total_time={total_time} yields fewer than 2 states")
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    if x0.shape[1] != spec.d:
        raise ConfigError(f"x0 has dimension {x0.shape[1]}, system needs {spec.d}")
    states, bad = _run(spec, x0, n, dt_internal)
    if bad[0]:
        raise DivergedTrajectory(f"{spec.name} diverged from {x0[0].tolist()}")
    return Trajectory(id, dt_internal, states[0])


@dataclass
class LyapunovEstimate:
    exponent: float
    converged: bool
    last_quarter: float
    history: np.ndarray

    def __float__(self):
        return self.exponent


def estimate_lyapunov(spec: SystemSpec, x0, time_horizon: float, renorm_interval: float,
                      dt_internal: float = 0.01, transient: float = 0.0) -> LyapunovEstimate:
    """Largest Lyapunov exponent by tangent-vector renormalisation.

    The state and one tangent vector are advanced together with RK4; every
    ``renorm_interval`` the tangent's log-growth is accumulated and it is
    rescaled to unit norm.  ``converged`` is False when the average over the
    last quarter of the run differs from the overall average by 5% or more.
    """
    d = spec.d
    x = np.asarray(x0, dtype=float).reshape(d).copy()
    if transient > 0:
        states, bad = _run(spec, x[None], int(round(transient / dt_internal)), dt_internal,
                           record_every=int(round(transient / dt_internal)))
        if bad[0]:
            raise DivergedTrajectory("diverged during transient")
        x = states[0, -1]
    per = max(1, int(round(renorm_interval / dt_internal)))
    n_renorm = max(4, int(round(time_horizon / (per * dt_internal))))
    tau = per * dt_internal
    logs, done = _benettin_nb(spec._def.sid, spec.param_vector, x, n_renorm, per,
                              float(dt_internal), DIVERGENCE_NORM)
    if done < n_renorm:
        raise DivergedTrajectory("trajectory diverged during Lyapunov estimation")
    lam = logs.sum() / (n_renorm * tau)
    q = n_renorm // 4
    last = logs[-q:].sum() / (q * tau)
    history = np.cumsum(logs) / (tau * np.arange(1, n_renorm + 1))
    converged = abs(last - lam) < 0.05 * abs(lam) if lam != 0 else last == 0
    return LyapunovEstimate(float(lam), bool(converged), float(last), history)


@dataclass(frozen=True)
class SamplingPlan:
    """How benchmark trajectories are sampled.

    ``dt = 1 / (lyapunov_exponent * points_per_lyapunov_time)``; the
    internal RK4 step is ``dt / internal_substeps``.
    """

    lyapunov_exponent: float
    points_per_lyapunov_time: int = 100
    n_trajectories: int = 20
    length: int = 812
    burn_in: float = 50.0
    initial_condition_box: Optional[tuple] = None
    internal_substeps: int = 10

    def __post_init__(self):
        if not self.lyapunov_exponent > 0:
            raise ConfigError("lyapunov_exponent must be positive")
        if self.points_per_lyapunov_time < 1 or self.n_trajectories < 1:
            raise ConfigError("points_per_lyapunov_time and n_trajectories must be >= 1")
        if self.length < 2:
            raise ConfigError("length must be >= 2")
        if self.burn_in < 0:
            raise ConfigError("burn_in must be >= 0")

    @property
    def dt(self) -> float:
        return 1.0 / (self.lyapunov_exponent * self.points_per_lyapunov_time)

    @property
    def dt_internal(self) -> float:
        return self.dt / self.internal_substeps

    @property
    def lyapunov_times(self) -> float:
        return self.length / self.points_per_lyapunov_time


MAX_DRAWS = 10


def generate_benchmark(spec: SystemSpec, plan: SamplingPlan, seed: int) -> list[Trajectory]:
    """``plan.n_trajectories`` trajectories of ``plan.length`` points.

    Initial conditions are uniform in the plan's box (the system default if
    unset), burned in for ``plan.burn_in`` time units, then recorded.  A
    diverging draw is replaced, up to ten draws per trajectory.
    """
    box = np.array(plan.initial_condition_box or spec.box, dtype=float)
    if box.shape != (spec.d, 2):
        raise ConfigError(f"initial_condition_box must have {spec.d} intervals")
    h = plan.dt_internal
    n_burn = int(round(plan.burn_in / h))
    n_rec = (plan.length - 1) * plan.internal_substeps
    rng = np.random.default_rng(seed)
    n = plan.n_trajectories
    draws = [rng.uniform(box[:, 0], box[:, 1], size=(MAX_DRAWS, spec.d)) for _ in range(n)]
    attempt = np.zeros(n, dtype=int)
    result: list[Optional[np.ndarray]] = [None] * n
    while any(r is None for r in result):
        todo = [i for i in range(n) if result[i] is None]
        for i in todo:
            if attempt[i] >= MAX_DRAWS:
                raise DivergedTrajectory(f"trajectory {i}: {MAX_DRAWS} initial conditions diverged")
        x0 = np.array([draws[i][attempt[i]] for i in todo])
        if n_burn:
            burned, bad_b = _run(spec, x0, n_burn, h, record_every=n_burn)
            x0 = burned[:, -1]
        else:
            bad_b = np.zeros(len(todo), dtype=bool)
        states, bad = _run(spec, x0, n_rec, h, record_every=plan.internal_substeps)
        for k, i in enumerate(todo):
            if bad[k] or bad_b[k]:
                logger.info("trajectory %d: draw %d diverged, redrawing", i, attempt[i])
                attempt[i] += 1
            else:
                result[i] = states[k]
    return [Trajectory(f"traj_{i:03d}", plan.dt, result[i], 0.0) for i in range(n)]


__all__ = [
    "SystemSpec", "SamplingPlan", "LyapunovEstimate", "integrate_system",
    "estimate_lyapunov", "generate_benchmark", "henon_heiles_energy",
]
