"""Runnable checks of the velocity field's structural bounds and identities.

Each check returns a :class:`DiagnosticReport` whose ``pass_`` flag is
``max_violation <= bound + tolerance``.  Left- and right-hand sides are
computed through separate code paths wherever possible.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .bank import TransitionBank
from .sampler import SolverConfig, replay_diagnostics
from .velocity import (GaussianBridge, bridge_means, field_batch, responsibilities,
                       velocity_dense, velocity_jacobian, velocity_labels, velocity_topR)


@dataclass
class DiagnosticReport:
    name: str
    probes: int
    max_violation: float
    bound: float
    pass_: bool
    tolerance: float = 0.0
    details: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def as_dict(self):
        out = asdict(self)
        out["pass"] = out.pop("pass_")
        return out

    def worst(self):
        if not self.details:
            return None
        return max(self.details, key=lambda r: r.get("violation", -np.inf))


def _report(name, violations, details, bound=0.0, tolerance=0.0, summary=None):
    worst = float(np.max(violations)) if len(violations) else 0.0
    return DiagnosticReport(name, len(details), worst, bound,
                            bool(worst <= bound + tolerance), tolerance, details, summary or {})


def probe_box(bank: TransitionBank, inflate: float = 0.5):
    """Bounding box of all stored states, widened by ``inflate`` of its extent."""
    states = np.vstack([bank.x1, bank.x2])
    lo, hi = states.min(axis=0), states.max(axis=0)
    pad = inflate * (hi - lo) / 2
    pad = np.where(pad > 0, pad, 1.0)
    return lo - pad, hi + pad


def sample_probes(bank, n, rng, include_endpoints=True):
    """``n`` probe pairs ``(t, z)``; ``t=0`` and ``t=1`` come first."""
    lo, hi = probe_box(bank)
    ts = rng.uniform(0.05, 0.95, size=n)
    if include_endpoints and n >= 2:
        ts[0], ts[1] = 0.0, 1.0
    zs = rng.uniform(lo, hi, size=(n, bank.d))
    return ts, zs


def operator_norm(A, iters: int = 50, tol: float = 1e-10) -> float:
    """Spectral norm by power iteration on ``A^T A``."""
    A = np.asarray(A, dtype=float)
    AtA = A.T @ A
    v = np.ones(A.shape[1]) / np.sqrt(A.shape[1])
    lam = 0.0
    for _ in range(iters):
        w = AtA @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        new = float(v @ AtA @ v)
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            lam = new
            break
        lam = new
    return float(np.sqrt(max(lam, 0.0)))


def check_truncation_bound(bank, schedule, R, n_probes=1000, rng=None) -> DiagnosticReport:
    """``|v_dense - v_topR| <= 2 C (1 - kept mass)`` with ``C = max_j |y_j(t)|``."""
    rng = np.random.default_rng(rng)
    ts, zs = sample_probes(bank, n_probes, rng)
    viol, details = [], []
    for t, z in zip(ts, zs):
        vd = velocity_dense(t, z, bank, schedule).v
        tr = velocity_topR(t, z, bank, schedule, R)
        lhs = float(np.linalg.norm(vd - tr.v))
        C = float(np.linalg.norm(velocity_labels(t, bank, schedule), axis=1).max())
        alpha = responsibilities(t, z, bank, schedule)
        kept = float(alpha[tr.index].sum())
        rhs = 2 * C * max(0.0, 1 - kept)
        viol.append(lhs - rhs)
        details.append({"t": float(t), "lhs": lhs, "rhs": rhs, "kept_mass": kept,
                        "violation": lhs - rhs})
    return _report("truncation", viol, details, tolerance=1e-10,
                   summary={"R": int(R), "M": bank.M})


def lipschitz_bound(bank, schedule, t) -> float:
    """``2 R_m (R_1 + |g(t)| R_m) / c_t^2`` for the forcing ``h``."""
    R1 = float(np.linalg.norm(bank.increments, axis=1).max())
    Rm = float(np.linalg.norm(bridge_means(t, bank), axis=1).max())
    return 2 * Rm * (R1 + abs(schedule.g(t)) * Rm) / schedule.c2(t)


def check_lipschitz_bound(bank, schedule, t_grid, z_probes) -> DiagnosticReport:
    """Operator norm of ``grad_z h`` against its explicit bound at every probe."""
    viol, details = [], []
    for t in np.asarray(t_grid, dtype=float):
        bound = lipschitz_bound(bank, schedule, t)
        g = schedule.g(t)
        for z in np.atleast_2d(z_probes):
            J = velocity_jacobian(t, z, bank, schedule) - g * np.eye(bank.d)
            norm = operator_norm(J)
            # relative violation so the pass tolerance is scale free
            v = norm / bound - 1 if bound > 0 else norm
            viol.append(v)
            details.append({"t": float(t), "norm": norm, "bound": float(bound),
                            "violation": float(v)})
    return _report("lipschitz", viol, details, tolerance=1e-12)


def linear_transport_gain(schedule, scheme="euler", steps=100) -> float:
    """Gain a scheme applies to an offset ``delta' = g(t) delta`` over one step in t.

    The exact flow gives ``phi(1, 0) = 1``.  Left-point Euler gives
    ``prod_l (1 + g(t_l) dt)`` and ETD1 ``exp(sum_l g(t_l) dt)``; both exceed 1
    when ``sigma > 0`` because ``g(0) > 0`` is sampled and ``g(1) < 0`` never is.
    A gain above 1 compounds across forecast steps for offsets the bank
    cannot absorb (directions transverse to the data).
    """
    from .sampler import normalize_scheme
    scheme = normalize_scheme(scheme)
    dt = 1.0 / steps
    g = schedule.g(np.arange(steps) * dt)
    if scheme in ("euler", "euler_maruyama"):
        return float(np.prod(1 + g * dt))
    if scheme == "etd1":
        return float(np.exp(np.sum(g * dt)))
    if scheme == "integrating_factor":
        return float(schedule.phi(1.0, 0.0))
    # classical RK4 stability polynomial per step
    ts = np.arange(steps) * dt
    out = 1.0
    for t in ts:
        k1 = schedule.g(t)
        k2 = schedule.g(t + dt / 2) * (1 + dt / 2 * k1)
        k3 = schedule.g(t + dt / 2) * (1 + dt / 2 * k2)
        k4 = schedule.g(min(t + dt, 1.0)) * (1 + dt * k3)
        out *= 1 + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return float(out)


def phi_composition_error(schedule, grid) -> float:
    err = 0.0
    for t in grid:
        for s in grid:
            err = max(err, abs(schedule.phi(t, s) * schedule.phi(s, 0.0) - schedule.phi(t, 0.0)))
    return float(err)


def check_duhamel(bank, schedule, config=None, n_probes=5, rng=None,
                  steps=(200, 400), ratio_range=(1.7, 2.3)) -> DiagnosticReport:
    """Duhamel residual convergence, ``Phi`` composition and the sigma=0 beta sum.

    The residual between the integrated endpoint and the Duhamel quadrature
    should fall by the integrator's order when ``L`` doubles (a factor 2
    for Euler).
    """
    rng = np.random.default_rng(rng)
    config = config or SolverConfig()
    grid = np.linspace(0, 1, 21)
    comp = phi_composition_error(schedule, grid)
    seeds = rng.integers(0, 2 ** 63, size=n_probes)
    starts = bank.x1[rng.integers(0, bank.M, size=n_probes)]
    res = np.zeros((n_probes, len(steps)))
    for i, (x, sd) in enumerate(zip(starts, seeds)):
        for k, L in enumerate(steps):
            cfg = SolverConfig(config.scheme, L, config.sde_diffusion, None, config.seed,
                               config.init_noise)
            res[i, k] = replay_diagnostics(x, bank, schedule, cfg, np.random.default_rng(sd)
                                           ).duhamel_residual
    ratio = float(res[:, 0].sum() / res[:, 1].sum()) if res[:, 1].sum() > 0 else np.inf
    flat = GaussianBridge(schedule.sigma_min, 0.0)
    beta = replay_diagnostics(starts[0], bank, flat, SolverConfig("euler", 1000),
                              np.random.default_rng(seeds[0])).beta
    beta_err = abs(float(beta.sum()) - 1.0)
    lo, hi = ratio_range
    ratio_v = max(lo - ratio, ratio - hi, 0.0)
    viol = [ratio_v, comp - 1e-14, beta_err - 1e-6]
    details = [{"check": "residual_ratio", "value": ratio, "range": list(ratio_range),
                "violation": ratio_v},
               {"check": "phi_composition", "value": comp, "violation": comp - 1e-14},
               {"check": "beta_sum_sigma0", "value": beta_err, "violation": beta_err - 1e-6}]
    return _report("duhamel", viol, details,
                   summary={"residuals": res.tolist(), "steps": list(steps),
                            "phi_1_0": float(schedule.phi(1.0, 0.0))})


def intrinsic_weights(y, t, bank, schedule) -> np.ndarray:
    """Weights against rescaled means ``m_t / phi(t, 0)`` at bandwidth ``c_0``."""
    phi = schedule.phi(t, 0.0)
    m_tilde = bridge_means(t, bank) / phi
    logits = -np.sum((y - m_tilde) ** 2, axis=1) / (2 * schedule.c2(0.0))
    return np.exp(logits - logsumexp(logits))


def _label_error(bank, schedule, h):
    """Max relative gap between ``y_j(t) / phi(t, 0)`` and a central difference
    of the intrinsic means ``m_j(t) / phi(t, 0)``."""
    err = 0.0
    for t in np.linspace(0.1, 0.9, 9):
        lhs = velocity_labels(t, bank, schedule) / schedule.phi(t, 0.0)
        fd = (bridge_means(t + h, bank) / schedule.phi(t + h, 0.0)
              - bridge_means(t - h, bank) / schedule.phi(t - h, 0.0)) / (2 * h)
        err = max(err, float(np.abs(lhs - fd).max() / (1.0 + np.abs(lhs).max())))
    return err


def check_equivariance(bank, schedule, n_probes=500, rng=None, h=1e-3) -> DiagnosticReport:
    """Kernel equivariance of the weights and the intrinsic label identity."""
    rng = np.random.default_rng(rng)
    ts, zs = sample_probes(bank, n_probes, rng)
    ts[1] = rng.uniform(0.05, 0.95)
    viol, details = [], []
    for t, z in zip(ts, zs):
        phi = schedule.phi(t, 0.0)
        y = z / phi
        a = responsibilities(t, phi * y, bank, schedule)
        b = intrinsic_weights(y, t, bank, schedule)
        err = float(np.abs(a - b).max())
        viol.append(err - 1e-12)
        details.append({"t": float(t), "weight_error": err, "violation": err - 1e-12})
    errs = [_label_error(bank, schedule, hh) for hh in (h, h / 2)]
    # second order: halving h should cut the error ~4x unless already at rounding level
    order_ok = errs[1] <= errs[0] / 3 or errs[0] < 1e-9
    v = 0.0 if order_ok else 1.0
    viol.append(v)
    details.append({"check": "intrinsic_labels", "h": h, "rel_error": errs[0],
                    "rel_error_half_h": errs[1], "violation": v})
    return _report("equivariance", viol, details)


def measure_cost(bank_sizes=(1000, 2000, 4000, 10000), R_values=(None, 256), config=None,
                 d=3, batch=256, repeats=5, seed=0) -> DiagnosticReport:
    """Per-evaluation operation counts and wall-clock scaling in ``M``.

    Counts come from what one evaluation actually touches: every centre's
    distance, and the weighted-sum terms over the kept index set.
    """
    rng = np.random.default_rng(seed)
    schedule = GaussianBridge(0.5, 0.5)
    rows = []
    for M in bank_sizes:
        bank = TransitionBank(rng.normal(size=(M, d)), rng.normal(size=(M, d)))
        z = rng.normal(size=(batch, d))
        for R in R_values:
            if R is not None and R > M:
                continue
            fb = field_batch(0.3, z, bank, schedule, R, keep_weights=True)
            n_dist = bank.M
            n_terms = fb.weights.shape[1]
            best = np.inf
            field_batch(0.3, z, bank, schedule, R)
            for _ in range(repeats):
                t0 = time.perf_counter()
                field_batch(0.3, z, bank, schedule, R)
                best = min(best, time.perf_counter() - t0)
            rows.append({"M": M, "R": R, "distances": n_dist, "terms": n_terms,
                         "seconds_per_eval": best / batch, "violation": 0.0})
    dense = [r for r in rows if r["R"] is None]
    viol = []
    if len(dense) >= 2:
        per_m = np.array([r["seconds_per_eval"] / r["M"] for r in dense])
        spread = float(per_m.max() / per_m.min())
        viol.append(spread - 2.0)
        for r in dense:
            r["violation"] = spread - 2.0
    for r in rows:
        expect = r["M"] if r["R"] is None else r["R"]
        bad = float(r["terms"] != expect or r["distances"] != r["M"])
        viol.append(bad)
    return _report("cost", viol, rows,
                   summary={"model": "dense O(S H N_ode M d); top-R O(S H N_ode (M d + R d))"})


__all__ = [
    "DiagnosticReport", "check_truncation_bound", "check_lipschitz_bound", "check_duhamel",
    "check_equivariance", "measure_cost", "operator_norm", "lipschitz_bound",
    "phi_composition_error", "intrinsic_weights", "linear_transport_gain", "probe_box", "sample_probes",
]
