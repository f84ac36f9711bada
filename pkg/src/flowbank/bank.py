"""Trajectories and the one-step transition memory bank.

The bank is the whole "model": every consecutive pair of observed states
``(x_tau, x_{tau+1})`` from every trajectory, stacked into two ``(M, d)``
arrays.  Nothing is fitted.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DimensionMismatch, IoError, NoData, NonFiniteInput, ParseError

logger = logging.getLogger(__name__)

BANK_FORMAT_VERSION = 1

# Pair-count convention for sum over trajectories; recorded in bank metadata.
M_CONVENTION = "M = sum_n (T_n - 1): consecutive pairs within each trajectory"


@dataclass(frozen=True)
class Trajectory:
    """A uniformly sampled state sequence.

    Parameters
    ----------
    id : str
        Identifier, used in transition provenance.
    dt : float
        Sampling interval in system time units.
    states : ndarray of shape (T, d)
    t0 : float
        Time stamp of the first state.
    """

    id: str
    dt: float
    states: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        states = np.array(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        if states.ndim != 2 or states.shape[1] < 1:
            raise DimensionMismatch(f"trajectory {self.id!r}: states must be (T, d), got {states.shape}")
        if states.shape[0] < 2:
            raise NoData(f"trajectory {self.id!r}: need at least 2 states, got {states.shape[0]}")
        if not np.all(np.isfinite(states)):
            raise NonFiniteInput(f"trajectory {self.id!r} contains non-finite states")
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise ValueError(f"trajectory {self.id!r}: dt must be positive, got {self.dt}")
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    @property
    def d(self) -> int:
        return self.states.shape[1]

    def __len__(self):
        return self.states.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    def head(self, n: int) -> "Trajectory":
        """First ``n`` states as a new trajectory."""
        return Trajectory(self.id, self.dt, self.states[:n], self.t0)


class Transition(NamedTuple):
    x1: np.ndarray
    x2: np.ndarray
    source: tuple


@dataclass(frozen=True, eq=False)
class TransitionBank:
    """Immutable memory bank of ``M`` transitions in ``R^d``.

    Attributes
    ----------
    x1, x2 : ndarray of shape (M, d)
        Start and end states of every transition.
    sources : tuple of (str, int)
        ``(trajectory id, step index)`` of each transition.
    scale : ndarray of shape (d,)
        Per-coordinate standard deviation of all stored states; zero marks
        a constant coordinate.
    metadata : dict
    """

    x1: np.ndarray
    x2: np.ndarray
    sources: tuple = ()
    metadata: dict = field(default_factory=dict)
    scale: np.ndarray = field(init=False)

    def __post_init__(self):
        x1 = np.array(self.x1, dtype=float)
        x2 = np.array(self.x2, dtype=float)
        if x1.ndim != 2 or x2.ndim != 2:
            raise DimensionMismatch("x1 and x2 must be 2-D arrays")
        if x1.shape[0] == 0:
            raise NoData("bank has no transitions")
        if x1.shape != x2.shape:
            raise DimensionMismatch(f"x1 {x1.shape} and x2 {x2.shape} differ")
        if x1.shape[1] < 1:
            raise DimensionMismatch("state dimension must be >= 1")
        if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(x2))):
            raise NonFiniteInput("bank contains non-finite values")
        sources = tuple((str(s[0]), int(s[1])) for s in self.sources)
        if not sources:
            sources = tuple(("", j) for j in range(x1.shape[0]))
        if len(sources) != x1.shape[0]:
            raise DimensionMismatch(f"{len(sources)} sources for {x1.shape[0]} transitions")
        with np.errstate(over="ignore", invalid="ignore"):
            scale = np.vstack([x1, x2]).std(axis=0)
        constant = scale == 0
        if np.any(constant):
            logger.warning("constant coordinate(s) %s in bank; scale recorded as 0",
                           np.flatnonzero(constant).tolist())
        for a in (x1, x2, scale):
            a.setflags(write=False)
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "x2", x2)
        object.__setattr__(self, "sources", sources)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def M(self) -> int:
        return self.x1.shape[0]

    @property
    def d(self) -> int:
        return self.x1.shape[1]

    @property
    def increments(self) -> np.ndarray:
        return self.x2 - self.x1

    @property
    def constant_coordinates(self) -> np.ndarray:
        return np.flatnonzero(self.scale == 0)

    def __len__(self):
        return self.M

    def __getitem__(self, j) -> Transition:
        return Transition(self.x1[j], self.x2[j], self.sources[j])

    def __eq__(self, other):
        if not isinstance(other, TransitionBank):
            return NotImplemented
        return (np.array_equal(self.x1, other.x1) and np.array_equal(self.x2, other.x2)
                and self.sources == other.sources)

    def subset(self, idx) -> "TransitionBank":
        idx = np.asarray(idx)
        return TransitionBank(self.x1[idx], self.x2[idx],
                              tuple(self.sources[i] for i in idx), self.metadata)

    def content_hash(self) -> str:
        """SHA-256 over dimension and the raw float64 payload."""
        h = hashlib.sha256()
        h.update(np.int64([self.M, self.d]).tobytes())
        h.update(np.ascontiguousarray(self.x1, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.x2, dtype="<f8").tobytes())
        return h.hexdigest()

    def mean_scale(self) -> float:
        """Mean of the nonzero per-coordinate scales (1.0 if all are zero)."""
        nz = self.scale[self.scale > 0]
        if nz.size == 0:
            logger.warning("all coordinates constant; using unit scale")
            return 1.0
        return float(nz.mean())

    def default_bandwidths(self) -> tuple[float, float]:
        """Data-scaled ``(sigma_min, sigma)`` defaults."""
        s = self.mean_scale()
        return 0.02 * s, 0.1 * s


def extract_transitions(trajectories: Sequence[Trajectory]) -> TransitionBank:
    """Flatten consecutive state pairs of all trajectories into a bank.

    Ordering is trajectory order, then step order, so transition ``j`` and
    ``j + 1`` from the same trajectory share ``x2[j] == x1[j + 1]``.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise NoData("no trajectories given")
    d = trajectories[0].d
    for tr in trajectories:
        if tr.d != d:
            raise DimensionMismatch(f"trajectory {tr.id!r} has d={tr.d}, expected {d}")
    x1 = np.concatenate([tr.states[:-1] for tr in trajectories])
    x2 = np.concatenate([tr.states[1:] for tr in trajectories])
    sources = tuple((tr.id, tau) for tr in trajectories for tau in range(len(tr) - 1))
    meta = {
        "m_convention": M_CONVENTION,
        "n_trajectories": len(trajectories),
        "dt": [tr.dt for tr in trajectories],
    }
    return TransitionBank(x1, x2, sources, meta)


def _row_lines(rows):
    return ",\n".join("    " + json.dumps([float(v) for v in r]) for r in rows)


def save_bank(bank: TransitionBank, path) -> None:
    """Write ``bank`` as JSON, one record per line.

    Floats are written with ``repr`` precision so reloading is bit-exact.
    """
    path = Path(path)
    head = {"version": BANK_FORMAT_VERSION, "d": bank.d, "M": bank.M,
            "hash": bank.content_hash(), "metadata": bank.metadata}
    parts = ["{"]
    for k, v in head.items():
        parts.append(f"  {json.dumps(k)}: {json.dumps(v)},")
    parts.append('  "x1": [\n' + _row_lines(bank.x1) + "\n  ],")
    parts.append('  "x2": [\n' + _row_lines(bank.x2) + "\n  ],")
    parts.append('  "sources": [\n' + ",\n".join(
        "    " + json.dumps(list(s)) for s in bank.sources) + "\n  ]")
    parts.append("}")
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(parts) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write bank to {path}: {exc}") from exc


def _record_line(lines, key, k):
    """1-based line number of record ``k`` under ``key`` in our own layout."""
    marker = f'"{key}": ['
    for i, line in enumerate(lines):
        if line.strip().startswith(marker):
            return i + 2 + k
    return None


def load_bank(path) -> TransitionBank:
    """Read a bank written by :func:`save_bank` and re-validate it."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoError(f"cannot read bank {path}: {exc}") from exc
    if not text.strip():
        raise NoData(f"{path} is empty")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from exc
    if not isinstance(obj, dict):
        raise ParseError("top level must be an object", line=1)
    lines = text.splitlines()
    x1 = obj.get("x1", [])
    x2 = obj.get("x2", [])
    if obj.get("M") == 0 or len(x1) == 0:
        raise NoData(f"{path} holds no transitions")
    if len(x1) != len(x2):
        raise ParseError(f"x1 has {len(x1)} records but x2 has {len(x2)}")
    d = obj.get("d")
    for key, rows in (("x1", x1), ("x2", x2)):
        for k, row in enumerate(rows):
            line = _record_line(lines, key, k)
            if not isinstance(row, list) or not all(
                    isinstance(v, (int, float)) and not isinstance(v, bool) for v in row):
                raise ParseError(f"{key}[{k}] is not a list of numbers", line=line)
            if d is None:
                d = len(row)
            if len(row) != d:
                raise DimensionMismatch(
                    f"{key}[{k}] has {len(row)} entries, expected d={d}"
                    + (f" (line {line})" if line else ""))
    if obj.get("M") is not None and obj["M"] != len(x1):
        raise ParseError(f"header M={obj['M']} but {len(x1)} records found")
    sources = obj.get("sources") or ()
    bank = TransitionBank(np.array(x1, dtype=float), np.array(x2, dtype=float),
                          tuple(tuple(s) for s in sources), obj.get("metadata", {}))
    return bank


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """CSV with header ``t,x0,...,x{d-1}``."""
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{i}" for i in range(traj.d)])
            for t, row in zip(traj.times, traj.states):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
    except OSError as exc:
        raise IoError(f"cannot write trajectory to {path}: {exc}") from exc


def read_trajectory_csv(path, id: str | None = None) -> Trajectory:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read trajectory {path}: {exc}") from exc
    if not rows:
        raise NoData(f"{path} is empty")
    header = rows[0]
    if not header or header[0] != "t":
        raise ParseError("header must start with 't'", line=1)
    d = len(header) - 1
    data = []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d + 1:
            raise DimensionMismatch(f"{path} line {i}: {len(row)} fields, expected {d + 1}")
        try:
            data.append([float(v) for v in row])
        except ValueError as exc:
            raise ParseError(str(exc), line=i) from exc
    if len(data) < 2:
        raise NoData(f"{path}: need at least 2 rows")
    arr = np.array(data)
    dts = np.diff(arr[:, 0])
    dt = float(dts.mean())
    if not np.allclose(dts, dt, rtol=1e-6, atol=0):
        raise ParseError(f"{path}: non-uniform time stamps")
    return Trajectory(id or path.stem, dt, arr[:, 1:], float(arr[0, 0]))


def list_trajectory_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise IoError(f"{directory} is not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix == ".csv")


def read_trajectories(directory) -> list[Trajectory]:
    files = list_trajectory_files(directory)
    if not files:
        raise IoError(f"no trajectory CSVs in {directory}")
    return [read_trajectory_csv(p) for p in files]


__all__ = [
    "Trajectory", "Transition", "TransitionBank", "extract_transitions",
    "save_bank", "load_bank", "write_trajectory_csv", "read_trajectory_csv",
    "read_trajectories", "list_trajectory_files", "M_CONVENTION",
]
