"""In-memory model for offline RL trajectories plus CSV round-trip I/O.

A :class:`Dataset` holds N aligned trajectories over a common time grid:
states ``S[i, t]`` for ``t = 0..T``, and actions/rewards ``A[i, t]``,
``R[i, t]`` for ``t = 0..T-1``. All downstream estimation consumes
:class:`TransitionBatch` slices of a dataset.

CSV schema: header ``i,t,a,r,s1,...,sd``; one row per ``(i, t)`` for
``t = 0..T-1`` carrying the state at ``t``, plus one trailing row per
trajectory with ``t = T`` and empty ``a``/``r`` carrying the final state.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class ParseError(ValueError):
    """Malformed trajectory file."""


@dataclass(frozen=True)
class Dataset:
    """Offline dataset of N trajectories over a common horizon.

    Attributes:
        states: float array (N, T+1, d).
        actions: int array (N, T), values in ``[0, m)``.
        rewards: float array (N, T).
        t0: earliest usable time index, ``0 <= t0 < T``.
        m: number of available actions.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    t0: int = 0
    m: int = 2

    def __post_init__(self):
        states = np.ascontiguousarray(np.asarray(self.states, dtype=np.float64))
        actions = np.ascontiguousarray(np.asarray(self.actions, dtype=np.int64))
        rewards = np.ascontiguousarray(np.asarray(self.rewards, dtype=np.float64))
        if states.ndim != 3:
            raise ValueError("states must have shape (N, T+1, d)")
        n, t_plus_1, _ = states.shape
        if actions.shape != (n, t_plus_1 - 1) or rewards.shape != (n, t_plus_1 - 1):
            raise ValueError(
                "actions/rewards must have shape (N, T) with states (N, T+1, d); "
                f"got states {states.shape}, actions {actions.shape}, rewards {rewards.shape}"
            )
        if n == 0 or t_plus_1 < 2:
            raise ValueError("dataset needs N >= 1 trajectories and T >= 1 steps")
        if actions.size and (actions.min() < 0 or actions.max() >= self.m):
            raise ValueError(f"actions must lie in [0, {self.m})")
        if not 0 <= self.t0 < t_plus_1 - 1:
            raise ValueError(f"t0={self.t0} out of range for T={t_plus_1 - 1}")
        for arr in (states, actions, rewards):
            arr.flags.writeable = False  # shared read access from workers
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "rewards", rewards)

    @property
    def n_traj(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        """Number of decision times T (states run up to index T)."""
        return self.states.shape[1] - 1

    @property
    def state_dim(self) -> int:
        return self.states.shape[2]


@dataclass(frozen=True)
class TransitionBatch:
    """Transitions ``(s, a, r, s_next)`` flattened over a time interval.

    Rows cover source times ``t in [t1, t2)`` in i-major, then t, order.
    The state at ``t2`` appears only as ``s_next``.
    """

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    t1: int
    t2: int
    i_idx: np.ndarray
    t_idx: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.s.shape[0]

    @property
    def n_traj(self) -> int:
        return self.n_rows // (self.t2 - self.t1)

    @property
    def length(self) -> int:
        """Number of source time points in the interval."""
        return self.t2 - self.t1


@dataclass(frozen=True)
class ScalerParams:
    """Per-dimension standardization fitted on a time slice of states."""

    mean: np.ndarray
    std: np.ndarray
    t1: int
    t2: int

    def transform(self, states: np.ndarray) -> np.ndarray:
        return (states - self.mean) / self.std


def slice_interval(ds: Dataset, t1: int, t2: int) -> TransitionBatch:
    """Extract the transitions with source time ``t1 <= t < t2``."""
    if not (ds.t0 <= t1 < t2 <= ds.horizon):
        raise ValueError(
            f"interval [{t1}, {t2}) out of range for t0={ds.t0}, T={ds.horizon}"
        )
    n, length, d = ds.n_traj, t2 - t1, ds.state_dim
    s = ds.states[:, t1:t2, :].reshape(n * length, d)
    s_next = ds.states[:, t1 + 1 : t2 + 1, :].reshape(n * length, d)
    a = ds.actions[:, t1:t2].reshape(n * length)
    r = ds.rewards[:, t1:t2].reshape(n * length)
    i_idx = np.repeat(np.arange(n), length)
    t_idx = np.tile(np.arange(t1, t2), n)
    return TransitionBatch(s=s, a=a, r=r, s_next=s_next, t1=t1, t2=t2,
                           i_idx=i_idx, t_idx=t_idx)


def fit_scaler(ds: Dataset, t1: int, t2: int) -> ScalerParams:
    """Mean/SD of every state dimension over ``t in [t1, t2]`` (inclusive).

    Population SD convention (divide by n). Degenerate dimensions keep SD 1
    so the transform stays well defined.
    """
    if not (0 <= t1 < t2 <= ds.horizon):
        raise ValueError(f"interval [{t1}, {t2}] out of range")
    block = ds.states[:, t1 : t2 + 1, :].reshape(-1, ds.state_dim)
    mean = block.mean(axis=0)
    std = block.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return ScalerParams(mean=mean, std=std, t1=t1, t2=t2)


def standardize(ds: Dataset, scaler: ScalerParams) -> Dataset:
    """Dataset with states replaced by their standardized values."""
    return Dataset(
        states=scaler.transform(ds.states),
        actions=ds.actions,
        rewards=ds.rewards,
        t0=ds.t0,
        m=ds.m,
    )


def write_csv(ds: Dataset, path) -> None:
    d = ds.state_dim
    header = ["i", "t", "a", "r"] + [f"s{j + 1}" for j in range(d)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(ds.n_traj):
            for t in range(ds.horizon):
                row = [i, t, int(ds.actions[i, t]), repr(float(ds.rewards[i, t]))]
                row += [repr(float(x)) for x in ds.states[i, t]]
                writer.writerow(row)
            row = [i, ds.horizon, "", ""]
            row += [repr(float(x)) for x in ds.states[i, ds.horizon]]
            writer.writerow(row)


def read_csv(path, m: int | None = None, t0: int = 0) -> Dataset:
    """Parse a trajectory CSV written by :func:`write_csv`.

    Raises :class:`ParseError` with the offending row number on malformed
    rows, ragged trajectories, or out-of-range actions.
    """
    rows_by_traj: dict[int, dict[int, tuple]] = {}
    d = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("no trajectories: empty file")
        if len(header) < 5 or header[:4] != ["i", "t", "a", "r"]:
            raise ParseError(f"bad header {header!r}; expected i,t,a,r,s1,...")
        d = len(header) - 4
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4 + d:
                raise ParseError(f"row {lineno}: expected {4 + d} fields, got {len(row)}")
            try:
                i, t = int(row[0]), int(row[1])
                a = None if row[2] == "" else int(row[2])
                r = None if row[3] == "" else float(row[3])
                s = tuple(float(x) for x in row[4:])
            except ValueError as exc:
                raise ParseError(f"row {lineno}: {exc}") from exc
            if (a is None) != (r is None):
                raise ParseError(f"row {lineno}: a and r must be both present or both empty")
            rows_by_traj.setdefault(i, {})[t] = (a, r, s, lineno)
    if not rows_by_traj:
        raise ParseError("no trajectories")

    traj_ids = sorted(rows_by_traj)
    lengths = {i: max(rows_by_traj[i]) for i in traj_ids}
    horizon = lengths[traj_ids[0]]
    for i in traj_ids:
        if lengths[i] != horizon:
            raise ParseError(f"ragged trajectories: trajectory {i} ends at t={lengths[i]}, "
                             f"expected t={horizon}")
        if set(rows_by_traj[i]) != set(range(horizon + 1)):
            raise ParseError(f"trajectory {i}: missing or duplicate time indices")

    n = len(traj_ids)
    states = np.zeros((n, horizon + 1, d))
    actions = np.zeros((n, horizon), dtype=np.int64)
    rewards = np.zeros((n, horizon))
    for pos, i in enumerate(traj_ids):
        for t in range(horizon + 1):
            a, r, s, lineno = rows_by_traj[i][t]
            states[pos, t] = s
            if t < horizon:
                if a is None:
                    raise ParseError(f"row {lineno}: missing action/reward before t=T")
                actions[pos, t] = a
                rewards[pos, t] = r
            elif a is not None:
                raise ParseError(f"row {lineno}: trailing row t=T must have empty a,r")

    m_eff = m if m is not None else (int(actions.max()) + 1 if actions.size else 2)
    if actions.size and actions.max() >= m_eff:
        bad = int(actions.max())
        raise ParseError(f"action {bad} out of range for m={m_eff}")
    return Dataset(states=states, actions=actions, rewards=rewards, t0=t0, m=m_eff)
