"""Generative environments with controlled nonstationarity.

Four one-dimensional scenarios with binary actions (change at ``t_star``):

    (1) transition ``s' = 0.5*a*s + z`` throughout; reward jumps from
        ``-1.5*d*a*s`` to ``d*a*s``;
    (2) like (1) but the reward blends smoothly over the stretch
        ``[t_star - smooth_frac*T, t_star)``;
    (3) reward ``0.25*d*a*s^2 + 4*s`` throughout; transition jumps from
        ``-0.5*d*a*s + z`` to ``0.5*d*a*s + z``;
    (4) like (3) but the transition blends smoothly.

``d`` is the signal scale on every action-interaction term. A second
generator mimics a mobile-health study: a four-dimensional state (current
and lagged square-root step count, sleep, mood) evolving through one of two
affine transition matrices around ``t_star``, reward equal to the first
state coordinate.

A steppable environment continues a scenario past the offline horizon,
flipping the sign of the action effect at scheduled change points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import make_rng
from .trajectory import Dataset


@dataclass(frozen=True)
class ScenarioSpec:
    """Configuration of one synthetic scenario draw."""

    kind: int
    n_traj: int
    horizon: int
    t_star: int
    delta_signal: float = 1.0
    smooth_frac: float = 0.1
    noise_sd: float = 0.5
    init_sd: float = math.sqrt(0.5)
    behavior_p: float = 0.5

    def __post_init__(self):
        if self.kind not in (1, 2, 3, 4):
            raise ValueError("scenario kind must be 1, 2, 3 or 4")
        if not 0 < self.t_star <= self.horizon:
            raise ValueError("need 0 < t_star <= horizon")
        if not 0.0 <= self.smooth_frac < 0.5:
            raise ValueError("smooth_frac must lie in [0, 0.5)")


def smooth_step(x) -> np.ndarray | float:
    """Infinitely differentiable ramp: 0 for x <= 0, 1 for x >= 1."""
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.zeros_like(x)
    out[x >= 1.0] = 1.0
    mid = (x > 0.0) & (x < 1.0)
    if np.any(mid):
        xm = x[mid]
        with np.errstate(divide="ignore", over="ignore", under="ignore"):
            a = np.exp(-1.0 / xm)
            b = np.exp(-1.0 / (1.0 - xm))
        out[mid] = a / (a + b)
    return float(out[0]) if scalar else out


def smooth_interp(f1, f2, s0: float, s1: float, x: float) -> float:
    """Blend two scalar functions across ``[s0, s1]`` with a smooth join."""
    if s0 >= s1:
        raise ValueError("need s0 < s1")
    w = smooth_step((x - s0) / (s1 - s0))
    v1 = f1(x)
    return v1 + (f2(x) - v1) * w


def _reward_weight(spec: ScenarioSpec, t: np.ndarray | int) -> np.ndarray:
    """Mixing weight of the post-change regime at time t (scenario 2/4)."""
    width = spec.smooth_frac * spec.horizon
    if width <= 0:
        return np.where(np.asarray(t) >= spec.t_star, 1.0, 0.0)
    return smooth_step((np.asarray(t, dtype=np.float64) - (spec.t_star - width)) / width)


def gen_scenario(spec: ScenarioSpec, seed: int) -> Dataset:
    """Simulate one offline dataset under the configured scenario."""
    rng = make_rng(seed)
    n, T = spec.n_traj, spec.horizon
    d_sig = spec.delta_signal
    states = np.zeros((n, T + 1, 1))
    states[:, 0, 0] = rng.normal(0.0, spec.init_sd, size=n)
    actions = (rng.random((n, T)) < spec.behavior_p).astype(np.int64)
    noise = rng.normal(0.0, spec.noise_sd, size=(n, T))
    rewards = np.zeros((n, T))

    for t in range(T):
        s = states[:, t, 0]
        a = actions[:, t]
        if spec.kind in (1, 2):
            r_pre = -1.5 * d_sig * a * s
            r_post = d_sig * a * s
            if spec.kind == 1:
                w = 1.0 if t >= spec.t_star else 0.0
            else:
                w = float(_reward_weight(spec, t))
            rewards[:, t] = r_pre + (r_post - r_pre) * w
            states[:, t + 1, 0] = 0.5 * a * s + noise[:, t]
        else:
            rewards[:, t] = 0.25 * d_sig * a * s * s + 4.0 * s
            f_pre = -0.5 * d_sig * a * s
            f_post = 0.5 * d_sig * a * s
            if spec.kind == 3:
                w = 1.0 if t >= spec.t_star else 0.0
            else:
                w = float(_reward_weight(spec, t))
            states[:, t + 1, 0] = f_pre + (f_post - f_pre) * w + noise[:, t]
    return Dataset(states=states, actions=actions, rewards=rewards, t0=0, m=2)


# -- mobile-health style generator -------------------------------------------

# 3x5 affine maps on (1, steps, sleep, mood, lagged_steps); the second matrix
# takes over at t_star and reverses the action effect.
_IHS_BASE_1 = np.array([
    [10.0, 0.4, 0.1, -0.04, 0.1],
    [11.0, 0.05, 0.0, 0.4, 0.0],
    [1.2, -0.02, 0.0, 0.03, 0.8],
])
_IHS_ACT_1 = np.array([
    [0.6, 0.3, -0.1, 0.0, 0.0],
    [-0.4, 0.0, 0.0, 0.0, 0.0],
    [-0.5, 0.0, 0.0, 0.03, 0.0],
])
_IHS_BASE_2 = np.array([
    [10.0, 0.4, 0.1, 0.04, -0.1],
    [11.0, 0.05, 0.0, 0.4, 0.0],
    [1.2, -0.02, 0.0, 0.03, 0.8],
])
_IHS_ACT_2 = np.array([
    [-0.6, -0.3, 0.1, 0.0, 0.0],
    [-0.4, 0.0, 0.0, 0.0, 0.0],
    [0.5, 0.0, 0.0, -0.03, 0.0],
])
_IHS_NOISE_SD = np.sqrt(np.array([1.0, 1.0, 0.2]))
_IHS_INIT_MEAN = np.array([20.0, 20.0, 7.0])
_IHS_INIT_SD = np.sqrt(np.array([3.0, 2.0, 1.0]))
IHS_BEHAVIOR_P = 0.25


def ihs_transition_matrix(regime: int, a: int) -> np.ndarray:
    """The 3x5 affine map applied before (regime 1) or after (regime 2) the change."""
    if regime == 1:
        return _IHS_BASE_1 + a * _IHS_ACT_1
    if regime == 2:
        return _IHS_BASE_2 + a * _IHS_ACT_2
    raise ValueError("regime must be 1 or 2")


def gen_ihs(n_traj: int, horizon: int, t_star: int, seed: int) -> Dataset:
    """Simulate the four-variable mobile-health style process.

    State: (steps_t, sleep_t, mood_t, steps_{t-1}); the lagged coordinate is
    copied forward each step. Reward is steps_t. The transition switches
    matrices at ``t_star``; actions are Bernoulli(0.25).
    """
    if horizon <= t_star:
        raise ValueError("need horizon > t_star")
    rng = make_rng(seed)
    states = np.zeros((n_traj, horizon + 1, 4))
    states[:, 0, :3] = rng.normal(_IHS_INIT_MEAN, _IHS_INIT_SD, size=(n_traj, 3))
    # no observation exists before t=0; draw the lag from the steps law
    states[:, 0, 3] = rng.normal(_IHS_INIT_MEAN[0], _IHS_INIT_SD[0], size=n_traj)
    actions = (rng.random((n_traj, horizon)) < IHS_BEHAVIOR_P).astype(np.int64)
    noise = rng.normal(0.0, _IHS_NOISE_SD, size=(n_traj, horizon, 3))
    rewards = np.zeros((n_traj, horizon))

    ones = np.ones(n_traj)
    for t in range(horizon):
        s = states[:, t, :]
        a = actions[:, t]
        base, act = ((_IHS_BASE_1, _IHS_ACT_1) if t < t_star
                     else (_IHS_BASE_2, _IHS_ACT_2))
        aug = np.column_stack([ones, s])  # (n, 5)
        core = aug @ base.T + (a[:, None] * (aug @ act.T))
        states[:, t + 1, :3] = core + noise[:, t]
        states[:, t + 1, 3] = s[:, 0]
        rewards[:, t] = s[:, 0]
    return Dataset(states=states, actions=actions, rewards=rewards, t0=0, m=2)


# -- steppable online environment ---------------------------------------------

def sample_change_schedule(t_start: int, t_end: int, rate: float,
                           seed: int) -> tuple[int, ...]:
    """Integer change times from a Poisson process on (t_start, t_end)."""
    rng = make_rng(seed)
    times = []
    t = float(t_start)
    while True:
        t += rng.exponential(1.0 / rate)
        if t >= t_end:
            break
        times.append(int(math.ceil(t)))
    return tuple(sorted(set(times)))


@dataclass
class EnvState:
    """One subject's mutable simulation state for the online phase.

    The action-effect sign starts at +1 (the post-change regime of the
    offline scenario) and flips whenever ``t`` reaches a scheduled change.
    """

    kind: int
    delta_signal: float
    noise_sd: float
    schedule: tuple[int, ...]
    state: float
    t: int
    rng: np.random.Generator
    sign: float = 1.0
    _next_change: int = field(default=0, init=False)

    def __post_init__(self):
        if any(s2 <= s1 for s1, s2 in zip(self.schedule, self.schedule[1:])):
            raise ValueError("schedule must be strictly increasing")


def make_env(kind: int, delta_signal: float, noise_sd: float, schedule,
             init_state: float, t_start: int, seed: int) -> EnvState:
    return EnvState(kind=kind, delta_signal=delta_signal, noise_sd=noise_sd,
                    schedule=tuple(int(s) for s in schedule),
                    state=float(init_state), t=int(t_start),
                    rng=make_rng(seed))


def step_env(env: EnvState, a: int) -> tuple[float, float]:
    """Advance one step; returns (next_state, reward).

    Consumes exactly one normal draw per call regardless of the action, so
    paired runs across methods share identical noise streams.
    """
    while env._next_change < len(env.schedule) and env.schedule[env._next_change] <= env.t:
        env.sign = -env.sign
        env._next_change += 1
    s, d_sig = env.state, env.delta_signal
    z = env.rng.normal(0.0, env.noise_sd)
    if env.kind in (1, 2):
        reward = env.sign * d_sig * a * s
        next_state = 0.5 * a * s + z
    else:
        reward = 0.25 * d_sig * a * s * s + 4.0 * s
        next_state = env.sign * 0.5 * d_sig * a * s + z
    env.state = next_state
    env.t += 1
    return next_state, reward
