"""Online policy-learning harness with periodic change-point re-detection.

Data arrive in fixed-length batches after the offline horizon. Before each
new batch the harness re-detects the most recent change on the data since the
previous estimate, refits a tree-Q policy on the post-change segment, and
generates the next batch epsilon-greedily. Baselines swap only the
change-point rule (all data / uniform random / true schedule) or replace
detection entirely with recency-weighted resampling (kernel). All methods
within a replication consume identical environment and exploration noise
streams, so value differences are policy-driven.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detect import scan
from .errors import NumericError
from .inference import TestConfig
from .rng import (STREAM_DETECT, STREAM_ENV, STREAM_EXPLORE, STREAM_KERNEL,
                  STREAM_RANDOM_CP, STREAM_SCHEDULE, derive_seed, make_rng)
from .sim import ScenarioSpec, make_env, sample_change_schedule, step_env
from .tree import TreePolicy, cross_validate_tree, fit_tree_fqi, tree_q_values
from .trajectory import Dataset, TransitionBatch, slice_interval

METHODS = ("proposed", "overall", "random", "oracle", "kernel")


@dataclass(frozen=True)
class OnlineConfig:
    """Settings of the online loop for one method."""

    batch_len: int = 25
    n_batches: int = 8
    explore_eps: float = 0.1
    method: str = "proposed"
    kernel_h: float = 0.4
    kernel_draw_factor: int = 10   # resample size = factor * N * T_now
    kernel_bandwidths: tuple[float, ...] = (0.0, 0.1, 0.2, 0.4, 0.8, 1.6)
    tree_max_depth: int = 5
    tree_min_leaf: int = 50
    tree_iters: int = 50
    tree_cv: bool = False
    tree_depth_grid: tuple[int, ...] = (3, 5, 6)
    tree_leaf_grid: tuple[int, ...] = (50, 60, 80)
    alpha: float = 0.05
    offline_kappas: tuple[int, ...] = ()
    kappa_min: int = 25
    kappa_step: int = 25
    change_rate: float = 1.0 / 50.0
    stat_kind: str = "integral"
    test: TestConfig = field(default_factory=lambda: TestConfig(n_boot=200, n_reps=2))

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not 0.0 <= self.explore_eps < 1.0:
            raise ValueError("explore_eps must lie in [0, 1)")
        if self.method == "kernel" and self.kernel_h not in self.kernel_bandwidths:
            raise ValueError(
                f"kernel_h must come from {self.kernel_bandwidths}")

    def t_end(self, horizon: int) -> int:
        return horizon + self.batch_len * self.n_batches


@dataclass
class ValueTrace:
    """Per-subject rewards collected after the offline horizon."""

    method: str
    rewards: np.ndarray            # (N, t_end - T)
    t_star_trace: list
    t_offline: int

    @property
    def value(self) -> float:
        return float(self.rewards.sum(axis=1).mean())


def evaluate_value(trace: ValueTrace, discount: float | None = None) -> dict:
    """Average (and optionally discount-normalized) return over subjects."""
    out = {"method": trace.method, "value": trace.value,
           "n_subjects": int(trace.rewards.shape[0])}
    if discount is not None:
        weights = discount ** np.arange(trace.rewards.shape[1])
        out["value_discounted_normalized"] = float(
            (1.0 - discount) * (trace.rewards @ weights).mean())
    return out


def kernel_fqi(ds: Dataset, h: float, max_depth: int, min_leaf: int,
               discount: float, seed: int, latest_len: int,
               draw_factor: int = 10, k_max_tree: int = 50) -> TreePolicy:
    """Tree-Q fit on a recency-weighted resample of all transitions.

    Row weights follow a Gaussian kernel in ``(T_now - t) / (T_now * h)``;
    ``h = 0`` degenerates to resampling the latest batch only.
    """
    t_now = ds.horizon
    batch = slice_interval(ds, ds.t0, t_now)
    if h == 0.0:
        weights = (batch.t_idx >= t_now - latest_len).astype(np.float64)
    else:
        x = (t_now - batch.t_idx) / (t_now * h)
        weights = np.exp(-x * x)
    weights = weights / weights.sum()
    n_samples = draw_factor * ds.n_traj * t_now
    rng = make_rng(seed)
    rows = rng.choice(batch.n_rows, size=n_samples, replace=True, p=weights)
    rows = np.sort(rows)
    resampled = TransitionBatch(
        s=batch.s[rows], a=batch.a[rows], r=batch.r[rows],
        s_next=batch.s_next[rows], t1=batch.t1, t2=batch.t2,
        i_idx=batch.i_idx[rows], t_idx=batch.t_idx[rows])
    return fit_tree_fqi(resampled, max_depth, min_leaf, discount, ds.m,
                        k_max_tree=k_max_tree)


def _fit_policy(ds: Dataset, t_from: int, t_to: int, cfg: OnlineConfig,
                seed: int) -> TreePolicy:
    batch = slice_interval(ds, t_from, t_to)
    depth, leaf = cfg.tree_max_depth, cfg.tree_min_leaf
    if cfg.tree_cv:
        depth, leaf = cross_validate_tree(
            batch, cfg.tree_depth_grid, cfg.tree_leaf_grid,
            cfg.test.discount, ds.m, folds=5, seed=seed,
            k_max_tree=cfg.tree_iters)
    return fit_tree_fqi(batch, depth, leaf, cfg.test.discount, ds.m,
                        k_max_tree=cfg.tree_iters)


def _default_offline_kappas(cfg: OnlineConfig, horizon: int) -> tuple[int, ...]:
    if cfg.offline_kappas:
        return tuple(k for k in cfg.offline_kappas if k <= horizon)
    return tuple(k for k in range(25, 76, 5) if k <= horizon)


def _detect_change(ds: Dataset, prev: int, t_hi: int, kappas, cfg: OnlineConfig,
                   seed: int) -> int:
    """Run the detector on [prev, t_hi]; carry ``prev`` forward on failure."""
    kappas = [k for k in kappas if k <= t_hi - prev]
    if not kappas:
        return prev
    try:
        result = scan(ds, kappas, cfg.stat_kind, cfg.alpha, cfg.test, seed,
                      t_lo=prev, t_hi=t_hi, early_exit=True)
    except (ValueError, NumericError):
        return prev
    return result.t_hat


def run_online(offline_ds: Dataset, scenario: ScenarioSpec, cfg: OnlineConfig,
               master_seed: int) -> ValueTrace:
    """Run the batched learn/detect loop for one method and one seed."""
    n, t_offline = offline_ds.n_traj, offline_ds.horizon
    t_end = cfg.t_end(t_offline)
    horizon_online = t_end - t_offline

    schedule = sample_change_schedule(t_offline, t_end, cfg.change_rate,
                                      derive_seed(master_seed, STREAM_SCHEDULE))
    envs = [make_env(scenario.kind, scenario.delta_signal, scenario.noise_sd,
                     schedule, offline_ds.states[i, t_offline, 0], t_offline,
                     derive_seed(master_seed, STREAM_ENV, i))
            for i in range(n)]
    explore_rngs = [make_rng(master_seed, STREAM_EXPLORE, i) for i in range(n)]

    # growing copies of the data arrays
    states = np.zeros((n, t_end + 1, 1))
    actions = np.zeros((n, t_end), dtype=np.int64)
    rewards = np.zeros((n, t_end))
    states[:, : t_offline + 1] = offline_ds.states
    actions[:, :t_offline] = offline_ds.actions
    rewards[:, :t_offline] = offline_ds.rewards

    def dataset_up_to(t: int) -> Dataset:
        return Dataset(states=states[:, : t + 1], actions=actions[:, :t],
                       rewards=rewards[:, :t], t0=0, m=offline_ds.m)

    def detect_for_method(ds_now: Dataset, prev: int, t_hi: int, kappas,
                          k: int) -> int:
        if cfg.method == "overall":
            return 0
        if cfg.method == "random":
            rng = make_rng(master_seed, STREAM_RANDOM_CP, k)
            return int(rng.integers(prev, max(prev + 1, t_hi - 1)))
        if cfg.method == "oracle":
            # a change at t first shows up in the transition sourced at t
            past = [scenario.t_star] + [c for c in schedule if c <= t_hi - 1]
            return max(past)
        if cfg.method == "kernel":
            return prev  # unused; the kernel fit weighs all data itself
        return _detect_change(ds_now, prev, t_hi, kappas, cfg,
                              derive_seed(master_seed, STREAM_DETECT, k))

    ds_now = dataset_up_to(t_offline)
    t_star = detect_for_method(ds_now, 0, t_offline,
                               _default_offline_kappas(cfg, t_offline), 0)
    t_star_trace = [t_star]
    if cfg.method == "kernel":
        policy = kernel_fqi(ds_now, cfg.kernel_h, cfg.tree_max_depth,
                            cfg.tree_min_leaf, cfg.test.discount,
                            derive_seed(master_seed, STREAM_KERNEL, 0),
                            latest_len=cfg.batch_len,
                            draw_factor=cfg.kernel_draw_factor,
                            k_max_tree=cfg.tree_iters)
    else:
        policy = _fit_policy(ds_now, t_star, t_offline, cfg,
                             derive_seed(master_seed, STREAM_KERNEL, 0))

    in_loop_kappas = tuple(range(cfg.kappa_min,
                                 cfg.batch_len * cfg.n_batches + t_offline,
                                 cfg.kappa_step))
    m = offline_ds.m
    for k in range(1, cfg.n_batches + 1):
        start = t_offline + (k - 1) * cfg.batch_len
        for t in range(start, start + cfg.batch_len):
            q_table = tree_q_values(policy, states[:, t])
            greedy = np.argmax(q_table, axis=1)
            for i in range(n):
                u = explore_rngs[i].random()
                a_rand = int(explore_rngs[i].integers(m))
                a = a_rand if u < cfg.explore_eps else int(greedy[i])
                s_next, r = step_env(envs[i], a)
                actions[i, t] = a
                rewards[i, t] = r
                states[i, t + 1, 0] = s_next
        current_end = start + cfg.batch_len
        if k == cfg.n_batches:
            break
        ds_now = dataset_up_to(current_end)
        t_star = detect_for_method(ds_now, t_star, current_end, in_loop_kappas, k)
        t_star_trace.append(t_star)
        if cfg.method == "kernel":
            policy = kernel_fqi(ds_now, cfg.kernel_h, cfg.tree_max_depth,
                                cfg.tree_min_leaf, cfg.test.discount,
                                derive_seed(master_seed, STREAM_KERNEL, k),
                                latest_len=cfg.batch_len,
                                draw_factor=cfg.kernel_draw_factor,
                                k_max_tree=cfg.tree_iters)
        else:
            policy = _fit_policy(ds_now, t_star, current_end, cfg,
                                 derive_seed(master_seed, STREAM_KERNEL, k))

    return ValueTrace(method=cfg.method,
                      rewards=rewards[:, t_offline:t_end].copy(),
                      t_star_trace=t_star_trace, t_offline=t_offline)
