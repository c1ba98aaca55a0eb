"""Multiplier bootstrap, p-values, and the end-to-end stationarity test.

One bootstrap replicate draws a standard-normal multiplier per observed
transition row of the tested window; the same multipliers feed both segment
sides of every candidate split. Each side contributes the coefficient vector

    solve(W, sum_rows features(a, s) * td_error * multiplier) / (N * length)

and the resulting Q-difference field is aggregated with exactly the weights,
evaluation set, and variance normalization of the observed statistic. The
p-value is ``(1 + #{draws >= observed}) / (B + 1)``.

Running a test repeats the whole procedure for ``n_reps`` independent feature
draws and combines the p-values through a quantile-of-scaled-p-values rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .fqi import FqiConfig, QCoefficients, cross_validate_basis
from .rng import (STREAM_BASIS, STREAM_BOOT, STREAM_CV, STREAM_MEDIAN,
                  STREAM_REP, derive_seed, make_rng)
from .teststat import (KINDS, ScanConfig, ScanWorkspace, SegmentFit,
                       build_workspace, candidate_grid, cusum_weight,
                       evaluate_statistics, solve_w)
from .trajectory import Dataset, TransitionBatch, fit_scaler, standardize
from . import sieve


@dataclass(frozen=True)
class BootstrapConfig:
    """Multiplier-bootstrap settings; multipliers are standard normal."""

    n_draws: int = 2000
    base_seed: int = 0

    def __post_init__(self):
        if self.n_draws < 1:
            raise ValueError("need at least one bootstrap draw")


@dataclass(frozen=True)
class TestConfig:
    """Everything one stationarity test needs besides the data and interval."""

    discount: float = 0.9
    epsilon: float = 0.1
    n_features: int = 5
    cv_candidates: tuple[int, ...] = ()
    cv_folds: int = 5
    n_boot: int = 2000
    n_reps: int = 4
    tau: float = 0.1
    u_stride: int = 0          # 0 -> 1 for windows up to 100 points, coarser beyond
    sigma_floor: float = 1e-8
    fqi_tol: float = 1e-4
    fqi_k_max: int = 0
    fqi_ridge: float | None = None
    median_max_points: int = 1000

    def fqi_config(self) -> FqiConfig:
        return FqiConfig(discount=self.discount, tol=self.fqi_tol,
                         k_max=self.fqi_k_max, ridge=self.fqi_ridge)

    def resolve_stride(self, window: int) -> int:
        if self.u_stride > 0:
            return self.u_stride
        return 1 if window <= 100 else math.ceil(window / 100)


@dataclass
class TestResult:
    """Outcome of one stationarity test on ``[t0, t_end]``."""

    kind: str
    statistic: float
    bootstrap_draws: np.ndarray
    p_value: float
    seed: int
    t0: int
    t_end: int
    u_grid: tuple[int, ...]
    n_features: int
    gamma_rbf: float
    all_converged: bool
    diagnostics: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        qs = np.quantile(self.bootstrap_draws, [0.0, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99, 1.0])
        return {
            "kind": self.kind,
            "statistic": self.statistic,
            "p_value": self.p_value,
            "n_draws": int(self.bootstrap_draws.size),
            "draw_quantiles": {str(q): float(v) for q, v in
                               zip((0.0, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99, 1.0), qs)},
            "seed": self.seed,
            "t0": self.t0,
            "t_end": self.t_end,
            "u_grid": list(self.u_grid),
            "n_features": self.n_features,
            "gamma_rbf": self.gamma_rbf,
            "all_converged": self.all_converged,
            "diagnostics": self.diagnostics,
        }


def bootstrap_q_draw(batch: TransitionBatch, spec, w: np.ndarray,
                     delta: np.ndarray, multipliers: np.ndarray) -> np.ndarray:
    """Coefficients of one bootstrap Q draw for a single segment."""
    m, M = spec.m, spec.n_features
    weighted = delta * multipliers
    rhs = np.zeros(m * M)
    phi = spec.state_features(batch.s)
    for a in range(m):
        rows = np.flatnonzero(batch.a == a)
        if rows.size:
            rhs[a * M : (a + 1) * M] = phi[rows].T @ weighted[rows]
    return solve_w(w, rhs) / (batch.n_traj * batch.length)


def p_value(ts: float, draws: np.ndarray) -> float:
    """Add-one empirical tail probability; ties count as exceedances."""
    draws = np.asarray(draws, dtype=np.float64)
    if draws.size == 0:
        raise ValueError("need at least one bootstrap draw")
    return (1.0 + int(np.sum(draws >= ts))) / (draws.size + 1.0)


def aggregate_pvalues(pvals, tau: float) -> float:
    """Quantile-combine p-values from repeated feature draws.

    Sorts ``p / tau`` and takes the order statistic at index ``ceil(tau * r)``
    (1-based), capped at one.
    """
    p = np.sort(np.asarray(list(pvals), dtype=np.float64))
    if p.size == 0:
        raise ValueError("need at least one p-value")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    idx = max(1, math.ceil(tau * p.size))
    return min(1.0, p[idx - 1] / tau)


def _bootstrap_multi(ws: ScanWorkspace, cfg: ScanConfig, bcfg: BootstrapConfig,
                     kinds, multipliers: np.ndarray | None = None) -> dict:
    """All bootstrap statistics in one pass; one multiplier per window row."""
    n_rows = ws.batch.n_rows
    if multipliers is None:
        multipliers = make_rng(bcfg.base_seed).standard_normal((bcfg.n_draws, n_rows))
    B = multipliers.shape[0]
    n_traj = ws.batch.n_traj
    denom = n_traj * ws.t_end
    m, M = ws.spec.m, ws.spec.n_features

    acc = {k: np.zeros(B) for k in kinds}
    for j, fit in enumerate(ws.fits):
        weight = cusum_weight(fit.u, ws.t0, ws.t_end)
        coef_diff = np.zeros((m * M, B))
        for side, delta in (("left", fit.delta_left), ("right", fit.delta_right)):
            t1, t2 = ((ws.t0, fit.u) if side == "left" else (fit.u, ws.t_end))
            des = ws.design(t1, t2)
            mask = ws.mask(fit.u, side)
            scores = np.zeros((m * M, B))
            e_seg = multipliers[:, mask]
            scaled = des.phi_s * delta[:, None]
            for a, rows in enumerate(des.rows_by_action):
                if rows.size:
                    scores[a * M : (a + 1) * M] = scaled[rows].T @ e_seg[:, rows].T
            coef = ws.winv(j, side) @ scores / (des.batch.n_traj * des.batch.length)
            coef_diff += coef if side == "left" else -coef
        sig = ws.sigma_values(j, cfg.sigma_floor) if "norm" in kinds else None

        sums = np.zeros(B)
        max_plain = np.zeros(B)
        max_norm = np.zeros(B)
        for a in range(m):
            vals = np.abs(ws.phi_s @ coef_diff[a * M : (a + 1) * M])  # (n, B)
            if "integral" in kinds:
                sums += vals[ws.rows_by_action[a]].sum(axis=0)
            if "max" in kinds:
                np.maximum(max_plain, vals.max(axis=0), out=max_plain)
            if "norm" in kinds:
                np.maximum(max_norm, (vals / sig[a][:, None]).max(axis=0), out=max_norm)
        if "integral" in kinds:
            np.maximum(acc["integral"], weight * sums / denom, out=acc["integral"])
        if "max" in kinds:
            np.maximum(acc["max"], weight * max_plain, out=acc["max"])
        if "norm" in kinds:
            np.maximum(acc["norm"], weight * max_norm, out=acc["norm"])
    return acc


def bootstrap_statistics(ds: Dataset, fits: list[SegmentFit], spec, kind: str,
                         bcfg: BootstrapConfig, cfg: ScanConfig,
                         multipliers: np.ndarray | None = None) -> np.ndarray:
    """Bootstrap draws of one statistic over the fitted splits."""
    t0, t_end = fits[0].left.t1, fits[0].right.t2
    ws = build_workspace(ds, t0, t_end, spec, None, [f.u for f in fits], fits=fits)
    return _bootstrap_multi(ws, cfg, bcfg, (kind,), multipliers=multipliers)[kind]


def run_test_multi(ds: Dataset, t0: int, t_end: int, seed: int, cfg: TestConfig,
                   kinds=KINDS) -> dict[str, TestResult]:
    """One feature draw, all requested statistics (they share the fits)."""
    if not (0 <= t0 < t_end <= ds.horizon):
        raise ValueError(f"tested interval [{t0}, {t_end}] out of range")
    window = t_end - t0
    stride = cfg.resolve_stride(window)
    u_grid = candidate_grid(t0, t_end, cfg.epsilon, stride=stride)
    if not u_grid:
        raise ValueError(
            f"no candidate splits in [{t0}, {t_end}] at epsilon={cfg.epsilon}")

    scaler = fit_scaler(ds, t0, t_end)
    ds_std = standardize(ds, scaler)
    window_states = ds_std.states[:, t0 : t_end + 1, :].reshape(-1, ds.state_dim)
    gamma_rbf = sieve.median_heuristic_gamma(
        window_states, max_points=cfg.median_max_points,
        seed=derive_seed(seed, STREAM_MEDIAN))

    n_features = cfg.n_features
    if cfg.cv_candidates:
        n_features = cross_validate_basis(
            ds_std, t0, t_end, cfg.cv_candidates, cfg.cv_folds,
            cfg.fqi_config(), derive_seed(seed, STREAM_CV))
    spec = sieve.sample_basis(ds.m, n_features, ds.state_dim, gamma_rbf,
                              seed=derive_seed(seed, STREAM_BASIS))

    ws = build_workspace(ds_std, t0, t_end, spec, cfg.fqi_config(), u_grid)
    observed = evaluate_statistics(ws, ScanConfig(epsilon=cfg.epsilon,
                                                  u_grid=u_grid,
                                                  sigma_floor=cfg.sigma_floor),
                                   kinds=kinds)
    bcfg = BootstrapConfig(n_draws=cfg.n_boot,
                           base_seed=derive_seed(seed, STREAM_BOOT))
    scan_cfg = ScanConfig(epsilon=cfg.epsilon, u_grid=u_grid,
                          sigma_floor=cfg.sigma_floor)
    draws = _bootstrap_multi(ws, scan_cfg, bcfg, kinds)

    all_converged = all(f.left.converged and f.right.converged for f in ws.fits)
    n_nonconv = sum((not f.left.converged) + (not f.right.converged) for f in ws.fits)
    results = {}
    for kind in kinds:
        results[kind] = TestResult(
            kind=kind, statistic=observed[kind], bootstrap_draws=draws[kind],
            p_value=p_value(observed[kind], draws[kind]), seed=seed,
            t0=t0, t_end=t_end, u_grid=u_grid, n_features=n_features,
            gamma_rbf=gamma_rbf, all_converged=all_converged,
            diagnostics={"n_nonconverged_fits": n_nonconv,
                         "profile": observed["profile"]})
    return results


def run_test(ds: Dataset, t0: int, t_end: int, kind: str, seed: int,
             cfg: TestConfig) -> TestResult:
    """Standardize, draw features, fit all splits, bootstrap, report p."""
    return run_test_multi(ds, t0, t_end, seed, cfg, kinds=(kind,))[kind]


def run_test_aggregated(ds: Dataset, t0: int, t_end: int, kind: str, seed: int,
                        cfg: TestConfig) -> tuple[float, list[TestResult]]:
    """Repeat the test over fresh feature draws and combine the p-values."""
    results = []
    for rep in range(cfg.n_reps):
        rep_seed = derive_seed(seed, STREAM_REP, rep)
        results.append(run_test(ds, t0, t_end, kind, rep_seed, cfg))
    p0 = aggregate_pvalues([r.p_value for r in results], cfg.tau)
    return p0, results
