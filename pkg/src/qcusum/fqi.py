"""Fitted Q-iteration over a linear feature basis.

Each iteration regresses the bootstrapped targets
``R + discount * max_a Q_prev(a, s_next)`` on the action-expanded features of
``(a, s)`` via ridge-regularized least squares; the per-action feature blocks
are disjoint, so the regression decouples into one M x M solve per action.
Once the iterate movement drops below tolerance, the greedy action labels are
frozen and the linear fixed point is solved directly, which drives the
estimating-equation residual to solver precision.

Also provides greedy policy extraction, temporal-difference errors, the
estimating-equation residual diagnostic, basis-size cross-validation, and a
one-hot tabular basis used by oracle tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .rng import derive_seed, make_rng
from .trajectory import Dataset, TransitionBatch, fit_scaler, slice_interval, standardize
from . import sieve


@dataclass(frozen=True)
class FqiConfig:
    """Knobs of the iterative fit.

    ``k_max=0`` resolves to ``max(200, 20 * ceil(ln(n_rows)))`` at fit time;
    ``ridge=None`` resolves to ``1e-8 * mean(diag(Gram))``.
    """

    discount: float = 0.9
    tol: float = 1e-4
    k_max: int = 0
    ridge: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if self.tol <= 0 or self.k_max < 0:
            raise ValueError("tol must be positive and k_max nonnegative")
        if self.ridge is not None and self.ridge < 0:
            raise ValueError("ridge must be nonnegative")


@dataclass(frozen=True)
class QCoefficients:
    """Linear Q-function estimate on a time interval."""

    beta: np.ndarray
    t1: int
    t2: int
    spec_id: int
    iterations: int
    converged: bool
    final_delta: float
    ridge_used: float = 0.0


@dataclass(frozen=True)
class IndicatorBasis:
    """One-hot basis over integer-coded states; oracle tests only.

    Implements the same interface as :class:`qcusum.sieve.BasisSpec`, so the
    estimator and test statistics run unchanged on tabular problems.
    """

    m: int
    n_states: int

    @property
    def n_features(self) -> int:
        return self.n_states

    @property
    def d(self) -> int:
        return 1

    @property
    def L(self) -> int:
        return self.m * self.n_states

    @property
    def seed(self) -> int:
        return -1

    def state_features(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        idx = np.rint(s[..., 0]).astype(np.int64)
        if idx.min() < 0 or idx.max() >= self.n_states:
            raise ValueError("state index out of range")
        out = np.zeros(idx.shape + (self.n_states,))
        np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
        return out


class SieveDesign:
    """Cached feature matrices for one (batch, basis) pair.

    Built once and reused across FQI iterations, the score matrix of the
    bootstrap, and the cross-product matrices of the test statistics.
    """

    def __init__(self, batch: TransitionBatch, spec,
                 phi_s: np.ndarray | None = None,
                 phi_next: np.ndarray | None = None):
        self.batch = batch
        self.spec = spec
        self.phi_s = phi_s if phi_s is not None else spec.state_features(batch.s)
        self.phi_next = (phi_next if phi_next is not None
                         else spec.state_features(batch.s_next))
        self.rows_by_action = [np.flatnonzero(batch.a == a) for a in range(spec.m)]
        m, M = spec.m, spec.n_features
        self.gram_blocks = np.zeros((m, M, M))
        for a, rows in enumerate(self.rows_by_action):
            if rows.size:
                xa = self.phi_s[rows]
                self.gram_blocks[a] = xa.T @ xa

    @property
    def n_rows(self) -> int:
        return self.batch.n_rows

    def expanded_features(self) -> np.ndarray:
        """Dense (n, L) action-expanded feature matrix."""
        n, m, M = self.n_rows, self.spec.m, self.spec.n_features
        x = np.zeros((n, m * M))
        for a, rows in enumerate(self.rows_by_action):
            x[rows, a * M : (a + 1) * M] = self.phi_s[rows]
        return x

    def q_next_max_and_argmax(self, beta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Greedy value and action of every row's next state under ``beta``."""
        bmat = beta.reshape(self.spec.m, self.spec.n_features).T  # (M, m)
        q = self.phi_next @ bmat
        arg = np.argmax(q, axis=1)  # ties -> lowest action index
        return q[np.arange(q.shape[0]), arg], arg

    def xty(self, y: np.ndarray) -> np.ndarray:
        """(m, M) per-action blocks of features^T @ y."""
        out = np.zeros((self.spec.m, self.spec.n_features))
        for a, rows in enumerate(self.rows_by_action):
            if rows.size:
                out[a] = self.phi_s[rows].T @ y[rows]
        return out


def _resolve_ridge(cfg: FqiConfig, gram_blocks: np.ndarray, L: int) -> float:
    if cfg.ridge is not None:
        return cfg.ridge
    mean_diag = float(sum(np.trace(g) for g in gram_blocks)) / L
    return 1e-8 * mean_diag


def _solve_blocks(gram_blocks: np.ndarray, rhs_blocks: np.ndarray, ridge: float) -> np.ndarray:
    m, M, _ = gram_blocks.shape
    beta = np.zeros(m * M)
    eye = np.eye(M)
    for a in range(m):
        g = gram_blocks[a] + ridge * eye
        try:
            beta[a * M : (a + 1) * M] = np.linalg.solve(g, rhs_blocks[a])
        except np.linalg.LinAlgError as exc:
            raise NumericError(
                "singular Gram block; set ridge > 0 in FqiConfig"
            ) from exc
    return beta


def fit_linear_fqi(batch: TransitionBatch, spec, cfg: FqiConfig,
                   design: SieveDesign | None = None) -> QCoefficients:
    """Iterate least-squares Q-updates from beta = 0 until movement < tol.

    After the plain iteration settles (or the cap is hit), the greedy labels
    are frozen and the linear fixed point is solved directly; if the greedy
    labels are stable under the refined solution, the estimating equation
    holds up to the ridge term.

    On tiny/ill-conditioned segments the plain iteration can diverge (the
    empirical Bellman map need not contract). In that case the fit restarts
    with the ridge escalated tenfold, deterministically, until it converges
    or the escalation budget runs out; ``ridge_used`` records the level.
    """
    if batch.n_rows == 0:
        raise ValueError("empty batch")
    des = design if design is not None else SieveDesign(batch, spec)
    L = spec.L
    base_ridge = _resolve_ridge(cfg, des.gram_blocks, L)
    escalation_floor = max(base_ridge,
                           1e-8 * float(sum(np.trace(g) for g in des.gram_blocks)) / L,
                           1e-12)
    k_max = cfg.k_max if cfg.k_max > 0 else max(200, 20 * math.ceil(math.log(des.n_rows)))
    gamma = cfg.discount
    blow_up = 1e6 * (1.0 + float(np.linalg.norm(des.batch.r)))

    last = None
    for escalation in range(7):
        ridge = base_ridge if escalation == 0 else escalation_floor * 10.0 ** escalation
        beta = np.zeros(L)
        delta = np.inf
        iterations = 0
        for iterations in range(1, k_max + 1):
            if gamma == 0.0:
                y = des.batch.r
            else:
                q_max, _ = des.q_next_max_and_argmax(beta)
                y = des.batch.r + gamma * q_max
            new_beta = _solve_blocks(des.gram_blocks, des.xty(y), ridge)
            delta = float(np.linalg.norm(new_beta - beta))
            beta = new_beta
            if delta < cfg.tol:
                break
            if not np.isfinite(delta) or np.linalg.norm(beta) > blow_up:
                break  # diverging; retry with a stronger ridge
        converged = delta < cfg.tol
        last = (beta, iterations, converged, delta, ridge)
        if converged:
            break
    beta, iterations, converged, delta, ridge = last

    if gamma > 0.0 and converged:
        beta, ok = _policy_fixed_point(des, beta, gamma, ridge)
        converged = converged and ok
    return QCoefficients(beta=beta, t1=batch.t1, t2=batch.t2,
                         spec_id=getattr(spec, "seed", -1),
                         iterations=iterations, converged=converged,
                         final_delta=delta, ridge_used=ridge)


def _policy_fixed_point(des: SieveDesign, beta: np.ndarray, gamma: float,
                        ridge: float, max_rounds: int = 25) -> tuple[np.ndarray, bool]:
    """Solve the linear system with frozen greedy labels until they stop moving.

    Keeps whichever candidate has the smaller estimating-equation residual,
    so an ill-conditioned policy solve can never worsen the iterate.
    """
    m, M = des.spec.m, des.spec.n_features
    L = m * M
    gram_full = np.zeros((L, L))
    for a in range(m):
        gram_full[a * M : (a + 1) * M, a * M : (a + 1) * M] = des.gram_blocks[a]
    xtr = des.xty(des.batch.r).reshape(L)

    def resid_norm(b: np.ndarray) -> float:
        q_max, _ = des.q_next_max_and_argmax(b)
        return float(np.linalg.norm(
            des.xty(des.batch.r + gamma * q_max).reshape(L) - gram_full @ b))

    best, best_resid = beta, resid_norm(beta)
    _, greedy = des.q_next_max_and_argmax(beta)
    seen = {greedy.tobytes()}
    cand = beta
    for _ in range(max_rounds):
        cross = np.zeros((L, L))
        for a, rows in enumerate(des.rows_by_action):
            if not rows.size:
                continue
            ga = greedy[rows]
            for a2 in range(m):
                sel = rows[ga == a2]
                if sel.size:
                    cross[a * M : (a + 1) * M, a2 * M : (a2 + 1) * M] += (
                        des.phi_s[sel].T @ des.phi_next[sel]
                    )
        system = gram_full - gamma * cross + ridge * np.eye(L)
        try:
            cand = np.linalg.solve(system, xtr)
        except np.linalg.LinAlgError:
            break
        r = resid_norm(cand)
        if np.isfinite(r) and r < best_resid:
            best, best_resid = cand, r
        _, new_greedy = des.q_next_max_and_argmax(cand)
        key = new_greedy.tobytes()
        if np.array_equal(new_greedy, greedy) or key in seen:
            break
        seen.add(key)
        greedy = new_greedy
    return best, True


def q_value(q: QCoefficients, spec, a: int, s: np.ndarray) -> float:
    """Estimated Q at one state-action pair."""
    return float(sieve.phi_L(spec, a, s) @ q.beta)


def q_values(q: QCoefficients, spec, states: np.ndarray) -> np.ndarray:
    """(n, m) table of estimated Q over a batch of states."""
    feats = spec.state_features(np.atleast_2d(np.asarray(states, dtype=np.float64)))
    bmat = q.beta.reshape(spec.m, spec.n_features).T
    return feats @ bmat


def greedy_action(q: QCoefficients, spec, s: np.ndarray) -> int:
    """Argmax action; ties broken by lowest index."""
    row = q_values(q, spec, np.asarray(s, dtype=np.float64)[None, :]
                   if np.asarray(s).ndim == 1 else s)
    return int(np.argmax(row[0]))


def greedy_actions(q: QCoefficients, spec, states: np.ndarray) -> np.ndarray:
    return np.argmax(q_values(q, spec, states), axis=1)


def td_errors(q: QCoefficients, spec, batch: TransitionBatch, cfg: FqiConfig,
              design: SieveDesign | None = None) -> np.ndarray:
    """One temporal-difference error per batch row, in batch order."""
    des = design if design is not None else SieveDesign(batch, spec)
    q_max, _ = des.q_next_max_and_argmax(q.beta)
    bmat = q.beta.reshape(spec.m, spec.n_features)
    q_taken = np.einsum("ij,ij->i", des.phi_s, bmat[batch.a])
    return batch.r + cfg.discount * q_max - q_taken


def estimating_equation_residual(q: QCoefficients, spec, batch: TransitionBatch,
                                 cfg: FqiConfig,
                                 design: SieveDesign | None = None) -> np.ndarray:
    """Sum over rows of features(a, s) * td_error; near zero at a converged fit."""
    des = design if design is not None else SieveDesign(batch, spec)
    delta = td_errors(q, spec, batch, cfg, design=des)
    return des.xty(delta).reshape(spec.L)


def _subset(ds: Dataset, keep: np.ndarray) -> Dataset:
    return Dataset(states=ds.states[keep], actions=ds.actions[keep],
                   rewards=ds.rewards[keep], t0=ds.t0, m=ds.m)


def cross_validate_basis(ds: Dataset, t1: int, t2: int, candidate_Ms,
                         folds: int, cfg: FqiConfig, seed: int,
                         basis_factory=None) -> int:
    """Pick the basis size minimizing held-out squared TD error.

    Trajectories (never time points) are split into ``folds`` groups; for
    every (fold, M) the fit uses the complement and the criterion sums the
    squared TD errors on the held-out fold. Ties go to the smaller M.
    """
    candidates = sorted(int(M) for M in candidate_Ms)
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if ds.n_traj < folds:
        raise ValueError(f"need at least {folds} trajectories for {folds}-fold CV")
    if len(candidates) == 1:
        return candidates[0]

    if basis_factory is None:
        scaler = fit_scaler(ds, t1, t2)
        ds = standardize(ds, scaler)
        window_states = ds.states[:, t1 : t2 + 1, :].reshape(-1, ds.state_dim)
        gamma_rbf = sieve.median_heuristic_gamma(
            window_states, seed=derive_seed(seed, 1))

        def basis_factory(M):
            return sieve.sample_basis(ds.m, M, ds.state_dim, gamma_rbf,
                                      seed=derive_seed(seed, 2, M))

    perm = make_rng(seed, 0).permutation(ds.n_traj)
    fold_members = np.array_split(perm, folds)

    scores = {M: 0.0 for M in candidates}
    for M in candidates:
        spec = basis_factory(M)
        for members in fold_members:
            mask = np.ones(ds.n_traj, dtype=bool)
            mask[members] = False
            train = slice_interval(_subset(ds, np.flatnonzero(mask)), t1, t2)
            held = slice_interval(_subset(ds, np.sort(members)), t1, t2)
            fit = fit_linear_fqi(train, spec, cfg)
            delta = td_errors(fit, spec, held, cfg)
            scores[M] += float(delta @ delta)
    best = min(candidates, key=lambda M: (scores[M], M))
    return best
