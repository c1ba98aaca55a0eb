"""CUSUM-type contrast statistics between Q-fits on split intervals.

For every candidate split ``u`` of a window ``[t0, t_end]`` the workspace
holds a Q-fit on ``[t0, u]`` and one on ``[u, t_end]``, their score matrices
and TD errors. Three statistics aggregate the weighted Q-difference:

* ``integral`` averages ``|dQ|`` over all observed state-action pairs,
* ``max`` takes the largest ``|dQ|`` over observed states x all actions,
* ``norm`` studentizes the max by a plug-in variance estimate.

All carry the weight ``sqrt((u - t0) * (t_end - u)) / (t_end - t0)`` that
down-weights splits near the window ends.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .fqi import FqiConfig, QCoefficients, SieveDesign, fit_linear_fqi, td_errors
from .trajectory import Dataset, TransitionBatch, slice_interval
from . import sieve

KINDS = ("integral", "max", "norm")


@dataclass(frozen=True)
class ScanConfig:
    """Candidate-split scan settings for one tested window."""

    epsilon: float = 0.1
    kind: str = "integral"
    u_grid: tuple[int, ...] = ()
    sigma_floor: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")


@dataclass
class SegmentFit:
    """Left/right Q-fits around one candidate split, plus their diagnostics."""

    u: int
    left: QCoefficients
    right: QCoefficients
    w_left: np.ndarray
    w_right: np.ndarray
    delta_left: np.ndarray
    delta_right: np.ndarray


def cusum_weight(u: int, t0: int, t_end: int) -> float:
    """Boundary-damping weight in (0, 0.5], maximal at the window midpoint."""
    if not t0 < u < t_end:
        raise ValueError(f"need t0 < u < t_end, got {t0} < {u} < {t_end}")
    span = t_end - t0
    return math.sqrt((u - t0) * (t_end - u)) / span


def candidate_grid(t0: int, t_end: int, epsilon: float, stride: int = 1) -> tuple[int, ...]:
    """Integer splits with strictly more than ``epsilon`` of the window on each side."""
    margin = epsilon * (t_end - t0)
    lo, hi = t0 + margin, t_end - margin
    u_min = int(math.floor(lo + 1e-9)) + 1
    u_max = int(math.ceil(hi - 1e-9)) - 1
    if u_max < u_min:
        return ()
    return tuple(range(u_min, u_max + 1))[:: max(1, stride)]


def w_hat(batch: TransitionBatch, q: QCoefficients, spec, discount: float,
          design: SieveDesign | None = None) -> np.ndarray:
    """Average cross-product of features with (features - discount * greedy-next features)."""
    des = design if design is not None else SieveDesign(batch, spec)
    m, M = spec.m, spec.n_features
    _, greedy = des.q_next_max_and_argmax(q.beta)
    w = np.zeros((m * M, m * M))
    for a, rows in enumerate(des.rows_by_action):
        if not rows.size:
            continue
        blk = slice(a * M, (a + 1) * M)
        w[blk, blk] += des.phi_s[rows].T @ des.phi_s[rows]
        ga = greedy[rows]
        for a2 in range(m):
            sel = rows[ga == a2]
            if sel.size:
                w[blk, a2 * M : (a2 + 1) * M] -= discount * (
                    des.phi_s[sel].T @ des.phi_next[sel]
                )
    return w / batch.n_rows


def solve_w(w: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve against the score matrix, retrying once with a small ridge."""
    try:
        return np.linalg.solve(w, rhs)
    except np.linalg.LinAlgError:
        lam = 1e-8 * float(np.mean(np.abs(np.diag(w))))
        lam = lam if lam > 0 else 1e-12
        try:
            return np.linalg.solve(w + lam * np.eye(w.shape[0]), rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericError("score matrix singular even after ridge") from exc


class ScanWorkspace:
    """Per-window caches: features, segment fits, inverses, variance pieces.

    Feature rows follow the window batch (i-major, then t). Segment rows for
    a split ``u`` are the window rows with ``t < u`` (left) or ``t >= u``
    (right); that subset keeps the i-major order of a fresh slice.
    """

    def __init__(self, ds: Dataset, t0: int, t_end: int, spec,
                 fqi_cfg: FqiConfig | None, u_grid,
                 fits: list[SegmentFit] | None = None):
        if len(u_grid) == 0:
            raise ValueError("empty candidate grid")
        self.ds = ds
        self.t0, self.t_end = int(t0), int(t_end)
        self.spec = spec
        self.u_grid = tuple(int(u) for u in u_grid)
        self.batch = slice_interval(ds, t0, t_end)

        n, length, d = ds.n_traj, t_end - t0, ds.state_dim
        all_states = ds.states[:, t0 : t_end + 1, :].reshape(-1, d)
        phi_all = spec.state_features(all_states).reshape(n, length + 1, spec.n_features)
        self.phi_s = np.ascontiguousarray(
            phi_all[:, :-1].reshape(n * length, spec.n_features))
        self.phi_next = np.ascontiguousarray(
            phi_all[:, 1:].reshape(n * length, spec.n_features))
        self.rows_by_action = [np.flatnonzero(self.batch.a == a) for a in range(spec.m)]

        self._designs: dict[tuple[int, int], SieveDesign] = {}
        self._sigma: dict[int, np.ndarray] = {}
        self._winv: dict[tuple[int, str], np.ndarray] = {}
        if fits is None:
            if fqi_cfg is None:
                raise ValueError("fqi_cfg required to fit segments")
            self.fits = self._fit_all(fqi_cfg)
        else:
            self.fits = list(fits)

    # -- segment plumbing ---------------------------------------------------
    def mask(self, u: int, side: str) -> np.ndarray:
        if side == "left":
            return self.batch.t_idx < u
        return self.batch.t_idx >= u

    def segment_batch(self, t1: int, t2: int) -> TransitionBatch:
        mask = (self.batch.t_idx >= t1) & (self.batch.t_idx < t2)
        return TransitionBatch(
            s=self.batch.s[mask], a=self.batch.a[mask], r=self.batch.r[mask],
            s_next=self.batch.s_next[mask], t1=t1, t2=t2,
            i_idx=self.batch.i_idx[mask], t_idx=self.batch.t_idx[mask])

    def design(self, t1: int, t2: int) -> SieveDesign:
        key = (t1, t2)
        if key not in self._designs:
            mask = (self.batch.t_idx >= t1) & (self.batch.t_idx < t2)
            seg = self.segment_batch(t1, t2)
            self._designs[key] = SieveDesign(
                seg, self.spec, phi_s=self.phi_s[mask], phi_next=self.phi_next[mask])
        return self._designs[key]

    def _fit_all(self, cfg: FqiConfig) -> list[SegmentFit]:
        fits = []
        for u in self.u_grid:
            fit = self._fit_split(u, cfg)
            fits.append(fit)
        return fits

    def _fit_split(self, u: int, cfg: FqiConfig) -> SegmentFit:
        des_l = self.design(self.t0, u)
        des_r = self.design(u, self.t_end)
        left = fit_linear_fqi(des_l.batch, self.spec, cfg, design=des_l)
        right = fit_linear_fqi(des_r.batch, self.spec, cfg, design=des_r)
        wl = w_hat(des_l.batch, left, self.spec, cfg.discount, design=des_l)
        wr = w_hat(des_r.batch, right, self.spec, cfg.discount, design=des_r)
        dl = td_errors(left, self.spec, des_l.batch, cfg, design=des_l)
        dr = td_errors(right, self.spec, des_r.batch, cfg, design=des_r)
        return SegmentFit(u=u, left=left, right=right, w_left=wl, w_right=wr,
                          delta_left=dl, delta_right=dr)

    def winv(self, j: int, side: str) -> np.ndarray:
        key = (j, side)
        if key not in self._winv:
            fit = self.fits[j]
            w = fit.w_left if side == "left" else fit.w_right
            self._winv[key] = solve_w(w, np.eye(w.shape[0]))
        return self._winv[key]

    # -- variance -----------------------------------------------------------
    def sigma_values(self, j: int, floor: float) -> np.ndarray:
        """(m, n_rows) clipped SDs of dQ at every observed state x action."""
        if j not in self._sigma:
            fit = self.fits[j]
            m, M = self.spec.m, self.spec.n_features
            total = np.zeros((m * M, m * M))
            for side, fitq, delta in (("left", fit.left, fit.delta_left),
                                      ("right", fit.right, fit.delta_right)):
                des = (self.design(self.t0, fit.u) if side == "left"
                       else self.design(fit.u, self.t_end))
                scaled = des.phi_s * delta[:, None]
                ssum = np.zeros((m * M, m * M))
                for a, rows in enumerate(des.rows_by_action):
                    if rows.size:
                        blk = slice(a * M, (a + 1) * M)
                        ssum[blk, blk] = scaled[rows].T @ scaled[rows]
                winv = self.winv(j, side)
                n_traj = des.batch.n_traj
                length = des.batch.length
                total += (winv @ ssum @ winv.T) / (n_traj * length) ** 2
            sig = np.empty((m, self.batch.n_rows))
            for a in range(m):
                blk = slice(a * M, (a + 1) * M)
                quad = np.einsum("ij,jk,ik->i", self.phi_s, total[blk, blk], self.phi_s)
                sig[a] = np.sqrt(np.maximum(quad, 0.0))
            self._sigma[j] = sig
        return np.maximum(self._sigma[j], floor)


def build_workspace(ds: Dataset, t0: int, t_end: int, spec, fqi_cfg, u_grid,
                    fits=None) -> ScanWorkspace:
    return ScanWorkspace(ds, t0, t_end, spec, fqi_cfg, u_grid, fits=fits)


def fit_segments(ds: Dataset, t0: int, t_end: int, spec, fqi_cfg: FqiConfig,
                 u_grid) -> list[SegmentFit]:
    """Fit the left/right Q-estimates for every candidate split."""
    return build_workspace(ds, t0, t_end, spec, fqi_cfg, u_grid).fits


def _workspace_from_fits(ds: Dataset, fits: list[SegmentFit], spec) -> ScanWorkspace:
    t0 = fits[0].left.t1
    t_end = fits[0].right.t2
    return ScanWorkspace(ds, t0, t_end, spec, None,
                         [f.u for f in fits], fits=fits)


def evaluate_statistics(ws: ScanWorkspace, cfg: ScanConfig, kinds=KINDS) -> dict:
    """Observed statistics (and per-split profile) in one pass over the fits."""
    n_traj = ws.batch.n_traj
    denom = n_traj * ws.t_end
    m, M = ws.spec.m, ws.spec.n_features
    out = {k: 0.0 for k in kinds}
    profile = []
    for j, fit in enumerate(ws.fits):
        weight = cusum_weight(fit.u, ws.t0, ws.t_end)
        dbeta = fit.left.beta - fit.right.beta
        row = {"u": fit.u, "weight": weight}
        vals_int = 0.0
        vals_max = 0.0
        vals_norm = 0.0
        sig = ws.sigma_values(j, cfg.sigma_floor) if "norm" in kinds else None
        for a in range(m):
            col = ws.phi_s @ dbeta[a * M : (a + 1) * M]
            abs_col = np.abs(col)
            if "integral" in kinds:
                rows_a = ws.rows_by_action[a]
                vals_int += float(abs_col[rows_a].sum())
            if "max" in kinds:
                vals_max = max(vals_max, float(abs_col.max()))
            if "norm" in kinds:
                vals_norm = max(vals_norm, float((abs_col / sig[a]).max()))
        if "integral" in kinds:
            v = weight * vals_int / denom
            row["integral"] = v
            out["integral"] = max(out["integral"], v)
        if "max" in kinds:
            v = weight * vals_max
            row["max"] = v
            out["max"] = max(out["max"], v)
        if "norm" in kinds:
            v = weight * vals_norm
            row["norm"] = v
            out["norm"] = max(out["norm"], v)
        profile.append(row)
    out["profile"] = profile
    return out


def ts_integral(ds: Dataset, fits: list[SegmentFit], spec, cfg: ScanConfig) -> float:
    """Weighted average absolute Q-difference over observed pairs, maxed over splits."""
    ws = _workspace_from_fits(ds, fits, spec)
    return evaluate_statistics(ws, cfg, kinds=("integral",))["integral"]


def ts_max(ds: Dataset, fits: list[SegmentFit], spec, cfg: ScanConfig) -> float:
    """Weighted max absolute Q-difference over observed states x actions."""
    ws = _workspace_from_fits(ds, fits, spec)
    return evaluate_statistics(ws, cfg, kinds=("max",))["max"]


def ts_norm(ds: Dataset, fits: list[SegmentFit], spec, cfg: ScanConfig) -> float:
    """Studentized variant of :func:`ts_max`."""
    ws = _workspace_from_fits(ds, fits, spec)
    return evaluate_statistics(ws, cfg, kinds=("norm",))["norm"]


def scan_profile(ds: Dataset, fits: list[SegmentFit], spec, cfg: ScanConfig) -> list[dict]:
    """Per-split weighted contrasts, for CSV export and plotting."""
    ws = _workspace_from_fits(ds, fits, spec)
    return evaluate_statistics(ws, cfg, kinds=KINDS)["profile"]


def sigma_hat(ds: Dataset, fit: SegmentFit, spec, a: int, s: np.ndarray,
              floor: float = 0.0) -> float:
    """Plug-in SD of the Q-difference at one state-action pair."""
    m, M = spec.m, spec.n_features
    phi = sieve.phi_features(spec, np.asarray(s, dtype=np.float64))
    total_quad = 0.0
    for side in ("left", "right"):
        if side == "left":
            batch = slice_interval(ds, fit.left.t1, fit.left.t2)
            w, delta = fit.w_left, fit.delta_left
        else:
            batch = slice_interval(ds, fit.right.t1, fit.right.t2)
            w, delta = fit.w_right, fit.delta_right
        des = SieveDesign(batch, spec)
        scaled = des.phi_s * delta[:, None]
        ssum = np.zeros((m * M, m * M))
        for act, rows in enumerate(des.rows_by_action):
            if rows.size:
                blk = slice(act * M, (act + 1) * M)
                ssum[blk, blk] = scaled[rows].T @ scaled[rows]
        winv = solve_w(w, np.eye(m * M))
        mat = (winv @ ssum @ winv.T) / (batch.n_traj * batch.length) ** 2
        blk = slice(a * M, (a + 1) * M)
        total_quad += float(phi @ mat[blk, blk] @ phi)
    return max(math.sqrt(max(total_quad, 0.0)), floor)
