"""Sequential detection of the most recent change point.

The stationarity test runs on nested windows ``[t_hi - kappa, t_hi]`` for an
increasing grid of ``kappa``. The first window whose combined p-value drops
below the level marks the change: the previous (largest still-stationary)
window is kept for policy learning, so the estimate is
``t_hi - kappa[j0 - 1]``. If no window rejects, all data back to ``t_lo`` is
usable. If even the smallest window rejects there is no stationary prefix to
stand on; the smallest window is returned with a warning flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .inference import TestConfig, run_test_aggregated
from .rng import STREAM_KAPPA, derive_seed
from .trajectory import Dataset


@dataclass
class ChangePointResult:
    """Outcome of one kappa scan."""

    kappas: tuple[int, ...]
    p_values: np.ndarray          # NaN where early exit skipped the window
    alpha: float
    j0: int | None                # 1-based index of the first rejection
    t_hat: int
    no_stationary_prefix: bool
    t_lo: int
    t_hi: int

    def rows(self) -> list[dict]:
        out = []
        for kappa, p in zip(self.kappas, self.p_values):
            if np.isnan(p):
                continue
            out.append({"kappa": kappa, "p_value": float(p),
                        "rejected": bool(p < self.alpha)})
        return out


def scan(ds: Dataset, kappas, kind: str, alpha: float, cfg: TestConfig,
         master_seed: int, t_lo: int | None = None, t_hi: int | None = None,
         early_exit: bool = True, test_fn=None) -> ChangePointResult:
    """Test windows of increasing length and locate the most recent change.

    ``test_fn(ds, t0, t_end, kind, seed, cfg) -> float`` can replace the real
    aggregated test (used by unit tests to inject p-value sequences).
    """
    t_lo = ds.t0 if t_lo is None else int(t_lo)
    t_hi = ds.horizon if t_hi is None else int(t_hi)
    kappas = tuple(int(k) for k in kappas)
    if not kappas or any(k2 <= k1 for k1, k2 in zip(kappas, kappas[1:])):
        raise ValueError("kappas must be a nonempty strictly increasing sequence")
    if kappas[-1] > t_hi - t_lo:
        raise ValueError(
            f"largest kappa {kappas[-1]} exceeds the data range {t_hi - t_lo}")
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")

    if test_fn is None:
        def test_fn(ds_, t0_, t_end_, kind_, seed_, cfg_):
            p0, _ = run_test_aggregated(ds_, t0_, t_end_, kind_, seed_, cfg_)
            return p0

    p_values = np.full(len(kappas), np.nan)
    j0 = None
    for idx, kappa in enumerate(kappas):
        seed = derive_seed(master_seed, STREAM_KAPPA, kappa)
        p_values[idx] = test_fn(ds, t_hi - kappa, t_hi, kind, seed, cfg)
        if p_values[idx] < alpha and j0 is None:
            j0 = idx + 1
            if early_exit:
                break

    if j0 is None:
        t_hat, warn = t_lo, False
    elif j0 == 1:
        t_hat, warn = t_hi - kappas[0], True
    else:
        t_hat, warn = t_hi - kappas[j0 - 2], False
    return ChangePointResult(kappas=kappas, p_values=p_values, alpha=alpha,
                             j0=j0, t_hat=t_hat, no_stationary_prefix=warn,
                             t_lo=t_lo, t_hi=t_hi)
