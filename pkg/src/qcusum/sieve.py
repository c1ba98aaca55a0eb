"""Random Fourier feature basis over states, expanded per action.

The state map is the random-kitchen-sinks cosine construction for the RBF
kernel ``k(x, y) = exp(-gamma * ||x - y||^2)``: frequencies drawn
``Normal(0, 2*gamma)`` per entry, offsets ``Uniform[0, 2*pi)``, features
``sqrt(2/M) * cos(w @ s + b)``. The action-expanded vector places the state
features into the block belonging to the taken action and zeros elsewhere,
giving ``L = m * M`` coefficients in total.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .rng import make_rng


@dataclass(frozen=True)
class BasisSpec:
    """Frozen random Fourier feature draw.

    Attributes:
        m: number of actions (feature blocks).
        n_features: features per action block (M).
        d: state dimension.
        frequencies: (M, d) frequency rows.
        offsets: (M,) phase offsets in [0, 2*pi).
        gamma: RBF kernel scale.
        seed: seed the draw came from, for replay.
    """

    m: int
    n_features: int
    d: int
    frequencies: np.ndarray
    offsets: np.ndarray
    gamma: float
    seed: int

    @property
    def L(self) -> int:
        return self.m * self.n_features

    def state_features(self, s: np.ndarray) -> np.ndarray:
        """Feature map of one state (d,) or a batch (n, d) -> (n, M)."""
        s = np.asarray(s, dtype=np.float64)
        if s.shape[-1] != self.d:
            raise ValueError(f"state dim {s.shape[-1]} != basis dim {self.d}")
        proj = s @ self.frequencies.T + self.offsets
        return np.sqrt(2.0 / self.n_features) * np.cos(proj)


def median_heuristic_gamma(states: np.ndarray, max_points: int = 1000,
                           seed: int = 0) -> float:
    """Kernel scale ``1 / (2 * med^2)`` from the median pairwise distance.

    Uses at most ``max_points`` states, subsampled uniformly without
    replacement (seeded). Lower-median convention for even pair counts.
    """
    x = np.asarray(states, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 states")
    if n > max_points:
        keep = make_rng(seed).choice(n, size=max_points, replace=False)
        x = x[np.sort(keep)]
        n = max_points
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    iu = np.triu_indices(n, k=1)
    dists = np.sqrt(np.maximum(d2[iu], 0.0))
    dists.sort()
    med = float(dists[(dists.size - 1) // 2])
    if med <= 0.0:
        positive = dists[dists > 0.0]
        if positive.size == 0:
            raise ValueError("degenerate sample: all states identical")
        med = float(positive[0])  # duplicates dominate; fall back to smallest gap
    return 1.0 / (2.0 * med * med)


def sample_basis(m: int, n_features: int, d: int, gamma: float, seed: int) -> BasisSpec:
    """Draw a fresh feature basis; deterministic for fixed seed."""
    if m < 2 or n_features < 1 or d < 1:
        raise ValueError("need m >= 2, n_features >= 1, d >= 1")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    rng = make_rng(seed)
    freqs = rng.normal(0.0, np.sqrt(2.0 * gamma), size=(n_features, d))
    offsets = rng.uniform(0.0, 2.0 * np.pi, size=n_features)
    freqs.flags.writeable = False
    offsets.flags.writeable = False
    return BasisSpec(m=m, n_features=n_features, d=d, frequencies=freqs,
                     offsets=offsets, gamma=float(gamma), seed=int(seed))


def phi_features(spec: BasisSpec, s: np.ndarray) -> np.ndarray:
    """State features of a single state; every entry in [-sqrt(2/M), sqrt(2/M)]."""
    return spec.state_features(np.asarray(s, dtype=np.float64))


def phi_L(spec, a: int, s: np.ndarray) -> np.ndarray:
    """Action-expanded features: block ``a`` holds the state features."""
    if not 0 <= a < spec.m:
        raise ValueError(f"action {a} out of range for m={spec.m}")
    feats = spec.state_features(np.asarray(s, dtype=np.float64))
    out = np.zeros(spec.m * spec.n_features)
    out[a * spec.n_features : (a + 1) * spec.n_features] = feats
    return out


def save_basis(spec: BasisSpec, path) -> None:
    payload = {
        "m": spec.m,
        "n_features": spec.n_features,
        "d": spec.d,
        "gamma": spec.gamma,
        "seed": spec.seed,
        "frequencies": spec.frequencies.tolist(),
        "offsets": spec.offsets.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)


def load_basis(path) -> BasisSpec:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    freqs = np.array(payload["frequencies"], dtype=np.float64)
    offsets = np.array(payload["offsets"], dtype=np.float64)
    freqs.flags.writeable = False
    offsets.flags.writeable = False
    return BasisSpec(m=payload["m"], n_features=payload["n_features"], d=payload["d"],
                     frequencies=freqs, offsets=offsets,
                     gamma=payload["gamma"], seed=payload["seed"])
