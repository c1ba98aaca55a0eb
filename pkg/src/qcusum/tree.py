"""Regression-tree Q-iteration for policy learning.

A small CART-style regressor (axis-aligned splits chosen by squared-error
reduction, constant leaves) backs a fitted Q-iteration variant that runs a
fixed number of sweeps: each sweep fits one tree per action on the rows that
took that action, with targets ``R + discount * max_a Q_prev(a, s_next)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import derive_seed, make_rng
from .trajectory import TransitionBatch


class RegressionTree:
    """CART regressor with max-depth and min-samples-per-leaf constraints."""

    def __init__(self, max_depth: int = 5, min_samples_leaf: int = 50):
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        # flat node arrays: feature < 0 marks a leaf
        self._feature: list[int] = []
        self._threshold: list[float] = []
        self._left: list[int] = []
        self._right: list[int] = []
        self._value: list[float] = []

    def fit(self, X: np.ndarray, y: np.ndarray) -> "RegressionTree":
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64)
        self._feature, self._threshold = [], []
        self._left, self._right, self._value = [], [], []
        self._grow(X, y, depth=0)
        return self

    def _new_node(self) -> int:
        self._feature.append(-1)
        self._threshold.append(0.0)
        self._left.append(-1)
        self._right.append(-1)
        self._value.append(0.0)
        return len(self._feature) - 1

    def _grow(self, X: np.ndarray, y: np.ndarray, depth: int) -> int:
        node = self._new_node()
        n = y.size
        if n == 0:
            return node
        self._value[node] = float(y.mean())
        if depth >= self.max_depth or n < 2 * self.min_samples_leaf:
            return node
        feature, threshold = self._best_split(X, y)
        if feature < 0:
            return node
        mask = X[:, feature] <= threshold
        self._feature[node] = feature
        self._threshold[node] = threshold
        left = self._grow(X[mask], y[mask], depth + 1)
        right = self._grow(X[~mask], y[~mask], depth + 1)
        self._left[node], self._right[node] = left, right
        return node

    def _best_split(self, X: np.ndarray, y: np.ndarray) -> tuple[int, float]:
        n = y.size
        leaf = max(1, self.min_samples_leaf)
        best_cost = np.inf
        best = (-1, 0.0)
        for j in range(X.shape[1]):
            order = np.argsort(X[:, j], kind="stable")
            xs, ys = X[order, j], y[order]
            csum = np.cumsum(ys)
            csum2 = np.cumsum(ys * ys)
            total, total2 = csum[-1], csum2[-1]
            # split after position k (1-based count on the left); the
            # threshold must separate distinct feature values
            ks = np.arange(leaf, n - leaf + 1)
            if ks.size == 0:
                continue
            ks = ks[xs[ks - 1] < xs[ks]]
            if ks.size == 0:
                continue
            sl, sl2 = csum[ks - 1], csum2[ks - 1]
            cost = (sl2 - sl * sl / ks) + ((total2 - sl2) - (total - sl) ** 2 / (n - ks))
            k_best = int(ks[np.argmin(cost)])
            c = float(np.min(cost))
            if c < best_cost - 1e-12:
                best_cost = c
                best = (j, float(0.5 * (xs[k_best - 1] + xs[k_best])))
        return best

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if not self._feature:
            return np.zeros(X.shape[0])
        out = np.empty(X.shape[0])
        idx = np.arange(X.shape[0])
        stack = [(0, idx)]
        while stack:
            node, rows = stack.pop()
            if self._feature[node] < 0:
                out[rows] = self._value[node]
                continue
            mask = X[rows, self._feature[node]] <= self._threshold[node]
            stack.append((self._left[node], rows[mask]))
            stack.append((self._right[node], rows[~mask]))
        return out

    def depth(self) -> int:
        def walk(node: int) -> int:
            if node < 0 or self._feature[node] < 0:
                return 0
            return 1 + max(walk(self._left[node]), walk(self._right[node]))
        return walk(0) if self._feature else 0


class _ZeroTree:
    """Stands in for an action that has no training rows."""

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.zeros(np.atleast_2d(X).shape[0])


@dataclass(frozen=True)
class TreePolicy:
    """Per-action regression trees approximating the Q-function."""

    trees: tuple
    max_depth: int
    min_samples_leaf: int
    discount: float

    @property
    def m(self) -> int:
        return len(self.trees)


def tree_q_values(policy: TreePolicy, states: np.ndarray) -> np.ndarray:
    """(n, m) Q table under the tree model."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    return np.column_stack([t.predict(states) for t in policy.trees])


def greedy_tree_actions(policy: TreePolicy, states: np.ndarray) -> np.ndarray:
    return np.argmax(tree_q_values(policy, states), axis=1)


def fit_tree_fqi(batch: TransitionBatch, max_depth: int, min_samples_leaf: int,
                 discount: float, n_actions: int, k_max_tree: int = 50) -> TreePolicy:
    """Run a fixed number of tree-regression Q-iteration sweeps."""
    if batch.n_rows == 0:
        raise ValueError("empty batch")
    rows_by_action = [np.flatnonzero(batch.a == a) for a in range(n_actions)]
    trees: list = [_ZeroTree() for _ in range(n_actions)]
    policy = TreePolicy(trees=tuple(trees), max_depth=max_depth,
                        min_samples_leaf=min_samples_leaf, discount=discount)
    for _ in range(k_max_tree):
        if discount > 0:
            y = batch.r + discount * tree_q_values(policy, batch.s_next).max(axis=1)
        else:
            y = batch.r
        new_trees = []
        for a in range(n_actions):
            rows = rows_by_action[a]
            if rows.size == 0:
                new_trees.append(_ZeroTree())
                continue
            tree = RegressionTree(max_depth=max_depth,
                                  min_samples_leaf=min_samples_leaf)
            tree.fit(batch.s[rows], y[rows])
            new_trees.append(tree)
        policy = TreePolicy(trees=tuple(new_trees), max_depth=max_depth,
                            min_samples_leaf=min_samples_leaf, discount=discount)
        if discount == 0:
            break
    return policy


def cross_validate_tree(batch: TransitionBatch, depths, leaf_sizes, discount: float,
                        n_actions: int, folds: int, seed: int,
                        k_max_tree: int = 50) -> tuple[int, int]:
    """Pick (max_depth, min_samples_leaf) by held-out squared TD error."""
    n_traj = batch.n_traj
    if n_traj < folds:
        raise ValueError(f"need at least {folds} trajectories")
    perm = make_rng(derive_seed(seed, 0)).permutation(n_traj)
    fold_members = np.array_split(perm, folds)

    def rows_of(traj_ids: np.ndarray) -> np.ndarray:
        return np.flatnonzero(np.isin(batch.i_idx, traj_ids))

    best = None
    best_score = np.inf
    for depth in sorted(depths):
        for leaf in sorted(leaf_sizes):
            score = 0.0
            for members in fold_members:
                held = rows_of(members)
                train = np.setdiff1d(np.arange(batch.n_rows), held)
                sub = TransitionBatch(
                    s=batch.s[train], a=batch.a[train], r=batch.r[train],
                    s_next=batch.s_next[train], t1=batch.t1, t2=batch.t2,
                    i_idx=batch.i_idx[train], t_idx=batch.t_idx[train])
                policy = fit_tree_fqi(sub, depth, leaf, discount, n_actions,
                                      k_max_tree=k_max_tree)
                q_next = tree_q_values(policy, batch.s_next[held]).max(axis=1)
                q_taken = tree_q_values(policy, batch.s[held])
                q_taken = q_taken[np.arange(held.size), batch.a[held]]
                resid = batch.r[held] + discount * q_next - q_taken
                score += float(resid @ resid)
            if score < best_score - 1e-12:
                best_score = score
                best = (depth, leaf)
    return best
