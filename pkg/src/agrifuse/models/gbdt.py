"""Gradient-boosted regression trees with exact greedy, leaf-wise growth."""

from __future__ import annotations

import heapq
import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ..io import PathLike

log = logging.getLogger(__name__)

MIN_SPLIT_GAIN = 1e-12


@dataclass(frozen=True)
class GbdtParams:
    learning_rate: float = 0.1
    early_stopping_rounds: int = 10
    max_iterations: int = 100
    num_leaves: int = 31
    min_samples_leaf: int = 20

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.num_leaves < 2:
            raise ValueError(f"num_leaves must be >= 2, got {self.num_leaves}")
        if self.min_samples_leaf < 1:
            raise ValueError(f"min_samples_leaf must be >= 1, got {self.min_samples_leaf}")


@dataclass
class Tree:
    """Flat binary tree; ``feature == -1`` marks a leaf. ``x < threshold`` goes left."""

    feature: List[int] = field(default_factory=list)
    threshold: List[float] = field(default_factory=list)
    left: List[int] = field(default_factory=list)
    right: List[int] = field(default_factory=list)
    value: List[float] = field(default_factory=list)

    def add_leaf(self, value: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        return len(self.feature) - 1

    @property
    def n_leaves(self) -> int:
        return sum(1 for f in self.feature if f < 0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        active = feature[node] >= 0
        while active.any():
            a = rows[active]
            nd = node[a]
            go_left = X[a, feature[nd]] < threshold[nd]
            node[a] = np.where(go_left, left[nd], right[nd])
            active = feature[node] >= 0
        return np.asarray(self.value)[node]

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(**{k: list(d[k]) for k in ("feature", "threshold", "left", "right", "value")})


@dataclass
class GbdtModel:
    base_score: float
    learning_rate: float
    n_features: int
    trees: List[Tree] = field(default_factory=list)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return gbdt_predict(self, X)

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": "gbdt",
                "base_score": self.base_score,
                "learning_rate": self.learning_rate,
                "n_features": self.n_features,
                "trees": [t.to_dict() for t in self.trees],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "GbdtModel":
        d = json.loads(text)
        return cls(d["base_score"], d["learning_rate"], d["n_features"], [Tree.from_dict(t) for t in d["trees"]])

    def save(self, path: PathLike) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path: PathLike) -> "GbdtModel":
        with open(path) as fh:
            return cls.from_json(fh.read())


@dataclass
class _Split:
    gain: float
    feature: int
    threshold: float
    n_left: int


def _best_split(sorted_idx: np.ndarray, xs: np.ndarray, resid: np.ndarray, min_leaf: int) -> Optional[_Split]:
    """Best variance-reduction split for one node.

    ``sorted_idx`` is ``(n_features, n_node)``: the node's samples sorted by
    each feature, and ``xs`` the matching feature values. Ties go to the
    lowest feature, then the lowest threshold.
    """
    n_feat, n = sorted_idx.shape
    if n < 2 * min_leaf:
        return None
    lo, hi = min_leaf - 1, n - min_leaf  # position i sends samples [0, i] left
    if hi <= lo:
        return None
    csum = np.cumsum(resid[sorted_idx], axis=1)
    total = float(resid[sorted_idx[0]].sum())
    left = csum[:, lo:hi]
    n_left = np.arange(lo + 1, hi + 1, dtype=np.float64)
    # gain + total**2 / n, built in place
    score = left * left
    score /= n_left
    right = total - left
    right *= right
    right /= n - n_left
    score += right
    score[xs[:, lo + 1 : hi + 1] == xs[:, lo:hi]] = -np.inf
    per_feature = score.max(axis=1)
    f = int(np.argmax(per_feature))
    g = float(per_feature[f]) - total * total / n
    if not g > MIN_SPLIT_GAIN:
        return None
    i = int(np.argmax(score[f])) + lo
    thr = 0.5 * (float(xs[f, i]) + float(xs[f, i + 1]))
    return _Split(g, f, thr, i + 1)


def _grow_tree(
    X: np.ndarray, sorted_idx: np.ndarray, sorted_x: np.ndarray, resid: np.ndarray, params: GbdtParams
) -> Tuple[Tree, np.ndarray]:
    """Leaf-wise growth: always split the leaf with the largest gain.

    Returns the tree (feature indices local to ``X``) and the leaf id of every
    training row.
    """
    n = X.shape[0]
    tree = Tree()
    root = tree.add_leaf(resid.mean())
    leaf_of = np.zeros(n, dtype=np.int64)
    members = {root: (sorted_idx, sorted_x)}
    heap: list = []

    def push(node: int):
        split = _best_split(*members[node], resid, params.min_samples_leaf)
        if split is not None:
            heapq.heappush(heap, (-split.gain, node, split))

    push(root)
    while heap and tree.n_leaves < params.num_leaves:
        _, node, split = heapq.heappop(heap)
        idx, xs = members.pop(node)
        rows = idx[0]
        goes_left = np.zeros(n, dtype=bool)
        goes_left[rows] = X[rows, split.feature].astype(np.float64) < split.threshold
        in_left = goes_left[idx].ravel()
        pos_l, pos_r = np.flatnonzero(in_left), np.flatnonzero(~in_left)
        flat_idx, flat_x = idx.ravel(), xs.ravel()
        shape = (idx.shape[0], -1)
        left_idx, right_idx = flat_idx[pos_l].reshape(shape), flat_idx[pos_r].reshape(shape)
        left_x, right_x = flat_x[pos_l].reshape(shape), flat_x[pos_r].reshape(shape)
        li = tree.add_leaf(resid[left_idx[0]].mean())
        ri = tree.add_leaf(resid[right_idx[0]].mean())
        tree.feature[node] = split.feature
        tree.threshold[node] = split.threshold
        tree.left[node] = li
        tree.right[node] = ri
        tree.value[node] = 0.0
        leaf_of[left_idx[0]] = li
        leaf_of[right_idx[0]] = ri
        members[li] = (left_idx, left_x)
        members[ri] = (right_idx, right_x)
        push(li)
        push(ri)
    return tree, leaf_of


def gbdt_fit(
    X: np.ndarray,
    y: np.ndarray,
    valid: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    params: GbdtParams = GbdtParams(),
    seed: int = 0,
    record_train_mse: Optional[list] = None,
) -> GbdtModel:
    """Boost squared-error trees on residuals with validation early stopping.

    The exact split search is deterministic, so ``seed`` only labels the run.
    Columns that are constant over the training rows are skipped; they can
    never produce a split.
    """
    X = np.asarray(X)
    if X.dtype not in (np.float32, np.float64):
        X = X.astype(np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, n_feat = X.shape
    base = float(y.mean())
    model = GbdtModel(base, params.learning_rate, n_feat)
    active = np.nonzero(X.max(axis=0) > X.min(axis=0))[0] if n else np.array([], dtype=np.int64)
    Xa = np.ascontiguousarray(X[:, active])
    sorted_idx = np.ascontiguousarray(np.argsort(Xa, axis=0, kind="stable").T)
    sorted_x = np.take_along_axis(Xa.T, sorted_idx, axis=1)

    pred = np.full(n, base)
    if valid is not None:
        Xv = np.asarray(valid[0], dtype=np.float64)
        yv = np.asarray(valid[1], dtype=np.float64)
        pred_v = np.full(len(yv), base)
        best_mse = float(np.mean((yv - pred_v) ** 2))
    best_iter, since_best = 0, 0
    if record_train_mse is not None:
        record_train_mse.append(float(np.mean((y - pred) ** 2)))

    for it in range(1, params.max_iterations + 1):
        if active.size == 0:
            break
        tree, leaf_of = _grow_tree(Xa, sorted_idx, sorted_x, y - pred, params)
        if tree.n_leaves < 2:
            break
        pred = pred + params.learning_rate * np.asarray(tree.value)[leaf_of]
        tree.feature = [int(active[f]) if f >= 0 else -1 for f in tree.feature]
        model.trees.append(tree)
        if record_train_mse is not None:
            record_train_mse.append(float(np.mean((y - pred) ** 2)))
        if valid is None:
            best_iter = it
            continue
        pred_v = pred_v + params.learning_rate * tree.predict(Xv)
        mse = float(np.mean((yv - pred_v) ** 2))
        if mse < best_mse:
            best_mse, best_iter, since_best = mse, it, 0
        else:
            since_best += 1
            if since_best >= params.early_stopping_rounds:
                log.debug("gbdt early stop at iteration %d (best %d)", it, best_iter)
                break
    model.trees = model.trees[:best_iter]
    return model


def gbdt_predict(model: GbdtModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} columns, got shape {X.shape}")
    out = np.full(X.shape[0], model.base_score)
    for tree in model.trees:
        out += model.learning_rate * tree.predict(X)
    return out


class GbdtRegressor(RegressorMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`gbdt_fit`.

    ``fit`` accepts ``eval_set=(X_valid, y_valid)`` for early stopping.
    3-D inputs ``(n, timesteps, features)`` are flattened timestep-major.
    """

    def __init__(
        self,
        learning_rate: float = 0.1,
        early_stopping_rounds: int = 10,
        max_iterations: int = 100,
        num_leaves: int = 31,
        min_samples_leaf: int = 20,
        random_state: int = 0,
    ):
        self.learning_rate = learning_rate
        self.early_stopping_rounds = early_stopping_rounds
        self.max_iterations = max_iterations
        self.num_leaves = num_leaves
        self.min_samples_leaf = min_samples_leaf
        self.random_state = random_state

    @staticmethod
    def _flat(X):
        X = np.asarray(X)
        return X.reshape(X.shape[0], -1) if X.ndim == 3 else X

    def fit(self, X, y, eval_set=None):
        X, y = check_X_y(self._flat(X), y, dtype=np.float64, y_numeric=True)
        params = GbdtParams(
            self.learning_rate, self.early_stopping_rounds, self.max_iterations, self.num_leaves, self.min_samples_leaf
        )
        if X.shape[0] < 2 * params.min_samples_leaf:
            raise ValueError(f"need at least {2 * params.min_samples_leaf} samples, got {X.shape[0]}")
        valid = None
        if eval_set is not None:
            Xv, yv = eval_set
            Xv = check_array(self._flat(Xv), dtype=np.float64)
            if len(Xv) == 0:
                raise ValueError("eval_set is empty")
            valid = (Xv, np.asarray(yv, dtype=np.float64))
        self.model_ = gbdt_fit(X, y, valid, params, seed=self.random_state)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(self._flat(X), dtype=np.float64)
        return gbdt_predict(self.model_, X)
