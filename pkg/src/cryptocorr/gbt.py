"""Regression trees and gradient-boosted tree ensembles under squared loss."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, InsufficientDataError, ModelFileError
from .history import EarlyStopping, TrainHistory

DEFAULT_RATES = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
FORMAT = "cryptocorr.gbt"
VERSION = 1


@dataclass
class TreeNode:
    value: float
    n_samples: int
    feature_index: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature_index is None

    @property
    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth, self.right.depth)

    def flatten(self) -> dict[str, list]:
        """Pre-order arrays; leaves have feature -1 and children -1."""
        feature, threshold, left, right, value, count = [], [], [], [], [], []

        def visit(node: TreeNode) -> int:
            i = len(feature)
            feature.append(-1 if node.is_leaf else node.feature_index)
            threshold.append(0.0 if node.is_leaf else node.threshold)
            left.append(-1)
            right.append(-1)
            value.append(node.value)
            count.append(node.n_samples)
            if not node.is_leaf:
                left[i] = visit(node.left)
                right[i] = visit(node.right)
            return i

        visit(self)
        return {"feature": feature, "threshold": threshold, "left": left, "right": right,
                "value": value, "n_samples": count}

    @classmethod
    def unflatten(cls, arrays: dict[str, list]) -> "TreeNode":
        def build(i: int) -> TreeNode:
            f = arrays["feature"][i]
            node = cls(float(arrays["value"][i]), int(arrays["n_samples"][i]))
            if f >= 0:
                node.feature_index = int(f)
                node.threshold = float(arrays["threshold"][i])
                node.left = build(arrays["left"][i])
                node.right = build(arrays["right"][i])
            return node
        return build(0)

    def predict(self, features: np.ndarray) -> np.ndarray:
        flat = _compiled(self)
        x = np.asarray(features, dtype=float)
        node = np.zeros(x.shape[0], dtype=np.intp)
        rows = np.arange(x.shape[0])
        feat, thr, left, right, val = flat
        while True:
            f = feat[node]
            internal = f >= 0
            if not internal.any():
                break
            go_left = x[rows[internal], f[internal]] <= thr[node[internal]]
            node[internal] = np.where(go_left, left[node[internal]], right[node[internal]])
        return val[node]


def _compiled(tree: TreeNode):
    cached = getattr(tree, "_flat_cache", None)
    if cached is None:
        flat = tree.flatten()
        cached = (np.array(flat["feature"], dtype=np.intp), np.array(flat["threshold"]),
                  np.array(flat["left"], dtype=np.intp), np.array(flat["right"], dtype=np.intp),
                  np.array(flat["value"]))
        object.__setattr__(tree, "_flat_cache", cached)
    return cached


def _best_split(x_sorted: np.ndarray, y_sorted: np.ndarray, min_node_size: int):
    """Best cut position in one presorted feature: (score, position) or None.

    Score is Sl^2/nl + Sr^2/nr of node-centered targets; maximizing it minimizes
    the children's total squared error. Position ``i`` puts the first ``i``
    samples left.
    """
    n = y_sorted.size
    lo, hi = min_node_size, n - min_node_size
    if lo > hi or lo < 1:
        return None
    csum = np.cumsum(y_sorted)
    total = csum[-1]
    pos = np.arange(lo, hi + 1)
    pos = pos[x_sorted[pos - 1] < x_sorted[pos]]
    if pos.size == 0:
        return None
    sl = csum[pos - 1]
    score = sl * sl / pos + (total - sl) ** 2 / (n - pos)
    j = int(np.argmax(score))
    return float(score[j]), int(pos[j])


def fit_tree(features, targets, max_depth: int = 6, min_node_size: int = 20,
             _order: np.ndarray | None = None) -> TreeNode:
    """Grow a regression tree by recursive binary splitting.

    Each node takes the split with the largest reduction in squared error
    over all features and midpoints between consecutive distinct values,
    subject to both children holding at least ``min_node_size`` samples.
    Ties go to the lowest feature index, then the lowest threshold. Nodes at
    ``max_depth`` or with constant targets become leaves holding the target
    mean.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.size:
        raise ValueError(f"features {x.shape} and targets {y.shape} do not match")
    n, n_features = x.shape
    if n == 0 or n_features == 0:
        raise DataError("cannot fit a tree to empty data")
    if min_node_size < 1 or max_depth < 0:
        raise ValueError("min_node_size must be >= 1 and max_depth >= 0")
    if n < min_node_size:
        raise InsufficientDataError(f"{n} samples < min_node_size={min_node_size}")
    # sorting canonicalizes row order; stable sort keeps equal values deterministic
    order = _order if _order is not None else np.argsort(x, axis=0, kind="stable")
    orders = [np.ascontiguousarray(order[:, f]) for f in range(n_features)]
    mark = np.zeros(n, dtype=bool)

    def grow(node_orders: list[np.ndarray], depth: int) -> TreeNode:
        idx = node_orders[0]
        y_node = y[idx]
        mean = float(np.mean(y_node))
        node = TreeNode(mean, idx.size)
        if depth >= max_depth or idx.size < 2 * min_node_size or np.ptp(y_node) == 0.0:
            return node
        best = None
        for f in range(n_features):
            o = node_orders[f]
            found = _best_split(x[o, f], y[o] - mean, min_node_size)
            if found is not None and (best is None or found[0] > best[0]):
                best = (found[0], f, found[1])
        if best is None:
            return node
        _, f, pos = best
        o = node_orders[f]
        lo_val, hi_val = x[o[pos - 1], f], x[o[pos], f]
        thr = (lo_val + hi_val) / 2.0
        if thr >= hi_val:
            thr = lo_val
        left_idx = o[:pos]
        mark[left_idx] = True
        left_orders, right_orders = [], []
        for of in node_orders:
            m = mark[of]
            left_orders.append(of[m])
            right_orders.append(of[~m])
        mark[left_idx] = False
        node.feature_index = f
        node.threshold = float(thr)
        node.left = grow(left_orders, depth + 1)
        node.right = grow(right_orders, depth + 1)
        return node

    return grow(orders, 0)


@dataclass
class GbtModel:
    base_prediction: float
    learning_rate: float
    n_features: int
    max_depth: int = 6
    min_node_size: int = 20
    trees: list[TreeNode] = field(default_factory=list)

    def predict(self, features) -> np.ndarray:
        return gbt_predict(self, features)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT, "version": VERSION,
            "base_prediction": self.base_prediction, "learning_rate": self.learning_rate,
            "n_features": self.n_features,
            "tree_params": {"max_depth": self.max_depth, "min_node_size": self.min_node_size},
            "trees": [t.flatten() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbtModel":
        if d.get("format") != FORMAT or d.get("version") != VERSION:
            raise ModelFileError(f"not a {FORMAT} v{VERSION} model")
        return cls(float(d["base_prediction"]), float(d["learning_rate"]), int(d["n_features"]),
                   int(d["tree_params"]["max_depth"]), int(d["tree_params"]["min_node_size"]),
                   [TreeNode.unflatten(t) for t in d["trees"]])

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "GbtModel":
        if not os.path.exists(path):
            raise ModelFileError(f"model file not found: {path}")
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def gbt_predict(model: GbtModel, features) -> np.ndarray:
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise ValueError(f"model expects {model.n_features} features, got shape {x.shape}")
    pred = np.full(x.shape[0], model.base_prediction)
    # same accumulation order as training, so in-sample predictions match bitwise
    for tree in model.trees:
        pred = pred + model.learning_rate * tree.predict(x)
    return pred


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    diff = a - b
    return float(diff @ diff) / diff.size


def fit_gbt(train, validation, learning_rate: float, max_iterations: int = 500,
            patience: int = 20, max_depth: int = 6,
            min_node_size: int = 20) -> tuple[GbtModel, TrainHistory]:
    """Friedman gradient boosting with squared loss and validation early stopping.

    ``train`` and ``validation`` are ``(features, targets)`` pairs. Iteration 0
    is the constant training-mean model. The returned model keeps the trees up
    to the iteration with the lowest validation MSE. For ``learning_rate <= 1``
    the training MSE never increases between iterations.
    """
    x, y = (np.asarray(a, dtype=float) for a in train)
    xv, yv = (np.asarray(a, dtype=float) for a in validation)
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    if yv.size == 0:
        raise DataError("validation set is empty")
    if y.size == 0:
        raise DataError("training set is empty")
    if xv.ndim != 2 or xv.shape[1] != x.shape[1]:
        raise ValueError("validation features do not match training features")

    base = float(np.mean(y))
    pred = np.full(y.size, base)
    val_pred = np.full(yv.size, base)
    order = np.argsort(x, axis=0, kind="stable")
    trees: list[TreeNode] = []
    history = TrainHistory()
    stopper = EarlyStopping(patience)

    history.record(0, _mse(pred, y), _mse(val_pred, yv))
    stop = stopper.step(0, history.val_loss[-1])
    m = 0
    while not stop and m < max_iterations:
        m += 1
        tree = fit_tree(x, y - pred, max_depth, min_node_size, _order=order)
        trees.append(tree)
        pred = pred + learning_rate * tree.predict(x)
        val_pred = val_pred + learning_rate * tree.predict(xv)
        history.record(m, _mse(pred, y), _mse(val_pred, yv))
        stop = stopper.step(m, history.val_loss[-1])

    history.checkpoint_iteration = stopper.best_iteration
    model = GbtModel(base, float(learning_rate), x.shape[1], max_depth, min_node_size,
                     trees[:stopper.best_iteration])
    return model, history


def contiguous_folds(n: int, folds: int) -> list[np.ndarray]:
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if n < folds:
        raise InsufficientDataError(f"{n} samples cannot form {folds} folds")
    return np.array_split(np.arange(n), folds)


def grid_search_lr(features, targets, candidate_rates: Sequence[float] = DEFAULT_RATES,
                   folds: int = 10, **fit_kwargs) -> tuple[float, dict[float, float]]:
    """Pick the learning rate with the lowest mean held-out-fold MSE.

    Folds are contiguous time blocks; each block in turn is the validation
    set for early stopping and scoring while the rest is used for training.
    Returns the best rate (ties go to the smaller rate) and all mean scores.
    """
    if len(candidate_rates) == 0:
        raise ValueError("candidate_rates is empty")
    x = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    blocks = contiguous_folds(y.size, folds)
    scores = {}
    for rate in sorted(candidate_rates):
        losses = []
        for k, val_idx in enumerate(blocks):
            train_idx = np.concatenate([b for j, b in enumerate(blocks) if j != k])
            _, hist = fit_gbt((x[train_idx], y[train_idx]), (x[val_idx], y[val_idx]),
                              rate, **fit_kwargs)
            losses.append(hist.best_val_loss)
        scores[float(rate)] = float(np.mean(losses))
    best = min(scores, key=lambda r: (scores[r], r))
    return best, scores
