"""CART classification tree (Gini impurity) with a preorder JSON form."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .gcn import EmptyDataset

__all__ = ["TreeModel", "dt_fit", "dt_predict", "tree_to_json", "tree_from_json"]

DEFAULT_MAX_DEPTH = 12


@dataclass
class TreeModel:
    """Flat node arrays; ``feature[i] < 0`` marks a leaf predicting ``label[i]``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    label: np.ndarray
    max_depth: int | None

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        def walk(i: int) -> int:
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(int(self.left[i])), walk(int(self.right[i])))

        return walk(0)


def _best_split(x: np.ndarray, y: np.ndarray, n_classes: int):
    """Lowest weighted Gini split as ``(score, feature, threshold)``, or None."""
    n = len(y)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    best = None
    sizes_l = np.arange(1, n)
    sizes_r = n - sizes_l
    for f in range(x.shape[1]):
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        valid = xs[:-1] < xs[1:]
        if not valid.any():
            continue
        counts = np.cumsum(onehot[order], axis=0)[:-1]
        right = counts[-1] + onehot[order[-1]] - counts
        # n * weighted Gini = n_l - sum(l^2)/n_l + n_r - sum(r^2)/n_r
        score = (sizes_l - (counts**2).sum(1) / sizes_l) + (sizes_r - (right**2).sum(1) / sizes_r)
        score = np.where(valid, score, np.inf)
        i = int(np.argmin(score))
        if best is None or score[i] < best[0] - 1e-12:
            thr = (xs[i] + xs[i + 1]) / 2.0
            if not xs[i] <= thr < xs[i + 1]:
                thr = xs[i]
            best = (float(score[i]), f, float(thr))
    return best


def dt_fit(
    features: np.ndarray, labels: np.ndarray, max_depth: int | None = DEFAULT_MAX_DEPTH,
    n_classes: int | None = None,
) -> TreeModel:
    """Grow greedily; a node splits while impure, splittable and above ``max_depth``."""
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=np.int64)
    if len(y) == 0:
        raise EmptyDataset("cannot fit a tree on zero samples")
    n_classes = n_classes or int(y.max()) + 1
    feature, threshold, left, right, label = [], [], [], [], []

    def grow(idx: np.ndarray, depth: int) -> int:
        node = len(feature)
        counts = np.bincount(y[idx], minlength=n_classes)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        label.append(int(np.argmax(counts)))
        if counts.max() == len(idx) or (max_depth is not None and depth >= max_depth):
            return node
        split = _best_split(x[idx], y[idx], n_classes)
        if split is None:
            return node
        _, f, thr = split
        go_left = x[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        left[node] = grow(idx[go_left], depth + 1)
        right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(np.arange(len(y)), 0)
    return TreeModel(np.array(feature), np.array(threshold), np.array(left), np.array(right),
                     np.array(label), max_depth)


def dt_predict(model: TreeModel, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=float)
    node = np.zeros(len(x), dtype=np.int64)
    while True:
        f = model.feature[node]
        inner = f >= 0
        if not inner.any():
            return model.label[node]
        rows = np.nonzero(inner)[0]
        cur = node[rows]
        go_left = x[rows, model.feature[cur]] <= model.threshold[cur]
        node[rows] = np.where(go_left, model.left[cur], model.right[cur])


def tree_to_json(model: TreeModel) -> str:
    out = []

    def emit(i: int) -> None:
        if model.feature[i] < 0:
            out.append({"label": int(model.label[i])})
            return
        out.append({"feature": int(model.feature[i]), "threshold": float(model.threshold[i]),
                    "label": int(model.label[i])})
        emit(int(model.left[i]))
        emit(int(model.right[i]))

    emit(0)
    return json.dumps({"max_depth": model.max_depth, "nodes": out})


def tree_from_json(text: str) -> TreeModel:
    data = json.loads(text)
    items = data["nodes"]
    feature, threshold, left, right, label = [], [], [], [], []
    pos = 0

    def read() -> int:
        nonlocal pos
        item = items[pos]
        pos += 1
        node = len(feature)
        feature.append(int(item.get("feature", -1)))
        threshold.append(float(item.get("threshold", 0.0)))
        left.append(-1)
        right.append(-1)
        label.append(int(item["label"]))
        if feature[node] >= 0:
            left[node] = read()
            right[node] = read()
        return node

    read()
    if pos != len(items):
        raise ValueError("trailing nodes in tree description")
    return TreeModel(np.array(feature), np.array(threshold), np.array(left), np.array(right),
                     np.array(label), data.get("max_depth"))
