"""Fully connected baseline: two ReLU hidden layers and a softmax read-out."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..dataset import FoldPlan, Standardizer
from .adam import AdamState, adam_step
from .dense import ShapeMismatch, cross_entropy, glorot, relu, softmax, softmax_ce_grad
from .gcn import EmptyDataset, FoldResult, TrainConfig

__all__ = ["MlpParams", "init_mlp", "mlp_forward", "mlp_backward", "mlp_predict", "train_mlp"]

HIDDEN = 64
PARAM_ORDER = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass
class MlpParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_ORDER}

    def copy(self) -> "MlpParams":
        return MlpParams(**{k: v.copy() for k, v in self.as_dict().items()})

    @property
    def n_features(self) -> int:
        return self.W1.shape[0]

    @property
    def n_classes(self) -> int:
        return self.W3.shape[1]


def init_mlp(n_features: int, n_classes: int, hidden: int = HIDDEN, seed: int = 0) -> MlpParams:
    rng = np.random.default_rng(seed)
    return MlpParams(
        W1=glorot(rng, n_features, hidden), b1=np.zeros(hidden),
        W2=glorot(rng, hidden, hidden), b2=np.zeros(hidden),
        W3=glorot(rng, hidden, n_classes), b3=np.zeros(n_classes),
    )


def _forward(p: MlpParams, x: np.ndarray) -> dict:
    if x.ndim != 2 or x.shape[1] != p.n_features:
        raise ShapeMismatch(f"features {x.shape} do not match {p.n_features} inputs")
    z1 = x @ p.W1 + p.b1
    h1 = relu(z1)
    z2 = h1 @ p.W2 + p.b2
    h2 = relu(z2)
    probs = softmax(h2 @ p.W3 + p.b3)
    return {"x": x, "z1": z1, "h1": h1, "z2": z2, "h2": h2, "probs": probs}


def mlp_forward(p: MlpParams, x: np.ndarray) -> np.ndarray:
    return _forward(p, x)["probs"]


def _backward(p: MlpParams, labels: np.ndarray, c: dict) -> dict[str, np.ndarray]:
    d3 = softmax_ce_grad(c["probs"], labels)
    d2 = (d3 @ p.W3.T) * (c["z2"] > 0)
    d1 = (d2 @ p.W2.T) * (c["z1"] > 0)
    return {
        "W1": c["x"].T @ d1, "b1": d1.sum(axis=0),
        "W2": c["h1"].T @ d2, "b2": d2.sum(axis=0),
        "W3": c["h2"].T @ d3, "b3": d3.sum(axis=0),
    }


def mlp_backward(p: MlpParams, x: np.ndarray, labels: Sequence[int]) -> dict[str, np.ndarray]:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != x.shape[0]:
        raise ShapeMismatch("one label per sample required")
    return _backward(p, labels, _forward(p, x))


def mlp_predict(p: MlpParams, x: np.ndarray) -> np.ndarray:
    return mlp_forward(p, x).argmax(axis=1)


def train_mlp(
    features: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
    plan: FoldPlan,
    cfg: TrainConfig,
    n_classes: int,
    sessions: Sequence[int] | None = None,
) -> list[FoldResult]:
    """Same budget and fold protocol as the graph model, adjacency ignored.

    ``features[i]``/``labels[i]`` hold the samples of run ``i``; folds index runs.
    """
    if not len(features):
        raise EmptyDataset("no samples to train on")
    results = []
    for t in (range(plan.k) if sessions is None else sessions):
        train_idx, val_idx = plan.split(t)
        x_tr = np.vstack([features[i] for i in train_idx])
        y_tr = np.concatenate([labels[i] for i in train_idx])
        scaler = Standardizer.fit(x_tr)
        x_tr = scaler.transform(x_tr)
        x_va = y_va = None
        if val_idx:
            x_va = scaler.transform(np.vstack([features[i] for i in val_idx]))
            y_va = np.concatenate([labels[i] for i in val_idx])
        params = init_mlp(x_tr.shape[1], n_classes, seed=cfg.seed + t)
        state = AdamState()
        best, best_loss, best_epoch, history = params.copy(), np.inf, 0, []
        for epoch in range(1, cfg.epochs + 1):
            cache = _forward(params, x_tr)
            train_loss = cross_entropy(cache["probs"], y_tr)
            adam_step(params.as_dict(), _backward(params, y_tr, cache), state, cfg.learning_rate)
            row = {"epoch": epoch, "train_loss": train_loss,
                   "train_acc": float(np.mean(cache["probs"].argmax(axis=1) == y_tr))}
            score = train_loss
            if x_va is not None:
                vp = mlp_forward(params, x_va)
                row["val_loss"] = cross_entropy(vp, y_va)
                row["val_acc"] = float(np.mean(vp.argmax(axis=1) == y_va))
                score = row["val_loss"]
            if score < best_loss:
                best, best_loss, best_epoch = params.copy(), score, epoch
            history.append(row)
        results.append(FoldResult(best, scaler, history, best_epoch))
    return results
