"""Two-branch graph convolutional classifier with hand-written gradients.

Layout: a per-node embedding, one graph convolution, a softmax read-out.
Nodes with neighbours convolve over the normalised adjacency; isolated nodes
apply the same convolution weights to their own embedding only.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import LinearOperator

from ..dataset import FoldPlan, Standardizer, TaskGraph
from .adam import AdamState, adam_step
from .dense import ShapeMismatch, cross_entropy, glorot, relu, softmax, softmax_ce_grad

__all__ = [
    "GcnParams",
    "TrainConfig",
    "FoldResult",
    "EmptyDataset",
    "init_gcn",
    "gcn_forward",
    "gcn_loss",
    "gcn_backward",
    "gcn_predict",
    "batch_graphs",
    "standardize_graph",
    "train_gcn",
]

PARAM_ORDER = ("W_embed", "b_embed", "W_conv", "W_out", "b_out")


class EmptyDataset(ValueError):
    pass


@dataclass
class GcnParams:
    W_embed: np.ndarray
    b_embed: np.ndarray
    W_conv: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray

    @property
    def delta(self) -> int:
        return self.W_embed.shape[1]

    @property
    def n_features(self) -> int:
        return self.W_embed.shape[0]

    @property
    def n_classes(self) -> int:
        return self.W_out.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_ORDER}

    def copy(self) -> "GcnParams":
        return GcnParams(**{k: v.copy() for k, v in self.as_dict().items()})

    def check(self) -> None:
        f, d, c = self.n_features, self.delta, self.n_classes
        want = {"W_embed": (f, d), "b_embed": (d,), "W_conv": (d, d), "W_out": (d, c), "b_out": (c,)}
        for name, shape in want.items():
            if getattr(self, name).shape != shape:
                raise ShapeMismatch(f"{name} has shape {getattr(self, name).shape}, want {shape}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.01
    seed: int = 0
    delta: int = 64

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")


@dataclass
class FoldResult:
    params: object
    scaler: Standardizer
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def init_gcn(n_features: int, n_classes: int, delta: int = 64, seed: int = 0) -> GcnParams:
    rng = np.random.default_rng(seed)
    return GcnParams(
        W_embed=glorot(rng, n_features, delta),
        b_embed=np.zeros(delta),
        W_conv=glorot(rng, delta, delta),
        W_out=glorot(rng, delta, n_classes),
        b_out=np.zeros(n_classes),
    )


def _forward(p: GcnParams, g: TaskGraph) -> dict:
    x = g.features
    if x.ndim != 2 or x.shape[1] != p.n_features:
        raise ShapeMismatch(f"features {x.shape} do not match {p.n_features} inputs")
    iso = np.asarray(g.isolated_mask, dtype=bool)[:, None]
    z1 = x @ p.W_embed + p.b_embed
    h1 = relu(z1)
    agg = np.asarray(g.normalized_adjacency @ h1)
    if iso.any():
        agg = np.where(iso, h1, agg)
    z2 = agg @ p.W_conv
    h2 = relu(z2)
    probs = softmax(h2 @ p.W_out + p.b_out)
    return {"z1": z1, "h1": h1, "agg": agg, "z2": z2, "h2": h2, "probs": probs, "iso": iso}


def gcn_forward(p: GcnParams, g: TaskGraph) -> np.ndarray:
    """Class probabilities, one row per node."""
    return _forward(p, g)["probs"]


def gcn_loss(probs: np.ndarray, labels: Sequence[int]) -> float:
    return cross_entropy(probs, np.asarray(labels))


def _backward(p: GcnParams, g: TaskGraph, labels: np.ndarray, c: dict) -> dict[str, np.ndarray]:
    d_logits = softmax_ce_grad(c["probs"], labels)
    grads = {"W_out": c["h2"].T @ d_logits, "b_out": d_logits.sum(axis=0)}
    d_z2 = (d_logits @ p.W_out.T) * (c["z2"] > 0)
    grads["W_conv"] = c["agg"].T @ d_z2
    d_agg = d_z2 @ p.W_conv.T
    d_h1 = np.asarray(g.normalized_adjacency.T @ d_agg)
    if c["iso"].any():
        d_h1 = np.where(c["iso"], d_agg, d_h1)
    d_z1 = d_h1 * (c["z1"] > 0)
    grads["W_embed"] = g.features.T @ d_z1
    grads["b_embed"] = d_z1.sum(axis=0)
    return {name: grads[name] for name in PARAM_ORDER}


def gcn_backward(p: GcnParams, g: TaskGraph, labels: Sequence[int]) -> dict[str, np.ndarray]:
    """Exact gradients of :func:`gcn_loss` for every parameter."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != g.features.shape[0]:
        raise ShapeMismatch("one label per node required")
    return _backward(p, g, labels, _forward(p, g))


def gcn_predict(p: GcnParams, g: TaskGraph) -> np.ndarray:
    return gcn_forward(p, g).argmax(axis=1)


def _clique_groups(adjacency: np.ndarray) -> np.ndarray | None:
    """Component id per node if the graph is a disjoint union of cliques, else None."""
    a = sp.csr_matrix(adjacency)
    _, comp = connected_components(a, directed=False)
    sizes = np.bincount(comp)
    if a.nnz != int((sizes * (sizes - 1)).sum()) or a.diagonal().any():
        return None
    return comp


def _clique_operator(groups: np.ndarray, sizes: np.ndarray) -> LinearOperator:
    """Normalised adjacency of a union of cliques as ``(group sum - self) / (s - 1)``.

    Equal to the explicit matrix since every member of an s-clique has degree s - 1.
    """
    n = len(groups)
    member = sp.csr_matrix((np.ones(n), (np.arange(n), groups)), shape=(n, len(sizes)))
    s = sizes[groups]
    scale = np.where(s > 1, 1.0 / np.maximum(s - 1, 1), 0.0)[:, None]

    def apply(h: np.ndarray) -> np.ndarray:
        h = h.reshape(n, -1)
        return (member @ (member.T @ h) - h) * scale

    return LinearOperator((n, n), matvec=apply, rmatvec=apply, matmat=apply, rmatmat=apply,
                          dtype=float)


def batch_graphs(graphs: Sequence[TaskGraph]) -> TaskGraph:
    """Disjoint union of graphs.

    Unions of cliques get a group-sum operator for the normalised adjacency;
    other graphs fall back to a sparse block-diagonal matrix. Both are exact.
    """
    if not graphs:
        raise EmptyDataset("no graphs to batch")
    feats = np.vstack([g.features for g in graphs])
    iso = np.concatenate([g.isolated_mask for g in graphs])
    labels = None
    if all(g.labels is not None for g in graphs):
        labels = np.concatenate([g.labels for g in graphs])
    groups = [None if g.adjacency is None else _clique_groups(g.adjacency) for g in graphs]
    if all(c is not None for c in groups):
        offset, parts = 0, []
        for c in groups:
            parts.append(c + offset)
            offset += int(c.max()) + 1 if len(c) else 0
        comp = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
        norm = _clique_operator(comp, np.bincount(comp, minlength=offset))
    else:
        norm = sp.block_diag([sp.csr_matrix(g.normalized_adjacency) for g in graphs], format="csr")
    return TaskGraph(feats, None, norm, iso, labels)


def standardize_graph(g: TaskGraph, scaler: Standardizer) -> TaskGraph:
    out = copy.copy(g)
    out.features = scaler.transform(g.features)
    return out


def _accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(probs.argmax(axis=1) == labels)) if len(labels) else 0.0


def train_gcn(
    graphs: Sequence[TaskGraph],
    plan: FoldPlan,
    cfg: TrainConfig,
    n_classes: int,
    sessions: Sequence[int] | None = None,
) -> list[FoldResult]:
    """One training session per fold, full-batch Adam.

    Each session keeps the parameters of its lowest validation loss.
    ``sessions`` restricts training to the listed folds (default: all).
    """
    if not graphs:
        raise EmptyDataset("no graphs to train on")
    results = []
    for t in (range(plan.k) if sessions is None else sessions):
        train_idx, val_idx = plan.split(t)
        if not train_idx:
            raise EmptyDataset(f"fold {t} has no training graphs")
        scaler = Standardizer.fit(np.vstack([graphs[i].features for i in train_idx]))
        train = batch_graphs([standardize_graph(graphs[i], scaler) for i in train_idx])
        val = batch_graphs([standardize_graph(graphs[i], scaler) for i in val_idx]) if val_idx else None
        params = init_gcn(train.features.shape[1], n_classes, cfg.delta, cfg.seed + t)
        state = AdamState()
        best, best_loss, best_epoch, history = params.copy(), np.inf, 0, []
        for epoch in range(1, cfg.epochs + 1):
            cache = _forward(params, train)
            train_loss = cross_entropy(cache["probs"], train.labels)
            grads = _backward(params, train, train.labels, cache)
            adam_step(params.as_dict(), grads, state, cfg.learning_rate)
            row = {"epoch": epoch, "train_loss": train_loss,
                   "train_acc": _accuracy(cache["probs"], train.labels)}
            if val is not None:
                vp = gcn_forward(params, val)
                row["val_loss"] = cross_entropy(vp, val.labels)
                row["val_acc"] = _accuracy(vp, val.labels)
                score = row["val_loss"]
            else:
                score = train_loss
            if score < best_loss:
                best, best_loss, best_epoch = params.copy(), score, epoch
            history.append(row)
        results.append(FoldResult(best, scaler, history, best_epoch))
    return results
