"""Per-task feature vectors, task graphs, k-fold plans and dataset files."""

from __future__ import annotations

import csv
import enum
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .cost_model import LoadTable, QueuingParams, loads_from_choices, network_cost
from .topology import DecisionCatalog, HopMatrix, Topology
from .workload import RUN_COLUMNS, TaskRequest

__all__ = [
    "DELAY_SENTINEL",
    "DATASET_VERSION",
    "EdgeRule",
    "TaskGraph",
    "FoldPlan",
    "Dataset",
    "Standardizer",
    "MissingLabels",
    "TooFewSamples",
    "FormatError",
    "n_features",
    "build_features",
    "request_loads",
    "run_features",
    "build_graph",
    "normalize_adjacency",
    "kfold_split",
    "save_dataset",
    "load_dataset",
    "save_fold_plan",
    "load_fold_plan",
    "save_runs",
    "load_runs",
]

# Stand-in for an unbounded delay; far above any deadline in use.
DELAY_SENTINEL = 10.0
DATASET_VERSION = 1


class MissingLabels(ValueError):
    pass


class TooFewSamples(ValueError):
    pass


class FormatError(ValueError):
    pass


class EdgeRule(str, enum.Enum):
    SAME_AP = "same_ap"
    SAME_LABEL_NODE = "same_label_node"


def n_features(topology: Topology) -> int:
    return 2 * len(topology.compute_ids) + 1


def build_features(
    k: TaskRequest, loads: LoadTable, topology: Topology, q: QueuingParams
) -> np.ndarray:
    """``[deadline | delay per compute node | stable per compute node]``."""
    nodes = topology.compute_ids
    out = np.empty(2 * len(nodes) + 1)
    out[0] = k.deadline_s
    for i, n in enumerate(nodes):
        slack = topology.capacity(n) / q.f_bar - loads.at(n)
        stable = slack > 0
        out[1 + i] = 1.0 / slack if stable else DELAY_SENTINEL
        out[1 + len(nodes) + i] = 1.0 if stable else 0.0
    return out


def _cheapest(k: TaskRequest, catalog: DecisionCatalog, hops: HopMatrix):
    return min(catalog, key=lambda d: (network_cost(k, d, hops), catalog.index(d)))


def request_loads(
    run: Sequence[TaskRequest], ap: int, catalog: DecisionCatalog, hops: HopMatrix
) -> LoadTable:
    """Load seen from one access point before any placement is decided.

    Every request entering through ``ap`` is put on its cheapest catalog
    decision; requests from other access points are not visible. Only
    request-time information is used, so no label can leak in.
    """
    picks = [(_cheapest(k, catalog, hops), k.arrival_rate) for k in run if k.ap == ap]
    return loads_from_choices(picks)


def run_features(
    run: Sequence[TaskRequest],
    topology: Topology,
    q: QueuingParams,
    catalog: DecisionCatalog,
    hops: HopMatrix,
) -> np.ndarray:
    """Feature matrix for a run, one row per task in the given order.

    Tasks of one access point share every slot except the deadline, so each
    access point is computed once.
    """
    if not run:
        return np.zeros((0, n_features(topology)))
    by_ap: dict[int, list[int]] = {}
    for i, k in enumerate(run):
        by_ap.setdefault(k.ap, []).append(i)
    out = np.empty((len(run), n_features(topology)))
    for ap, rows in by_ap.items():
        # Route cost scales by each task's own rate and size, so the cheapest
        # decision is shared by every task of the access point.
        best = _cheapest(run[rows[0]], catalog, hops)
        loads = loads_from_choices((best, run[i].arrival_rate) for i in rows)
        out[rows] = build_features(run[rows[0]], loads, topology, q)
        out[rows, 0] = [run[i].deadline_s for i in rows]
    return out


@dataclass
class TaskGraph:
    features: np.ndarray
    adjacency: np.ndarray
    normalized_adjacency: np.ndarray
    isolated_mask: np.ndarray
    labels: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.features.shape[0]


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """``D^-1/2 A D^-1/2``; rows of isolated nodes stay zero."""
    deg = a.sum(axis=1)
    inv = np.zeros_like(deg, dtype=float)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    return a * inv[:, None] * inv[None, :]


def build_graph(
    features: np.ndarray,
    rule: EdgeRule | str = EdgeRule.SAME_AP,
    aps: Sequence[int] | None = None,
    labels: Sequence[int] | None = None,
    catalog: DecisionCatalog | None = None,
) -> TaskGraph:
    """Task graph of one run.

    SAME_AP links tasks entering through the same access point; SAME_LABEL_NODE
    links tasks whose labelled decisions share a node and needs the labels.
    """
    rule = EdgeRule(rule)
    n = features.shape[0]
    if rule is EdgeRule.SAME_AP:
        if aps is None or len(aps) != n:
            raise ValueError("SAME_AP needs one access point per task")
        key = np.asarray(aps)
        a = (key[:, None] == key[None, :]).astype(float)
    else:
        if labels is None or catalog is None:
            raise MissingLabels("SAME_LABEL_NODE needs labels and the decision catalog")
        members = np.zeros((n, 0))
        if n:
            node_ids = sorted({x for d in catalog for x in d.nodes})
            col = {x: c for c, x in enumerate(node_ids)}
            members = np.zeros((n, len(node_ids)))
            for i, lab in enumerate(labels):
                for x in catalog[int(lab)].nodes:
                    members[i, col[x]] = 1.0
        a = ((members @ members.T) > 0).astype(float)
    np.fill_diagonal(a, 0.0)
    lab = None if labels is None else np.asarray(labels, dtype=np.int64)
    return TaskGraph(
        features=np.asarray(features, dtype=float),
        adjacency=a,
        normalized_adjacency=normalize_adjacency(a),
        isolated_mask=a.sum(axis=1) == 0,
        labels=lab,
    )


# --- standardisation -------------------------------------------------------


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std[std == 0] = 1.0
        return cls(mean, std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale


# --- folds ----------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[tuple[int, ...], ...]
    seed: int
    k: int

    def split(self, t: int) -> tuple[list[int], list[int]]:
        """``(train, validation)`` indices for session ``t``."""
        val = list(self.folds[t])
        train = [i for f, fold in enumerate(self.folds) if f != t for i in fold]
        return sorted(train), sorted(val)


def kfold_split(n_samples: int, k: int = 10, seed: int = 0) -> FoldPlan:
    if k < 1:
        raise ValueError("k must be >= 1")
    if n_samples < k:
        raise TooFewSamples(f"{n_samples} samples cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(n_samples)
    folds = tuple(tuple(int(i) for i in chunk) for chunk in np.array_split(perm, k))
    return FoldPlan(folds, seed, k)


def save_fold_plan(plan: FoldPlan, path) -> None:
    doc = {"seed": plan.seed, "k": plan.k, "folds": [list(f) for f in plan.folds]}
    _atomic_write(path, json.dumps(doc))


def load_fold_plan(path) -> FoldPlan:
    with open(path) as fh:
        data = json.load(fh)
    return FoldPlan(tuple(tuple(int(i) for i in f) for f in data["folds"]),
                    int(data["seed"]), int(data["k"]))


# --- dataset files --------------------------------------------------------


@dataclass
class Dataset:
    """Labelled samples; rows of one run are contiguous and in task order."""

    run_id: np.ndarray
    task_id: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def run_ids(self) -> list[int]:
        return list(dict.fromkeys(int(r) for r in self.run_id))

    def rows_of(self, run_id: int) -> np.ndarray:
        return np.nonzero(self.run_id == run_id)[0]

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.run_id, other.run_id)
            and np.array_equal(self.task_id, other.task_id)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


def _header(n_feat: int) -> list[str]:
    return ["run_id", "task_id"] + [f"f{i:02d}" for i in range(n_feat)] + ["label"]


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _config_line(config: dict | None) -> str:
    return "" if config is None else "# config: " + json.dumps(config, sort_keys=True) + "\n"


def save_dataset(path, data: Dataset, config: dict | None = None) -> None:
    """Version line, optional ``# config:`` line, header, one row per sample."""
    n_feat = data.features.shape[1]
    buf = io.StringIO()
    buf.write(f"# coin-placer dataset v{DATASET_VERSION}\n")
    buf.write(_config_line(config))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_header(n_feat))
    for r, t, x, y in zip(data.run_id, data.task_id, data.features, data.labels):
        w.writerow([int(r), int(t), *(repr(float(v)) for v in x), int(y)])
    _atomic_write(path, buf.getvalue())


def load_dataset(path) -> Dataset:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"# coin-placer dataset v{DATASET_VERSION}":
            raise FormatError(f"unsupported dataset version line: {first!r}")
        lines = [ln for ln in fh.read().splitlines() if not ln.startswith("#")]
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("missing header row") from None
    n_feat = len(header) - 3
    if n_feat < 1 or header != _header(n_feat):
        raise FormatError("header does not match run_id,task_id,fNN...,label")
    runs, tasks, feats, labels = [], [], [], []
    for line_no, row in enumerate(reader, start=3):
        if len(row) != len(header):
            raise FormatError(f"line {line_no}: expected {len(header)} columns, got {len(row)}")
        try:
            runs.append(int(row[0]))
            tasks.append(int(row[1]))
            feats.append([float(v) for v in row[2:-1]])
            labels.append(int(row[-1]))
        except ValueError as exc:
            raise FormatError(f"line {line_no}: {exc}") from None
    x = np.array(feats, dtype=float).reshape(len(feats), n_feat)
    if not np.isfinite(x).all():
        raise FormatError("non-finite feature value")
    return Dataset(np.array(runs, dtype=np.int64), np.array(tasks, dtype=np.int64), x,
                   np.array(labels, dtype=np.int64))


# --- run sidecar ------------------------------------------------------------

RUNS_COLUMNS = ["run_id"] + RUN_COLUMNS


def save_runs(path, runs: Sequence[tuple[int, Sequence[TaskRequest]]],
              config: dict | None = None) -> None:
    """The raw requests behind a dataset, needed for access-point edges and re-solving."""
    buf = io.StringIO()
    buf.write(_config_line(config))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUNS_COLUMNS)
    for run_id, run in runs:
        for k in run:
            w.writerow([run_id, k.task_id, k.ap, repr(k.size_mb), repr(k.workload_cycles),
                        repr(k.deadline_s), repr(k.arrival_rate)])
    _atomic_write(path, buf.getvalue())


def load_runs(path) -> dict[int, list[TaskRequest]]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh.read().splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames != RUNS_COLUMNS:
        raise FormatError(f"runs header must be {','.join(RUNS_COLUMNS)}")
    out: dict[int, list[TaskRequest]] = {}
    for row in reader:
        try:
            k = TaskRequest(int(row["task_id"]), int(row["ap"]), float(row["size_mb"]),
                            float(row["workload_cycles"]), float(row["deadline_s"]),
                            float(row["arrival_rate"]))
            out.setdefault(int(row["run_id"]), []).append(k)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"bad runs row {row}: {exc}") from None
    return out
