"""Synthetic rendering-request runs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Sequence, Union

import numpy as np

from .topology import Topology

__all__ = [
    "TaskRequest",
    "RunSpec",
    "InvalidSpec",
    "UnknownScenario",
    "SCENARIOS",
    "DEFAULT_TASKS_PER_RUN",
    "generate_run",
    "rate_sweep",
    "scenario_params",
    "write_run_csv",
    "read_run_csv",
]

# 1,375,000 samples over 5,000 runs
DEFAULT_TASKS_PER_RUN = 275

SCENARIOS = {"strict": (0.010, 0.150), "relaxed": (0.050, 0.150)}

Param = Union[float, tuple[float, float]]


class InvalidSpec(ValueError):
    pass


class UnknownScenario(KeyError):
    pass


@dataclass(frozen=True)
class TaskRequest:
    task_id: int
    ap: int
    size_mb: float
    workload_cycles: float
    deadline_s: float
    arrival_rate: float


@dataclass(frozen=True)
class RunSpec:
    """Parameters of one run. ``size_mb``, ``workload_cycles`` and
    ``arrival_rate`` take either a constant or a ``(lo, hi)`` uniform range."""

    n_tasks: int = DEFAULT_TASKS_PER_RUN
    deadline_range_s: tuple[float, float] = SCENARIOS["strict"]
    size_mb: Param = 10.0
    workload_cycles: Param = 1e7
    arrival_rate: Param = 10.0
    seed: int = 0

    def check(self) -> None:
        if self.n_tasks < 1:
            raise InvalidSpec(f"n_tasks must be >= 1, got {self.n_tasks}")
        lo, hi = self.deadline_range_s
        if not 0 < lo < hi:
            raise InvalidSpec(f"deadline range must satisfy 0 < lo < hi, got {lo}, {hi}")
        for name in ("size_mb", "workload_cycles", "arrival_rate"):
            value = getattr(self, name)
            bounds = value if isinstance(value, tuple) else (value, value)
            if len(bounds) != 2 or not 0 < bounds[0] <= bounds[1]:
                raise InvalidSpec(f"{name} must be positive, got {value}")


def _draw(rng: np.random.Generator, value: Param, n: int) -> np.ndarray:
    if isinstance(value, tuple):
        return rng.uniform(value[0], value[1], n)
    return np.full(n, float(value))


def generate_run(spec: RunSpec, topology: Topology) -> list[TaskRequest]:
    """Draw ``spec.n_tasks`` requests; the same spec always yields the same run."""
    spec.check()
    aps = topology.ap_ids
    if not aps:
        raise InvalidSpec("topology has no access points")
    rng = np.random.default_rng(spec.seed)
    n = spec.n_tasks
    # Fixed draw order keeps runs paired across rate overrides.
    deadlines = rng.uniform(*spec.deadline_range_s, n)
    ap_idx = rng.integers(0, len(aps), n)
    sizes = _draw(rng, spec.size_mb, n)
    work = _draw(rng, spec.workload_cycles, n)
    rates = _draw(rng, spec.arrival_rate, n)
    return [
        TaskRequest(
            task_id=i,
            ap=aps[int(ap_idx[i])],
            size_mb=float(sizes[i]),
            workload_cycles=float(work[i]),
            deadline_s=float(deadlines[i]),
            arrival_rate=float(rates[i]),
        )
        for i in range(n)
    ]


def rate_sweep(
    spec: RunSpec, topology: Topology, rates: Sequence[float]
) -> list[list[TaskRequest]]:
    """One run per arrival rate; every other field is identical across runs."""
    if len(rates) == 0:
        raise InvalidSpec("rate sweep needs at least one rate")
    if any(not r > 0 for r in rates):
        raise InvalidSpec(f"rates must be positive, got {list(rates)}")
    return [generate_run(replace(spec, arrival_rate=float(r)), topology) for r in rates]


def scenario_params(name: str) -> tuple[float, float]:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise UnknownScenario(name) from None


RUN_COLUMNS = ["task_id", "ap", "size_mb", "workload_cycles", "deadline_s", "arrival_rate"]


def write_run_csv(run: Sequence[TaskRequest], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RUN_COLUMNS)
        for k in run:
            w.writerow([k.task_id, k.ap, repr(k.size_mb), repr(k.workload_cycles),
                        repr(k.deadline_s), repr(k.arrival_rate)])


def read_run_csv(path) -> list[TaskRequest]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        TaskRequest(int(r["task_id"]), int(r["ap"]), float(r["size_mb"]),
                    float(r["workload_cycles"]), float(r["deadline_s"]),
                    float(r["arrival_rate"]))
        for r in rows
    ]
