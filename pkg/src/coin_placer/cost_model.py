"""Execution time, M/M/1 queueing delay, network cost and the placement constraints."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .topology import FO, PO, Decision, DecisionCatalog, HopMatrix, NodeKind, Topology
from .workload import TaskRequest

__all__ = [
    "UNSTABLE",
    "DEFAULT_F_BAR",
    "CouplingRule",
    "QueuingParams",
    "LoadTable",
    "Assignment",
    "UnknownNode",
    "service_rate",
    "exec_time",
    "node_load",
    "queue_load",
    "queue_delay",
    "deadline_ok",
    "network_cost",
    "system_cost",
    "feasible",
]

UNSTABLE = math.inf

# Average compute allocation per request (cycles). Half the default workload:
# each request is served as two independent sub-tasks, which keeps a 275-task
# run at 10 req/s inside the network's capacity.
DEFAULT_F_BAR = 5e6


class UnknownNode(KeyError):
    pass


class CouplingRule(str, enum.Enum):
    """How the PO-versus-FO delay comparison binds.

    FO_NOT_SLOWER: a full offload is admissible only if the MEC is no slower
    than the fastest COIN alternative at the same loads.
    PO_NOT_SLOWER: a COIN placement is admissible only if it is no slower than
    the MEC at the same loads.
    """

    FO_NOT_SLOWER = "fo_not_slower"
    PO_NOT_SLOWER = "po_not_slower"
    OFF = "off"


@dataclass(frozen=True)
class QueuingParams:
    f_bar: float = DEFAULT_F_BAR
    coupling: CouplingRule = CouplingRule.FO_NOT_SLOWER

    def __post_init__(self) -> None:
        if not self.f_bar > 0:
            raise ValueError(f"f_bar must be positive, got {self.f_bar}")
        object.__setattr__(self, "coupling", CouplingRule(self.coupling))


@dataclass(frozen=True)
class LoadTable:
    """Aggregate arrival rates.

    ``node[i]`` sums the rates of every task whose decision touches node ``i``;
    ``executor[d]`` sums the rates of the tasks that chose exactly ``d``.
    """

    node: Mapping[int, float] = field(default_factory=dict)
    executor: Mapping[Decision, float] = field(default_factory=dict)

    def at(self, node_id: int) -> float:
        return self.node.get(node_id, 0.0)


@dataclass
class Assignment:
    choice: dict[int, Decision]
    run: Sequence[TaskRequest]
    topology: Topology
    catalog: DecisionCatalog | None = None

    def tasks(self) -> dict[int, TaskRequest]:
        return {k.task_id: k for k in self.run}


def _capacity(t: Topology, node_id: int) -> float:
    try:
        return t.capacity(node_id)
    except KeyError:
        raise UnknownNode(node_id) from None


def service_rate(d: Decision, t: Topology, q: QueuingParams) -> float:
    """Requests per second the decision's executor(s) can serve."""
    return sum(_capacity(t, n) for n in d.nodes) / q.f_bar


def exec_time(d: Decision, k: TaskRequest, t: Topology) -> float:
    return k.workload_cycles / sum(_capacity(t, n) for n in d.nodes)


def loads_from_choices(
    choices: Iterable[tuple[Decision, float]],
) -> LoadTable:
    node: dict[int, float] = {}
    executor: dict[Decision, float] = {}
    for d, rate in choices:
        executor[d] = executor.get(d, 0.0) + rate
        for n in d.nodes:
            node[n] = node.get(n, 0.0) + rate
    return LoadTable(node, executor)


def node_load(a: Assignment) -> LoadTable:
    tasks = a.tasks()
    return loads_from_choices(
        (d, tasks[tid].arrival_rate) for tid, d in sorted(a.choice.items()) if d is not None
    )


def queue_load(d: Decision, loads: LoadTable) -> float:
    """Arrival rate competing for the executor(s) of ``d``.

    A COIN pair is one queue fed by the tasks placed on that pair, plus any
    single-node or MEC placements sharing one of its nodes. Single nodes and
    the MEC see every task that touches them.
    """
    if isinstance(d, PO):
        total = loads.executor.get(d, 0.0)
        for other, rate in loads.executor.items():
            if not isinstance(other, PO) and set(other.nodes) & {d.c0, d.c1}:
                total += rate
        return total
    return loads.at(d.nodes[0])


def queue_delay(
    d: Decision, k: TaskRequest | None, loads: LoadTable, q: QueuingParams, t: Topology
) -> float:
    """Mean M/M/1 sojourn time, or ``UNSTABLE`` when arrivals reach the service rate."""
    slack = service_rate(d, t, q) - queue_load(d, loads)
    if slack <= 0:
        return UNSTABLE
    return 1.0 / slack


def deadline_ok(
    d: Decision, k: TaskRequest, loads: LoadTable, q: QueuingParams, t: Topology
) -> bool:
    delay = queue_delay(d, k, loads, q, t)
    return math.isfinite(delay) and delay <= k.deadline_s


def network_cost(k: TaskRequest, d: Decision, hops: HopMatrix) -> float:
    """Traffic cost in MB*hops/s."""
    try:
        if isinstance(d, PO):
            h = hops(k.ap, d.c0) + hops(d.c0, d.c1)
        else:
            h = hops(k.ap, d.nodes[0])
    except KeyError as exc:
        raise UnknownNode(exc.args[0]) from None
    return k.arrival_rate * k.size_mb * h


def system_cost(a: Assignment, hops: HopMatrix) -> float:
    tasks = a.tasks()
    # Fixed summation order: equal assignments give bit-identical totals.
    return math.fsum(
        network_cost(tasks[tid], d, hops) for tid, d in sorted(a.choice.items()) if d is not None
    )


def _alternatives(a: Assignment, d: Decision) -> list[Decision]:
    if a.catalog is not None:
        pool = list(a.catalog)
    else:
        pool = [FO(e) for e in a.topology.ids(NodeKind.MEC)]
    if isinstance(d, FO):
        return [x for x in pool if not isinstance(x, FO)]
    return [x for x in pool if isinstance(x, FO)]


def feasible(a: Assignment, q: QueuingParams) -> tuple[bool, list[str]]:
    """Check every constraint of the placement problem; list each violation."""
    violations: list[str] = []
    loads = node_load(a)
    t = a.topology
    for k in a.run:
        d = a.choice.get(k.task_id)
        if d is None:
            violations.append(f"Unassigned: task {k.task_id}")
            continue
        delay = queue_delay(d, k, loads, q, t)
        if not math.isfinite(delay):
            violations.append(f"Stability: task {k.task_id} on {d}")
            continue
        if delay > k.deadline_s:
            violations.append(
                f"Deadline: task {k.task_id} on {d} delay {delay:.6g}s > {k.deadline_s:.6g}s"
            )
        if q.coupling is CouplingRule.OFF:
            continue
        binds = isinstance(d, FO) == (q.coupling is CouplingRule.FO_NOT_SLOWER)
        alts = _alternatives(a, d) if binds else []
        if alts:
            best = min(queue_delay(x, k, loads, q, t) for x in alts)
            if delay > best:
                violations.append(
                    f"Coupling: task {k.task_id} on {d} delay {delay:.6g}s > "
                    f"alternative {best:.6g}s"
                )
    return not violations, violations
