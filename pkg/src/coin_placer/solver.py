"""Exact placement: exhaustive oracle and depth-first branch-and-bound.

Both searches minimise the summed network cost subject to every task meeting
its deadline on a stable queue (plus the PO/FO delay-coupling rule). Loads
couple the tasks: a queue's delay depends on everything placed on it, so
decisions are never evaluated per task in isolation.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cost_model import (
    Assignment,
    CouplingRule,
    QueuingParams,
    feasible,
    network_cost,
    service_rate,
    system_cost,
)
from .topology import FO, PO, DecisionCatalog, HopMatrix, Topology, hop_matrix
from .workload import TaskRequest

__all__ = [
    "SolverStats",
    "SolverConfig",
    "Solution",
    "TooLarge",
    "NotOptimal",
    "brute_force",
    "branch_and_bound",
    "solve",
    "label_run",
]

# Relative slack used when a float comparison decides whether to prune.
_TOL = 1e-9


class TooLarge(ValueError):
    pass


class NotOptimal(RuntimeError):
    pass


@dataclass
class SolverStats:
    nodes_explored: int = 0
    pruned: int = 0
    wall_time_s: float = 0.0


@dataclass(frozen=True)
class SolverConfig:
    time_limit_s: float = 60.0
    brute_force_max_tasks: int = 8

    def __post_init__(self) -> None:
        if not self.time_limit_s > 0:
            raise ValueError("time_limit_s must be positive")
        if self.brute_force_max_tasks < 1:
            raise ValueError("brute_force_max_tasks must be >= 1")


@dataclass
class Solution:
    assignment: Assignment
    cost: float
    optimal: bool
    stats: SolverStats = field(default_factory=SolverStats)
    status: str = "optimal"  # optimal | infeasible | timeout

    def labels(self, catalog: DecisionCatalog) -> dict[int, int]:
        return {tid: catalog.index(d) for tid, d in self.assignment.choice.items()}


def _queue_structure(catalog: DecisionCatalog) -> np.ndarray:
    """``M[j, i] = 1`` when tasks on decision ``i`` load the queue of decision ``j``."""
    n = len(catalog)
    m = np.zeros((n, n), dtype=np.int8)
    for j, d in enumerate(catalog):
        for i, other in enumerate(catalog):
            shared = set(d.nodes) & set(other.nodes)
            if isinstance(d, PO):
                hit = i == j or (shared and not isinstance(other, PO))
            else:
                hit = bool(shared)
            m[j, i] = 1 if hit else 0
    return m


def _finish(run, catalog, topology, choice, hops, stats, start, optimal, status) -> Solution:
    a = Assignment(dict(choice), list(run), topology, catalog)
    stats.wall_time_s = time.perf_counter() - start
    return Solution(a, system_cost(a, hops), optimal, stats, status)


# --- exhaustive oracle ----------------------------------------------------


def brute_force(
    run: Sequence[TaskRequest],
    catalog: DecisionCatalog,
    topology: Topology,
    q: QueuingParams,
    cfg: SolverConfig | None = None,
    hops: HopMatrix | None = None,
) -> Solution:
    """Enumerate every assignment; keep the cheapest feasible one.

    Ties go to the lexicographically smallest decision-index vector (tasks in
    id order). Candidates are screened in bulk with numpy, then confirmed with
    the scalar constraint check.
    """
    cfg = cfg or SolverConfig()
    start = time.perf_counter()
    hops = hops or hop_matrix(topology)
    tasks = sorted(run, key=lambda k: k.task_id)
    n, nd = len(tasks), len(catalog)
    if n > cfg.brute_force_max_tasks:
        raise TooLarge(f"{n} tasks exceeds brute-force limit {cfg.brute_force_max_tasks}")
    stats = SolverStats()
    if n == 0:
        return _finish(run, catalog, topology, {}, hops, stats, start, True, "optimal")

    rate = np.array([k.arrival_rate for k in tasks])
    deadline = np.array([k.deadline_s for k in tasks])
    cost = np.array([[network_cost(k, d, hops) for d in catalog] for k in tasks])
    mu = np.array([service_rate(d, topology, q) for d in catalog])
    share = _queue_structure(catalog).astype(float)
    is_fo = np.array([isinstance(d, FO) for d in catalog])

    candidates: list[tuple[float, tuple[int, ...]]] = []
    chunk = max(1, 200_000 // max(n, 1))
    combos = itertools.product(range(nd), repeat=n)
    while True:
        block = np.array(list(itertools.islice(combos, chunk)), dtype=np.int64)
        if block.size == 0:
            break
        stats.nodes_explored += len(block)
        onehot = np.zeros((len(block), n, nd))
        np.put_along_axis(onehot, block[..., None], 1.0, axis=2)
        executor = np.einsum("bkd,k->bd", onehot, rate)
        qload = executor @ share.T
        slack = mu[None, :] - qload
        with np.errstate(divide="ignore"):
            delay_q = np.where(slack > 0, 1.0 / np.where(slack > 0, slack, 1.0), np.inf)
        delay = np.take_along_axis(delay_q, block, axis=1)
        ok = np.all(delay <= deadline[None, :] * (1 + _TOL), axis=1)
        if q.coupling is not CouplingRule.OFF:
            fo_task = is_fo[block]
            binds = fo_task if q.coupling is CouplingRule.FO_NOT_SLOWER else ~fo_task
            alt_cols = ~is_fo if q.coupling is CouplingRule.FO_NOT_SLOWER else is_fo
            if alt_cols.any():
                best_alt = delay_q[:, alt_cols].min(axis=1)
                bad = binds & (delay > best_alt[:, None] * (1 + _TOL))
                ok &= ~bad.any(axis=1)
        total = np.take_along_axis(cost[None, :, :], block[..., None], axis=2)[..., 0].sum(1)
        for idx in np.nonzero(ok)[0]:
            candidates.append((float(total[idx]), tuple(int(x) for x in block[idx])))

    candidates.sort()
    best: tuple[float, tuple[int, ...]] | None = None
    for approx, vec in candidates:
        if best is not None and approx > best[0] * (1 + 1e-9) + 1e-12:
            break
        choice = {k.task_id: catalog[j] for k, j in zip(tasks, vec)}
        a = Assignment(choice, tasks, topology, catalog)
        if not feasible(a, q)[0]:
            continue
        exact = system_cost(a, hops)
        if best is None or (exact, vec) < best:
            best = (exact, vec)
    if best is None:
        return _finish(run, catalog, topology, {}, hops, stats, start, False, "infeasible")
    choice = {k.task_id: catalog[j] for k, j in zip(tasks, best[1])}
    return _finish(run, catalog, topology, choice, hops, stats, start, True, "optimal")


# --- branch and bound -----------------------------------------------------


def _transport(supply, unit_cost, capacity):
    """Min-cost transportation problem.

    ``supply[c]`` units leave row ``c``; queue ``j`` absorbs at most
    ``capacity[j]``; one unit from ``c`` to ``j`` costs ``unit_cost[c][j]``
    (``inf`` forbids the pair). Every row starts on its cheapest queue, then
    overflow is pushed along shortest paths between queues, where moving a
    unit from ``j`` to ``k`` re-routes part of some row already on ``j``.
    Returns ``(cost, flow)`` or ``(inf, None)`` when the supply does not fit.
    """
    cost = np.asarray(unit_cost, dtype=float).reshape(len(supply), len(capacity))
    sup = np.asarray(supply, dtype=float)
    room = np.asarray(capacity, dtype=float)
    nr, nq = cost.shape
    if nr == 0:
        return 0.0, np.zeros((0, nq))
    eps = 1e-9
    first = cost.argmin(axis=1)
    if not np.isfinite(cost[np.arange(nr), first]).all():
        return math.inf, None
    flow = np.zeros((nr, nq))
    flow[np.arange(nr), first] = sup
    load = flow.sum(axis=0)
    with np.errstate(invalid="ignore"):
        step = cost[:, None, :] - cost[:, :, None]  # step[r, j, k]: move r from j to k
    step[np.isnan(step)] = np.inf
    idx = np.arange(nq)
    while True:
        excess = load - room
        sources = np.nonzero(excess > eps)[0]
        if sources.size == 0:
            break
        masked = np.where((flow > eps)[:, :, None], step, np.inf)
        via = masked.argmin(axis=0)
        w = np.take_along_axis(masked, via[None], axis=0)[0]
        w[idx, idx] = np.inf
        dist = np.full(nq, np.inf)
        dist[sources] = 0.0
        pred = np.full(nq, -1)
        for _ in range(nq):
            cand = dist[:, None] + w
            best_from = cand.argmin(axis=0)
            best = cand[best_from, idx]
            better = best < dist - eps
            if not better.any():
                break
            dist[better] = best[better]
            pred[better] = best_from[better]
        open_room = (room - load > eps) & np.isfinite(dist)
        if not open_room.any():
            return math.inf, None
        target = int(np.argmin(np.where(open_room, dist, np.inf)))
        path = []
        k = target
        while pred[k] >= 0 and excess[k] <= eps:
            j = int(pred[k])
            path.append((int(via[j, k]), j, k))
            k = j
        source = k
        amount = min(excess[source], room[target] - load[target])
        for r, j, k in path:
            amount = min(amount, flow[r, j])
        for r, j, k in path:
            flow[r, j] -= amount
            flow[r, k] += amount
        load[source] -= amount
        load[target] += amount
    used = flow > eps
    total = float(np.sum(flow[used] * cost[used]))
    return total, flow


def _row_prices(unit_cost, flow, capacity) -> np.ndarray:
    """Dual price per row of an optimal transportation flow.

    A full queue is priced at the cheapest way of pushing one unit out of it
    into a queue with room; each row then pays its cheapest priced option.
    Any prices give a valid Lagrangian bound; these are the LP-optimal ones.
    """
    cost = np.asarray(unit_cost, dtype=float)
    nr, nq = cost.shape
    eps = 1e-9
    load = flow.sum(axis=0)
    with np.errstate(invalid="ignore"):
        step = cost[:, None, :] - cost[:, :, None]
    step[np.isnan(step)] = np.inf
    w = np.where((flow > eps)[:, :, None], step, np.inf).min(axis=0)
    np.fill_diagonal(w, np.inf)
    price = np.where(np.asarray(capacity, dtype=float) - load > eps, 0.0, np.inf)
    for _ in range(nq):
        nxt = np.minimum(price, (w + price[None, :]).min(axis=1))
        if np.array_equal(nxt, price):
            break
        price = nxt
    finite = cost[np.isfinite(cost)]
    cap_price = float(finite.max() - finite.min()) if finite.size else 0.0
    price[~np.isfinite(price)] = cap_price
    return (cost + price[None, :]).min(axis=1)


class _Search:
    def __init__(self, run, catalog, topology, q, cfg, hops):
        self.catalog = catalog
        self.topology = topology
        self.q = q
        self.cfg = cfg
        self.hops = hops
        self.run = list(run)
        # Tightest deadlines branch first.
        self.order = sorted(self.run, key=lambda k: (k.deadline_s, k.task_id))
        n, nd = len(self.order), len(catalog)
        self.n, self.nd = n, nd
        self.cost = [[network_cost(k, d, hops) for d in catalog] for k in self.order]
        self.rate = [k.arrival_rate for k in self.order]
        self.deadline = [k.deadline_s for k in self.order]
        self.mu = [service_rate(d, topology, q) for d in catalog]
        share = _queue_structure(catalog)
        # affects[i]: queues whose load grows when a task picks decision i
        self.affects = [[j for j in range(nd) if share[j, i]] for i in range(nd)]
        self.child_order = [
            sorted(range(nd), key=lambda j, row=row: (row[j], j)) for row in self.cost
        ]
        suffix = [0.0] * (n + 1)
        for i in range(n - 1, -1, -1):
            suffix[i] = suffix[i + 1] + min(self.cost[i])
        self.suffix_min = suffix
        self.max_deadline_from = [0.0] * (n + 1)
        for i in range(n - 1, -1, -1):
            self.max_deadline_from[i] = max(self.deadline[i], self.max_deadline_from[i + 1])
        self.uniform_rate_from = [None] * (n + 1)
        for i in range(n - 1, -1, -1):
            nxt = self.uniform_rate_from[i + 1]
            r = self.rate[i]
            self.uniform_rate_from[i] = r if (i == n - 1 or nxt == r) else math.nan
        # Classes of interchangeable unit costs: same AP and size.
        self.class_of = []
        keys: dict[tuple, int] = {}
        self.class_unit_cost: list[list[float]] = []
        for i, k in enumerate(self.order):
            key = (k.ap, k.size_mb)
            if key not in keys:
                keys[key] = len(keys)
                self.class_unit_cost.append([c / k.arrival_rate for c in self.cost[i]])
            self.class_of.append(keys[key])
        self.n_classes = len(keys)

        self.executor = [0.0] * nd
        self.qload = [0.0] * nd
        self.dmin = [math.inf] * nd
        self.choice: list[int] = [-1] * n
        self.best_cost = math.inf
        self.best_choice: list[int] | None = None
        self.stats = SolverStats()
        self.deadline_at = 0.0
        self.timed_out = False

    # queue bookkeeping

    def _ok_after(self, i: int, j: int) -> bool:
        """Would putting task ``i`` on decision ``j`` keep every used queue within deadline?"""
        r = self.rate[i]
        for a in self.affects[j]:
            d = self.dmin[a] if a != j else min(self.dmin[a], self.deadline[i])
            if d == math.inf:
                continue
            slack = self.mu[a] - self.qload[a] - r
            if slack <= 0 or 1.0 / slack > d * (1 + _TOL):
                return False
        return True

    def _push(self, i: int, j: int):
        r = self.rate[i]
        self.executor[j] += r
        for a in self.affects[j]:
            self.qload[a] += r
        prev = self.dmin[j]
        self.dmin[j] = min(prev, self.deadline[i])
        self.choice[i] = j
        return prev

    def _pop(self, i: int, j: int, prev: float) -> None:
        r = self.rate[i]
        self.executor[j] -= r
        for a in self.affects[j]:
            self.qload[a] -= r
        self.dmin[j] = prev
        self.choice[i] = -1

    # bounds

    def _relaxation(self, i: int):
        """Transportation relaxation of the tasks ``i..n-1``.

        Each queue keeps only its own deadline cap; cross-queue sharing is
        dropped, which can only enlarge the feasible set.
        """
        supply = [0.0] * self.n_classes
        for t in range(i, self.n):
            supply[self.class_of[t]] += self.rate[t]
        uniform = self.uniform_rate_from[i]
        optimistic = self.max_deadline_from[i]
        caps = []
        for j in range(self.nd):
            d = self.dmin[j] if self.dmin[j] != math.inf else optimistic
            room = self.mu[j] - 1.0 / d - self.qload[j]
            room = max(room, 0.0) * (1 + _TOL) + 1e-12
            if uniform == uniform:  # not NaN: all remaining rates equal
                room = math.floor(room / uniform + 1e-9) * uniform
            caps.append(room)
        return supply, caps

    def _bound(self, i: int, acc: float):
        supply, caps = self._relaxation(i)
        value, flow = _transport(supply, self.class_unit_cost, caps)
        return acc + value, flow

    def _complete_from_flow(self, i: int, flow) -> list[int] | None:
        """Turn an integral relaxation flow into a full assignment, if it is feasible."""
        uniform = self.uniform_rate_from[i]
        if uniform != uniform:
            return None
        counts = [[int(round(f / uniform)) for f in row] for row in flow]
        for row, frow in zip(counts, flow):
            for cnt, f in zip(row, frow):
                if abs(cnt * uniform - f) > 1e-6 * max(1.0, f):
                    return None
        new_exec = [sum(counts[c][j] for c in range(self.n_classes)) * uniform
                    for j in range(self.nd)]
        need = []
        for j in range(self.nd):
            final = self.qload[j] + sum(new_exec[x] for x in range(self.nd) if j in self.affects[x])
            slack = self.mu[j] - final
            used = self.dmin[j] != math.inf or new_exec[j] > 0
            if not used:
                need.append(0.0)
                continue
            if slack <= 0:
                return None
            need.append(1.0 / slack)
            if self.dmin[j] < need[j] / (1 + _TOL):
                return None
        by_class: dict[int, list[int]] = {}
        for t in range(i, self.n):
            by_class.setdefault(self.class_of[t], []).append(t)
        choice = list(self.choice)
        for c, members in by_class.items():
            members.sort(key=lambda t: -self.deadline[t])
            slots = sorted(
                (j for j in range(self.nd) if counts[c][j] > 0), key=lambda j: (-need[j], j)
            )
            pos = 0
            for j in slots:
                for _ in range(counts[c][j]):
                    t = members[pos]
                    if self.deadline[t] < need[j] / (1 + _TOL):
                        return None
                    choice[t] = j
                    pos += 1
        return choice

    def _assignment(self, choice: list[int]) -> Assignment:
        mapping = {self.order[t].task_id: self.catalog[j] for t, j in enumerate(choice)}
        return Assignment(mapping, self.run, self.topology, self.catalog)

    def _offer(self, choice: list[int]) -> bool:
        a = self._assignment(choice)
        if not feasible(a, self.q)[0]:
            return False
        c = system_cost(a, self.hops)
        if c < self.best_cost:
            self.best_cost = c
            self.best_choice = list(choice)
        return True

    # search

    def _dfs(self, i: int, acc: float) -> None:
        self.stats.nodes_explored += 1
        if time.perf_counter() > self.deadline_at:
            self.timed_out = True
            return
        if i == self.n:
            self._offer(self.choice)
            return
        limit = self.best_cost * (1 - 1e-12)
        if acc + self.suffix_min[i] >= limit:
            self.stats.pruned += 1
            return
        bound, flow = self._bound(i, acc)
        if bound >= limit:
            self.stats.pruned += 1
            return
        completion = self._complete_from_flow(i, flow)
        if completion is not None and self._offer(completion):
            if self.best_cost <= bound * (1 + 1e-12) + 1e-9:
                # The relaxation optimum is attainable: nothing below can do better.
                return
        for j in self.child_order[i]:
            if self.timed_out:
                return
            if not self._ok_after(i, j):
                self.stats.pruned += 1
                continue
            c = self.cost[i][j]
            if acc + c + self.suffix_min[i + 1] >= self.best_cost * (1 - 1e-12):
                self.stats.pruned += 1
                continue
            prev = self._push(i, j)
            self._dfs(i + 1, acc + c)
            self._pop(i, j, prev)

    def solve(self) -> tuple[list[int] | None, bool]:
        self.deadline_at = time.perf_counter() + self.cfg.time_limit_s
        self._dfs(0, 0.0)
        return self.best_choice, not self.timed_out


def branch_and_bound(
    run: Sequence[TaskRequest],
    catalog: DecisionCatalog,
    topology: Topology,
    q: QueuingParams,
    cfg: SolverConfig | None = None,
    hops: HopMatrix | None = None,
) -> Solution:
    """Depth-first branch-and-bound over tasks in ascending-deadline order.

    A node is pruned when its cost plus a lower bound on the remaining tasks
    reaches the incumbent, or when a queue already misses a deadline. The
    bound is a min-cost transportation relaxation with per-queue capacities
    derived from the deadlines already committed; whenever its optimum can be
    realised as a feasible placement the subtree is closed immediately.

    When every task has the same arrival rate and no two catalog entries
    share a queue, an equivalent and much faster search over per-queue
    admission thresholds is used instead (see ``_ThresholdSearch``); it hands
    over to the per-task search if the coupling rule ever binds.
    """
    cfg = cfg or SolverConfig()
    start = time.perf_counter()
    hops = hops or hop_matrix(topology)
    if not run:
        return _finish(run, catalog, topology, {}, hops, SolverStats(), start, True, "optimal")
    search = _Search(run, catalog, topology, q, cfg, hops)
    done = False
    if _thresholds_apply(search):
        fast = _ThresholdSearch(search)
        best, complete = fast.solve()
        done = not fast.coupling_conflict
        if not done:
            # Threshold routing ignores the coupling rule; spend what is left on the general search.
            left = cfg.time_limit_s - (time.perf_counter() - start)
            rest = SolverConfig(max(left, 1e-3), cfg.brute_force_max_tasks)
            search = _Search(run, catalog, topology, q, rest, hops)
    if not done:
        best, complete = search.solve()
    stats = search.stats
    if best is None:
        status = "infeasible" if complete else "timeout"
        return _finish(run, catalog, topology, {}, hops, stats, start, False, status)
    choice = {search.order[t].task_id: catalog[j] for t, j in enumerate(best)}
    status = "optimal" if complete else "timeout"
    return _finish(run, catalog, topology, choice, hops, stats, start, complete, status)


def solve(run, catalog, topology, q, cfg: SolverConfig | None = None, hops=None) -> Solution:
    """Brute force for tiny runs, branch-and-bound otherwise."""
    cfg = cfg or SolverConfig()
    if len(run) <= min(cfg.brute_force_max_tasks, 4):
        return brute_force(run, catalog, topology, q, cfg, hops)
    return branch_and_bound(run, catalog, topology, q, cfg, hops)


def label_run(solution: Solution, catalog: DecisionCatalog) -> list[tuple[int, int]]:
    """``(task_id, catalog index)`` per task, in task-id order."""
    if not solution.optimal:
        raise NotOptimal(f"solution status is {solution.status}; labels need a proven optimum")
    return sorted(solution.labels(catalog).items())


class _ThresholdSearch:
    """Exact search for runs with one arrival rate over queues that never share load.

    A queue's capacity is set by the tightest deadline it admits. Choosing a
    threshold per queue (admit only tasks whose deadline is at least the
    threshold) turns the rest into a transportation problem, and only the
    thresholds at which a queue's capacity steps up need to be tried. The
    search branches over queues, one threshold each; undecided queues accept
    every task up to their largest capacity, which keeps the bound admissible.
    """

    def __init__(self, base: _Search):
        self.b = base
        n = base.n
        r = base.rate[0]
        # Loads accumulate by repeated addition, exactly as the constraint check does.
        acc = [0.0]
        for _ in range(n):
            acc.append(acc[-1] + r)
        self.load = acc
        self.unit = [[u * r for u in row] for row in base.class_unit_cost]
        counts = [[0] * base.n_classes]
        for i in range(n):
            row = list(counts[-1])
            row[base.class_of[i]] += 1
            counts.append(row)
        self.prefix = counts  # prefix[i][c]: class-c tasks among the first i
        self.candidates = []  # per queue: [(position, capacity)], last entry means unused
        self.cap_max = []
        for j in range(base.nd):
            cands, last = [], 0
            for pos in range(n):
                u = self._capacity(j, base.deadline[pos], last)
                if u > last:
                    cands.append((pos, u))
                    last = u
            cands.append((n, 0))
            self.candidates.append(cands)
            self.cap_max.append(last)
        self.order = sorted(range(base.nd), key=lambda j: (-self.cap_max[j], j))
        self.task_cost = np.array([self.unit[base.class_of[t]] for t in range(n)])
        self.lag_value: list[list[float]] = []
        self.lag_best = [0.0] * base.nd
        self.lag_const = -math.inf
        self.quantum = _cost_quantum(self.task_cost)
        self.decided: list[tuple[int, int] | None] = [None] * base.nd
        self.best_cost = math.inf
        self.best_choice: list[int] | None = None
        self.coupling_conflict = False

    def _dual_step(self, lam: np.ndarray):
        """Lagrangian value with every queue free, a subgradient, and each queue's pick."""
        hits = np.zeros(self.b.n)
        total = float(lam.sum())
        picks = []
        for j, cands in enumerate(self.candidates):
            rc = self.task_cost[:, j] - lam
            best, pick, chosen = 0.0, None, cands[-1]
            for pos, u in cands:
                if u == 0:
                    continue
                tail = np.nonzero(rc[pos:] < 0)[0] + pos
                if tail.size > u:
                    tail = tail[np.argpartition(rc[tail], u - 1)[:u]]
                v = float(rc[tail].sum())
                if v < best:
                    best, pick, chosen = v, tail, (pos, u)
            total += best
            picks.append(chosen)
            if pick is not None:
                hits[pick] += 1
        return total, 1.0 - hits, picks

    def _try_thresholds(self, picks) -> None:
        """Lagrangian heuristic: pin the subproblem thresholds and realise the transport."""
        saved = self.decided
        self.decided = list(picks)
        value, flow, rows = self._evaluate()
        if flow is not None and value < self.best_cost:
            self._offer(self._realise(flow, rows))
        self.decided = saved

    def _tighten_prices(self, iters: int = 300, heuristic_tries: int = 20) -> None:
        """Subgradient ascent on the Lagrangian dual, aimed at the incumbent cost."""
        if not math.isfinite(self.best_cost):
            return
        lam = self.lam.copy()
        best_val, best_lam = -math.inf, lam
        scale, stall = 1.0, 0
        for _ in range(iters):
            val, g, picks = self._dual_step(lam)
            if val > best_val + 1e-9:
                best_val, best_lam, stall = val, lam.copy(), 0
                if heuristic_tries > 0:
                    heuristic_tries -= 1
                    self._try_thresholds(picks)
            else:
                stall += 1
                if stall >= 10:
                    scale, stall = scale / 2, 0
            gap = self.best_cost - val
            norm = float(g @ g)
            if norm == 0 or val >= self._limit() or scale < 1e-4:
                break
            lam = lam + scale * gap / norm * g
        self._set_prices(best_lam)

    def _set_prices(self, lam: np.ndarray) -> None:
        self.lam = lam
        """Per queue and threshold, the best reduced-cost subset the queue could take."""
        self.lag_const = float(lam.sum())
        self.lag_value = []
        for j, cands in enumerate(self.candidates):
            rc = self.task_cost[:, j] - lam
            vals = []
            for pos, u in cands:
                tail = rc[pos:]
                neg = tail[tail < 0]
                if neg.size > u:
                    neg = np.partition(neg, u - 1)[:u] if u else neg[:0]
                vals.append(float(neg.sum()))
            self.lag_value.append(vals)
            self.lag_best[j] = min(vals)

    def _lagrangian(self) -> float:
        total = self.lag_const
        for j, d in enumerate(self.decided):
            if d is None:
                total += self.lag_best[j]
            else:
                total += self.lag_value[j][self.candidates[j].index(d)]
        return total

    def _prices_from(self, flow, rows) -> None:
        caps = [self.cap_max[j] if d is None else d[1] for j, d in enumerate(self.decided)]
        cost = [[self.unit[c][j] if ok else math.inf for j, ok in enumerate(allowed)]
                for c, _, _, _, allowed in rows]
        row_price = _row_prices(cost, np.asarray(flow), caps)
        lam = np.zeros(self.b.n)
        for (c, s, e, _, _), price in zip(rows, row_price):
            for t in range(s, e):
                if self.b.class_of[t] == c:
                    lam[t] = price
        self._set_prices(lam)

    def _prices_for(self, choice: list[int]) -> None:
        """Re-price from the transportation problem pinned at a placement's thresholds."""
        saved = list(self.decided)
        self.decided = self._pinned(choice)
        _, flow, rows = self._evaluate()
        if flow is not None:
            self._prices_from(flow, rows)
        self.decided = saved

    def _pinned(self, choice: list[int]) -> list[tuple[int, int]]:
        """Per queue, the largest-capacity threshold admitting all its tasks in ``choice``."""
        out = []
        for j, cands in enumerate(self.candidates):
            first = min((t for t, x in enumerate(choice) if x == j), default=self.b.n)
            fits = [c for c in cands if c[0] <= first]
            # A relaxed placement may use a queue below its first threshold.
            out.append(max(fits, key=lambda c: c[1]) if fits else cands[0])
        return out

    def _capacity(self, j: int, d: float, start: int) -> int:
        """Most tasks queue ``j`` holds while meeting deadline ``d``."""
        mu, load, n = self.b.mu[j], self.load, self.b.n
        k = start
        while k < n:
            slack = mu - load[k + 1]
            if slack <= 0 or 1.0 / slack > d:
                break
            k += 1
        return k

    def _rows(self):
        b = self.b
        cuts = sorted({0} | {d[0] for d in self.decided if d is not None and d[0] < b.n})
        bounds = cuts + [b.n]
        rows = []
        for s, e in zip(bounds, bounds[1:]):
            lo, hi = self.prefix[s], self.prefix[e]
            allowed = []
            for j, d in enumerate(self.decided):
                allowed.append(d is None or (d[1] > 0 and d[0] <= s))
            for c in range(b.n_classes):
                cnt = hi[c] - lo[c]
                if cnt:
                    rows.append((c, s, e, cnt, allowed))
        return rows

    def _evaluate(self):
        rows = self._rows()
        caps = [self.cap_max[j] if d is None else d[1] for j, d in enumerate(self.decided)]
        cost = [[self.unit[c][j] if ok else math.inf for j, ok in enumerate(allowed)]
                for c, _, _, _, allowed in rows]
        value, flow = _transport([r[3] for r in rows], cost, caps)
        return value, flow, rows

    def _realise(self, flow, rows) -> list[int]:
        b = self.b
        choice = [-1] * b.n
        for (c, s, e, _, _), frow in zip(rows, flow):
            members = [t for t in range(e - 1, s - 1, -1) if b.class_of[t] == c]
            # Laxest tasks go to undecided queues, whose capacity is not yet pinned.
            targets = sorted((j for j in range(b.nd) if frow[j] > 0.5),
                             key=lambda j: (self.decided[j] is not None, j))
            pos = 0
            for j in targets:
                for _ in range(int(round(frow[j]))):
                    choice[members[pos]] = j
                    pos += 1
        return choice

    def _offer(self, choice: list[int]) -> bool:
        a = self.b._assignment(choice)
        ok, violations = feasible(a, self.b.q)
        if not ok:
            if any(v.startswith("Coupling") for v in violations):
                self.coupling_conflict = True
            return False
        c = system_cost(a, self.b.hops)
        if c < self.best_cost:
            self.best_cost = c
            self.best_choice = list(choice)
        return True

    def _limit(self) -> float:
        limit = self.best_cost * (1 - 1e-12)
        if self.quantum and math.isfinite(limit):
            # Costs move in whole quanta: anything above the next quantum down cannot win.
            limit = (math.ceil(self.best_cost / self.quantum - 1e-6) - 1) * self.quantum
            limit += self.quantum * 1e-6
        return limit

    def _dfs(self, depth: int, value: float, flow, rows) -> None:
        b = self.b
        b.stats.nodes_explored += 1
        if time.perf_counter() > b.deadline_at:
            b.timed_out = True
            return
        if flow is None:
            return
        before = self.best_cost
        if self._offer(self._realise(flow, rows)):
            if self.best_cost < before:
                self._prices_for(self.best_choice)
                self._tighten_prices()
            if self.best_cost <= value + 1e-9 * max(1.0, value):
                return  # the relaxation optimum is attainable
        if depth == len(self.order):
            return
        j = self.order[depth]
        children = []
        for cand in self.candidates[j]:
            self.decided[j] = cand
            if self._lagrangian() >= self._limit():
                b.stats.pruned += 1
                continue
            v, f, rw = self._evaluate()
            children.append((v, cand, f, rw))
        self.decided[j] = None
        children.sort(key=lambda x: (x[0], -x[1][1]))
        for v, cand, f, rw in children:
            if b.timed_out:
                return
            self.decided[j] = cand
            if v >= self._limit() or self._lagrangian() >= self._limit():
                self.decided[j] = None
                b.stats.pruned += 1
                continue
            self._dfs(depth + 1, v, f, rw)
            self.decided[j] = None

    def _descend(self, passes: int = 3) -> None:
        """Coordinate descent over thresholds for a strong first incumbent.

        Starts from the best finite of three threshold vectors: largest
        capacities, the thresholds of the root placement, and admit-all.
        """
        starts = [[c[-2] if len(c) > 1 else c[-1] for c in self.candidates],
                  [c[0] for c in self.candidates]]
        self.decided = [None] * self.b.nd
        _, flow, rows = self._evaluate()
        if flow is not None:
            starts.insert(1, self._pinned(self._realise(flow, rows)))
        value, flow, rows, start = math.inf, None, None, starts[0]
        for s in starts:
            self.decided = list(s)
            v, f, rw = self._evaluate()
            if v < value:
                value, flow, rows, start = v, f, rw, s
        self.decided = list(start)
        for _ in range(passes):
            moved = False
            for j in self.order:
                keep = self.decided[j]
                for cand in self.candidates[j]:
                    if cand == keep:
                        continue
                    self.decided[j] = cand
                    v, f, rw = self._evaluate()
                    if v < value - 1e-9 * max(1.0, abs(v)):
                        value, flow, rows, keep, moved = v, f, rw, cand, True
                self.decided[j] = keep
            if not moved:
                break
        if flow is not None:
            self._offer(self._realise(flow, rows))
        self.decided = [None] * self.b.nd

    def solve(self):
        b = self.b
        b.deadline_at = time.perf_counter() + b.cfg.time_limit_s
        value, flow, rows = self._evaluate()
        if flow is not None:
            self._prices_from(flow, rows)
        self._descend()
        if self.best_choice is not None:
            self._prices_for(self.best_choice)
            self._tighten_prices()
        self._dfs(0, value, flow, rows)
        return self.best_choice, not b.timed_out


def _cost_quantum(task_cost: np.ndarray) -> float:
    """Largest q with every finite per-task cost an integer multiple of q, else 0."""
    vals = np.unique(task_cost[np.isfinite(task_cost) & (task_cost > 0)])
    if vals.size == 0:
        return 0.0
    q = float(vals.min())
    for _ in range(8):
        ratio = vals / q
        if np.all(np.abs(ratio - np.round(ratio)) <= 1e-9 * ratio):
            return q
        q /= 2
    return 0.0


def _thresholds_apply(s: _Search) -> bool:
    if len(set(s.rate)) != 1:
        return False
    return all(s.affects[i] == [i] for i in range(s.nd))
