import itertools
import math

import numpy as np
import pytest

from coin_placer.cost_model import QueuingParams, feasible, network_cost, system_cost
from coin_placer.solver import (
    NotOptimal,
    SolverConfig,
    TooLarge,
    _Search,
    brute_force,
    branch_and_bound,
    label_run,
    solve,
)
from coin_placer.topology import FO, PO, CatalogMode, DecisionCatalog, decision_catalog, hop_matrix
from coin_placer.workload import RunSpec, TaskRequest, generate_run

from conftest import oracle_instance, small_topology


def task(tid=0, ap=13, deadline=0.15, rate=10.0):
    return TaskRequest(tid, ap, 10.0, 1e7, deadline, rate)


def test_brute_force_picks_cheap_po(default_topology, default_hops):
    cat = decision_catalog(default_topology, "split")
    sol = brute_force([task()], cat, default_topology, QueuingParams(), hops=default_hops)
    assert sol.optimal and sol.cost == 200
    assert sol.assignment.choice == {0: PO(0, 8)}


def test_brute_force_infeasible_deadline(default_topology):
    cat = decision_catalog(default_topology, "split")
    sol = brute_force([task(deadline=0.0005)], cat, default_topology, QueuingParams(f_bar=1e7))
    assert not sol.optimal and sol.status == "infeasible" and sol.assignment.choice == {}


def test_empty_run(default_topology):
    cat = decision_catalog(default_topology, "split")
    for fn in (brute_force, branch_and_bound):
        sol = fn([], cat, default_topology, QueuingParams())
        assert sol.optimal and sol.cost == 0 and sol.assignment.choice == {}
    assert branch_and_bound([], cat, default_topology, QueuingParams()).stats.nodes_explored == 0


def test_brute_force_too_large(default_topology):
    run = generate_run(RunSpec(n_tasks=9), default_topology)
    with pytest.raises(TooLarge):
        brute_force(run, decision_catalog(default_topology), default_topology, QueuingParams())


def test_brute_force_tie_break_lexicographic(default_topology, default_hops):
    # from AP 13 both PO(1,8) and PO(9,10) cost 400: the lower catalog index wins
    assert network_cost(task(), PO(1, 8), default_hops) == 400
    assert network_cost(task(), PO(9, 10), default_hops) == 400
    q = QueuingParams(coupling="off")
    for order in ((PO(9, 10), PO(1, 8)), (PO(1, 8), PO(9, 10))):
        cat = DecisionCatalog(order, CatalogMode.SPLIT)
        sol = brute_force([task()], cat, default_topology, q, hops=default_hops)
        assert sol.cost == 400 and sol.assignment.choice == {0: order[0]}


def test_oracle_equivalence_sample():
    rng = np.random.default_rng(123)
    for it in range(150):
        run, cat, t, q = oracle_instance(rng, it)
        h = hop_matrix(t)
        bf = brute_force(run, cat, t, q, hops=h)
        bb = branch_and_bound(run, cat, t, q, hops=h)
        assert bf.status == bb.status, it
        if bf.optimal:
            assert abs(bf.cost - bb.cost) <= 1e-12 * max(1.0, bf.cost), it


def test_solution_invariants():
    rng = np.random.default_rng(5)
    for it in range(40):
        run, cat, t, q = oracle_instance(rng, it)
        h = hop_matrix(t)
        sol = branch_and_bound(run, cat, t, q, hops=h)
        if sol.optimal:
            assert feasible(sol.assignment, q)[0]
            assert sol.cost == system_cost(sol.assignment, h)
        assert sol.stats.nodes_explored >= 0 and sol.stats.pruned >= 0
        assert sol.stats.wall_time_s >= 0


class _Recorder(_Search):
    """Records (depth, prefix, bound) at every relaxation the search evaluates."""

    def __init__(self, *args):
        super().__init__(*args)
        self.records = []

    def _bound(self, i, acc):
        value, flow = super()._bound(i, acc)
        self.records.append((i, tuple(self.choice[:i]), value))
        return value, flow


def _best_completion(s: _Search, prefix):
    """Cheapest feasible full assignment extending ``prefix`` (search order), by enumeration."""
    best = math.inf
    rest = s.n - len(prefix)
    for tail in itertools.product(range(s.nd), repeat=rest):
        choice = list(prefix) + list(tail)
        a = s._assignment(choice)
        if feasible(a, s.q)[0]:
            best = min(best, system_cost(a, s.hops))
    return best


def test_admissible_bound_replay():
    rng = np.random.default_rng(77)
    checked = 0
    for it in range(60):
        t = small_topology(rng)
        cat = decision_catalog(t, ("split", "nosplit")[it % 2])
        n = int(rng.integers(2, 6))
        rate = float(rng.choice([20.0, 40.0])) if it % 2 else (10.0, 60.0)
        run = generate_run(RunSpec(n_tasks=n, deadline_range_s=(0.005, 0.1), arrival_rate=rate,
                                   seed=int(rng.integers(2**31))), t)
        q = QueuingParams(f_bar=1e7, coupling=("fo_not_slower", "off")[it % 2])
        s = _Recorder(run, cat, t, q, SolverConfig(), hop_matrix(t))
        s.solve()
        for _, prefix, bound in s.records:
            true = _best_completion(s, prefix)
            assert bound <= true * (1 + 1e-9) + 1e-9
            checked += 1
    assert checked > 50


def test_adding_task_never_lowers_cost():
    rng = np.random.default_rng(9)
    for it in range(60):
        run, cat, t, q = oracle_instance(rng, it)
        if len(run) < 2:
            continue
        h = hop_matrix(t)
        full = branch_and_bound(run, cat, t, q, hops=h)
        part = branch_and_bound(run[:-1], cat, t, q, hops=h)
        full_cost = full.cost if full.optimal else math.inf
        part_cost = part.cost if part.optimal else math.inf
        if math.isfinite(part_cost) or not math.isfinite(full_cost):
            assert full_cost >= part_cost - 1e-9


def test_deterministic(default_topology, default_hops):
    cat = decision_catalog(default_topology, "split")
    run = generate_run(RunSpec(n_tasks=60, seed=4), default_topology)
    a = branch_and_bound(run, cat, default_topology, QueuingParams(), hops=default_hops)
    b = branch_and_bound(run, cat, default_topology, QueuingParams(), hops=default_hops)
    assert a.optimal and a.cost == b.cost and a.assignment.choice == b.assignment.choice


def test_default_run_solves(default_topology, default_hops):
    cat = decision_catalog(default_topology, "split")
    run = generate_run(RunSpec(seed=1000), default_topology)
    sol = branch_and_bound(run, cat, default_topology, QueuingParams(), hops=default_hops)
    assert sol.optimal and feasible(sol.assignment, QueuingParams())[0]
    labels = label_run(sol, cat)
    assert [tid for tid, _ in labels] == list(range(275))
    assert sol.stats.wall_time_s > 0


def test_timeout_reports_not_optimal(default_topology):
    cat = decision_catalog(default_topology, "nosplit")
    run = generate_run(RunSpec(n_tasks=120, arrival_rate=(5.0, 15.0), seed=2), default_topology)
    sol = branch_and_bound(run, cat, default_topology, QueuingParams(), SolverConfig(1e-3))
    assert sol.status == "timeout" and not sol.optimal
    with pytest.raises(NotOptimal):
        label_run(sol, cat)


def test_label_run(default_topology, default_hops):
    cat = decision_catalog(default_topology, "split")
    run = [task(0, ap=16), task(1, ap=13)]
    sol = solve(run, cat, default_topology, QueuingParams(), hops=default_hops)
    assert label_run(sol, cat) == [(0, 3), (1, 0)]
    bad = brute_force([task(deadline=1e-4)], cat, default_topology, QueuingParams())
    with pytest.raises(NotOptimal):
        label_run(bad, cat)


def test_solve_dispatch_matches(default_topology, default_hops):
    cat = decision_catalog(default_topology, "split")
    run = generate_run(RunSpec(n_tasks=4, seed=3), default_topology)
    a = solve(run, cat, default_topology, QueuingParams(), hops=default_hops)
    b = branch_and_bound(run, cat, default_topology, QueuingParams(), hops=default_hops)
    assert a.cost == b.cost


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(time_limit_s=0)
    with pytest.raises(ValueError):
        SolverConfig(brute_force_max_tasks=0)


def test_fo_when_pairs_overloaded(default_topology, default_hops):
    # 40 tasks at one AP overload its pair; the overflow must go to the MEC
    cat = decision_catalog(default_topology, "split")
    run = [task(i, ap=13, rate=10.0, deadline=0.15) for i in range(40)]
    sol = branch_and_bound(run, cat, default_topology, QueuingParams(), hops=default_hops)
    assert sol.optimal
    assert any(isinstance(d, FO) for d in sol.assignment.choice.values())
    assert feasible(sol.assignment, QueuingParams())[0]
