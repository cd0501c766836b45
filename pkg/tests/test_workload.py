import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from coin_placer.workload import (
    DEFAULT_TASKS_PER_RUN,
    InvalidSpec,
    RunSpec,
    UnknownScenario,
    generate_run,
    rate_sweep,
    read_run_csv,
    scenario_params,
    write_run_csv,
)


def test_default_tasks_per_run():
    assert DEFAULT_TASKS_PER_RUN * 5000 == 1_375_000


def test_table_defaults(default_topology):
    run = generate_run(RunSpec(n_tasks=275, deadline_range_s=(0.010, 0.150), seed=1),
                       default_topology)
    assert len(run) == 275
    assert all(0.010 <= k.deadline_s <= 0.150 for k in run)
    assert {(k.size_mb, k.workload_cycles, k.arrival_rate) for k in run} == {(10.0, 1e7, 10.0)}
    assert [k.task_id for k in run] == list(range(275))
    assert {k.ap for k in run} <= set(default_topology.ap_ids)


def test_single_task_run(default_topology):
    assert len(generate_run(RunSpec(n_tasks=1), default_topology)) == 1


def test_same_seed_same_run(default_topology):
    spec = RunSpec(n_tasks=50, seed=7, arrival_rate=(5.0, 15.0))
    assert generate_run(spec, default_topology) == generate_run(spec, default_topology)
    other = generate_run(RunSpec(n_tasks=50, seed=8, arrival_rate=(5.0, 15.0)), default_topology)
    assert other != generate_run(spec, default_topology)


@pytest.mark.parametrize("bad", [
    RunSpec(n_tasks=0),
    RunSpec(deadline_range_s=(0.2, 0.1)),
    RunSpec(deadline_range_s=(0.0, 0.1)),
    RunSpec(size_mb=-1.0),
    RunSpec(arrival_rate=(0.0, 5.0)),
])
def test_invalid_spec(default_topology, bad):
    with pytest.raises(InvalidSpec):
        generate_run(bad, default_topology)


def test_rate_sweep_paired(default_topology):
    runs = rate_sweep(RunSpec(n_tasks=30, seed=3), default_topology, [5.0, 10.0, 15.0])
    assert [r[0].arrival_rate for r in runs] == [5.0, 10.0, 15.0]
    strip = lambda run: [(k.task_id, k.ap, k.size_mb, k.workload_cycles, k.deadline_s)  # noqa: E731
                         for k in run]
    assert strip(runs[0]) == strip(runs[1]) == strip(runs[2])
    assert len(rate_sweep(RunSpec(n_tasks=5), default_topology, [10.0])) == 1


def test_rate_sweep_rejects_empty(default_topology):
    with pytest.raises(InvalidSpec):
        rate_sweep(RunSpec(), default_topology, [])


def test_scenarios():
    assert scenario_params("strict") == (0.010, 0.150)
    assert scenario_params("relaxed") == (0.050, 0.150)
    with pytest.raises(UnknownScenario):
        scenario_params("foo")


def test_deadlines_uniform_ks(default_topology):
    lo, hi = 0.010, 0.150
    run = generate_run(RunSpec(n_tasks=100_000, deadline_range_s=(lo, hi), seed=11),
                       default_topology)
    d = np.array([k.deadline_s for k in run])
    stat = stats.kstest(d, stats.uniform(loc=lo, scale=hi - lo).cdf).statistic
    # asymptotic 1% critical value 1.628 / sqrt(n)
    assert stat < 1.628 / np.sqrt(len(d))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 60), seed=st.integers(0, 2**31), lo=st.floats(0.001, 0.1),
       width=st.floats(0.001, 0.2), rate=st.floats(0.5, 50))
def test_generated_tasks_valid(default_topology, n, seed, lo, width, rate):
    run = generate_run(RunSpec(n_tasks=n, deadline_range_s=(lo, lo + width),
                               arrival_rate=(rate, rate * 2), seed=seed), default_topology)
    assert len(run) == n
    for k in run:
        assert k.size_mb > 0 and k.workload_cycles > 0 and k.arrival_rate > 0
        assert lo <= k.deadline_s <= lo + width


def test_csv_round_trip(tmp_path, default_topology):
    run = generate_run(RunSpec(n_tasks=40, seed=5, size_mb=(1.0, 20.0)), default_topology)
    path = tmp_path / "run.csv"
    write_run_csv(run, path)
    assert read_run_csv(path) == run
    assert path.read_text().splitlines()[0] == \
        "task_id,ap,size_mb,workload_cycles,deadline_s,arrival_rate"
