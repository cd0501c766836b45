"""Classification metrics, performance gain, MEC share, timing and the experiment suite."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .cost_model import (
    Assignment,
    CouplingRule,
    DEFAULT_F_BAR,
    LoadTable,
    QueuingParams,
    feasible,
    network_cost,
    queue_delay,
    system_cost,
)
from .dataset import EdgeRule, Standardizer, build_graph, run_features
from .models.gcn import GcnParams, gcn_predict
from .models.mlp import MlpParams, mlp_predict
from .models.tree import TreeModel, dt_predict
from .solver import Solution, SolverConfig, solve
from .topology import FO, DecisionCatalog, HopMatrix, Topology, decision_catalog, hop_matrix
from .workload import RunSpec, TaskRequest, generate_run, scenario_params

__all__ = [
    "LengthMismatch",
    "InfeasibleModelAssignment",
    "MissingArtifact",
    "MetricsReport",
    "RepairResult",
    "TimingReport",
    "ExperimentConfig",
    "ExperimentResult",
    "TrainedModels",
    "confusion_matrix",
    "metrics",
    "repair",
    "mec_only_choice",
    "performance_gain",
    "mec_offload_pct",
    "predict_run",
    "timing_bench",
    "run_seed",
    "experiment_suite",
    "write_csv",
]

POLICIES = ("gnn", "mlp", "dt", "meconly")
# Seed-path prefixes that keep sweep and timing runs apart from dataset runs,
# which use run_seed(seed, r).
SWEEP_STREAM = 1
TIMING_STREAM = 99


class LengthMismatch(ValueError):
    pass


class InfeasibleModelAssignment(RuntimeError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


# --- classification metrics -------------------------------------------------


def confusion_matrix(preds: Sequence[int], labels: Sequence[int], n_classes: int | None = None):
    """Counts with rows = true label and columns = prediction."""
    p = np.asarray(preds, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise LengthMismatch(f"{p.size} predictions vs {y.size} labels")
    if n_classes is None:
        n_classes = int(max(p.max(initial=-1), y.max(initial=-1))) + 1
    if p.size and (min(p.min(), y.min()) < 0 or max(p.max(), y.max()) >= n_classes):
        raise ValueError("label index outside the catalog")
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (y, p), 1)
    return out


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        out = {k: float(getattr(self, k)) for k in
               ("accuracy", "macro_precision", "macro_recall", "macro_f1")}
        if self.confusion is not None:
            out["confusion"] = self.confusion.tolist()
        return out


def metrics(preds: Sequence[int], labels: Sequence[int], n_classes: int | None = None) -> MetricsReport:
    """Accuracy and macro P/R/F1 over the classes that occur in ``labels``."""
    cm = confusion_matrix(preds, labels, n_classes)
    total = cm.sum()
    if total == 0:
        return MetricsReport(0.0, 0.0, 0.0, 0.0, cm)
    tp = np.diag(cm).astype(float)
    true = cm.sum(axis=1).astype(float)
    pred = cm.sum(axis=0).astype(float)
    present = true > 0
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return MetricsReport(
        accuracy=float(tp.sum() / total),
        macro_precision=float(precision[present].mean()),
        macro_recall=float(recall[present].mean()),
        macro_f1=float(f1[present].mean()),
        confusion=cm,
    )


# --- repair, PG and MEC share -----------------------------------------------


@dataclass
class RepairResult:
    assignment: Assignment
    repaired: np.ndarray  # per task, in run order
    cost: float


class _State:
    """Per-decision loads and members for one run."""

    def __init__(self, run, catalog, topology, q, choice):
        self.run, self.catalog, self.topology, self.q = run, catalog, topology, q
        self.choice = list(choice)
        self.members: list[set[int]] = [set() for _ in catalog]
        self.node: dict[int, float] = {}
        self.executor: dict = {}
        for i, j in enumerate(self.choice):
            self.add(i, j)
        self.is_fo = [isinstance(d, FO) for d in catalog]

    def add(self, i: int, j: int) -> None:
        d, r = self.catalog[j], self.run[i].arrival_rate
        self.choice[i] = j
        self.members[j].add(i)
        self.executor[d] = self.executor.get(d, 0.0) + r
        for n in d.nodes:
            self.node[n] = self.node.get(n, 0.0) + r

    def remove(self, i: int) -> None:
        j = self.choice[i]
        d, r = self.catalog[j], self.run[i].arrival_rate
        self.members[j].discard(i)
        self.executor[d] -= r
        for n in d.nodes:
            self.node[n] -= r
        self.choice[i] = -1

    def violated(self) -> list[int]:
        """Decisions whose members break stability, a deadline or the coupling rule."""
        table = LoadTable(self.node, self.executor)
        delay = [queue_delay(d, None, table, self.q, self.topology) for d in self.catalog]
        coupling = self.q.coupling
        best_fo = min((x for x, f in zip(delay, self.is_fo) if f), default=math.inf)
        best_other = min((x for x, f in zip(delay, self.is_fo) if not f), default=math.inf)
        bad = []
        for j, mem in enumerate(self.members):
            if not mem:
                continue
            tight = min(self.run[i].deadline_s for i in mem)
            if not math.isfinite(delay[j]) or delay[j] > tight:
                bad.append(j)
            elif coupling is CouplingRule.FO_NOT_SLOWER and self.is_fo[j] and delay[j] > best_other:
                bad.append(j)
            elif coupling is CouplingRule.PO_NOT_SLOWER and not self.is_fo[j] and delay[j] > best_fo:
                bad.append(j)
        return bad


def repair(
    choice: Sequence[int],
    run: Sequence[TaskRequest],
    catalog: DecisionCatalog,
    topology: Topology,
    q: QueuingParams,
    hops: HopMatrix,
) -> RepairResult:
    """Make a predicted placement feasible, moving as few tasks as the greedy rule allows.

    While some decision is violated, its tightest-deadline member moves to the
    cheapest decision that creates no new violation, with FO tried last.
    """
    run = list(run)
    if len(choice) != len(run):
        raise LengthMismatch(f"{len(choice)} decisions for {len(run)} tasks")
    state = _State(run, catalog, topology, q, [int(j) for j in choice])
    repaired = np.zeros(len(run), dtype=bool)
    for _ in range(4 * len(run) + 1):
        bad = state.violated()
        if not bad:
            break
        j = bad[0]
        i = min(state.members[j], key=lambda t: (run[t].deadline_s, run[t].task_id))
        state.remove(i)
        before = set(state.violated())
        targets = sorted(
            (x for x in range(len(catalog)) if x != j),
            key=lambda x: (state.is_fo[x], network_cost(run[i], catalog[x], hops), x),
        )
        for x in targets:
            state.add(i, x)
            if set(state.violated()) <= before - {x}:
                break
            state.remove(i)
        else:
            raise InfeasibleModelAssignment(f"no feasible decision for task {run[i].task_id}")
        repaired[i] = True
    a = Assignment({k.task_id: catalog[j] for k, j in zip(run, state.choice)}, run, topology,
                   catalog)
    ok, violations = feasible(a, q)
    if not ok:
        raise InfeasibleModelAssignment("; ".join(violations[:3]))
    return RepairResult(a, repaired, system_cost(a, hops))


def mec_only_choice(run: Sequence[TaskRequest], catalog: DecisionCatalog) -> list[int]:
    fo = next(j for j, d in enumerate(catalog) if isinstance(d, FO))
    return [fo] * len(run)


def performance_gain(model: Assignment, solver: Solution, hops: HopMatrix) -> float:
    """``C_solver / C_model``: 1 for an optimal placement, lower is worse."""
    if not solver.optimal:
        raise ValueError(f"solver solution is {solver.status}, not optimal")
    c_model = system_cost(model, hops)
    if c_model == 0:
        return 1.0 if solver.cost == 0 else math.inf
    return solver.cost / c_model


def mec_offload_pct(assignment: Assignment) -> float:
    """Share of tasks fully offloaded to the MEC, in percent."""
    if not assignment.choice:
        return 0.0
    fo = sum(isinstance(d, FO) for d in assignment.choice.values())
    return 100.0 * fo / len(assignment.choice)


# --- model inference ----------------------------------------------------------


@dataclass
class TrainedModels:
    gcn: GcnParams
    gcn_scaler: Standardizer
    mlp: MlpParams
    mlp_scaler: Standardizer
    tree: TreeModel
    edge_rule: EdgeRule = EdgeRule.SAME_AP


def predict_run(
    policy: str,
    models: TrainedModels,
    run: Sequence[TaskRequest],
    topology: Topology,
    q: QueuingParams,
    catalog: DecisionCatalog,
    hops: HopMatrix,
    labels: Sequence[int] | None = None,
) -> list[int]:
    """Catalog index per task from one policy; ``labels`` feed label-derived edges only."""
    if policy == "meconly":
        return mec_only_choice(run, catalog)
    x = run_features(run, topology, q, catalog, hops)
    if policy == "gnn":
        g = build_graph(models.gcn_scaler.transform(x), models.edge_rule,
                        aps=[k.ap for k in run], labels=labels, catalog=catalog)
        return [int(v) for v in gcn_predict(models.gcn, g)]
    if policy == "mlp":
        return [int(v) for v in mlp_predict(models.mlp, models.mlp_scaler.transform(x))]
    if policy == "dt":
        return [int(v) for v in dt_predict(models.tree, x)]
    raise ValueError(f"unknown policy {policy!r}")


# --- timing -------------------------------------------------------------------


@dataclass
class TimingReport:
    n_tasks: int
    runs: int
    solver_median_s: float
    inference_median_s: float
    ratio: float | None


def timing_bench(
    runs: Sequence[Sequence[TaskRequest]],
    catalog: DecisionCatalog,
    topology: Topology,
    q: QueuingParams,
    models: TrainedModels,
    solver_cfg: SolverConfig | None = None,
    hops: HopMatrix | None = None,
    clock: Callable[[], float] = time.perf_counter,
) -> TimingReport:
    """Median wall time of an exact solve against feature building plus GCN inference."""
    hops = hops or hop_matrix(topology)
    solver_t, infer_t = [], []
    for run in runs:
        t0 = clock()
        sol = solve(run, catalog, topology, q, solver_cfg, hops)
        solver_t.append(clock() - t0)
        t0 = clock()
        predict_run("gnn", models, run, topology, q, catalog, hops,
                    labels=_labels_or_none(sol, run, catalog, models))
        infer_t.append(clock() - t0)
    n = len(runs[0]) if runs else 0
    if not runs or n == 0:
        return TimingReport(n, len(runs), 0.0, 0.0, None)
    s, i = float(np.median(solver_t)), float(np.median(infer_t))
    return TimingReport(n, len(runs), s, i, s / i if i > 0 else None)


def _labels_or_none(sol: Solution, run, catalog, models: TrainedModels):
    if models.edge_rule is not EdgeRule.SAME_LABEL_NODE or not sol.optimal:
        return None
    lab = sol.labels(catalog)
    return [lab[k.task_id] for k in run]


# --- experiment suite -----------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    rates: tuple[float, ...] = (8.0, 9.0, 10.0)
    scenarios: tuple[str, ...] = ("strict", "relaxed")
    eval_runs: int = 10
    n_tasks: int = 275
    seed: int = 0
    f_bar: float = DEFAULT_F_BAR
    time_limit_s: float = 60.0
    timing_tasks: tuple[int, ...] = (50, 150, 275)
    timing_runs: int = 5
    default_rate: float = 10.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentResult:
    scenario: str
    rate: float
    runs: int
    excluded_runs: int
    cost: dict[str, float]
    pg: dict[str, float]
    mec_pct: dict[str, float]
    repaired_pct: dict[str, float]
    solver_wall_s: float


def run_seed(root: int, *path: int) -> int:
    """Deterministic child seed for one run or fold under a root seed."""
    return int(np.random.SeedSequence([root, *path]).generate_state(1)[0])


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence], config: dict) -> None:
    """CSV with a leading ``# config:`` line; written to a temp file then renamed."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")
    tmp.replace(path)


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _solve_or_none(run, catalog, topology, q, cfg, hops) -> Solution | None:
    sol = solve(run, catalog, topology, q, cfg, hops)
    return sol if sol.optimal else None


def experiment_suite(
    cfg: ExperimentConfig,
    models: TrainedModels | None,
    topology: Topology,
    out_dir: Path | None = None,
    q: QueuingParams | None = None,
) -> list[ExperimentResult]:
    """Rate sweep under each deadline scenario; optionally writes the plot-data CSVs.

    Without ``models`` only the solver columns are produced and no model
    policy is evaluated. Runs the solver cannot prove optimal are excluded
    and counted.
    """
    q = q or QueuingParams(f_bar=cfg.f_bar)
    hops = hop_matrix(topology)
    split = decision_catalog(topology, "split")
    nosplit = decision_catalog(topology, "nosplit")
    scfg = SolverConfig(cfg.time_limit_s)
    policies = POLICIES if models is not None else ()
    results = []
    for scen in cfg.scenarios:
        lo_hi = scenario_params(scen)
        for rate in cfg.rates:
            costs = {p: [] for p in ("solver",) + policies}
            pgs = {p: [] for p in policies}
            repaired = {p: [] for p in policies}
            fo = {"split": [0, 0], "nosplit": [0, 0]}
            wall, used, excluded = 0.0, 0, 0
            for r in range(cfg.eval_runs):
                # one seed per run index: rates and scenarios see paired runs
                spec = RunSpec(n_tasks=cfg.n_tasks, deadline_range_s=lo_hi, arrival_rate=rate,
                               seed=run_seed(cfg.seed, SWEEP_STREAM, r))
                run = generate_run(spec, topology)
                sol = _solve_or_none(run, split, topology, q, scfg, hops)
                sol_ns = _solve_or_none(run, nosplit, topology, q, scfg, hops)
                if sol is None or sol_ns is None:
                    excluded += 1
                    continue
                used += 1
                wall += sol.stats.wall_time_s
                costs["solver"].append(sol.cost)
                for mode, s in (("split", sol), ("nosplit", sol_ns)):
                    fo[mode][0] += sum(isinstance(d, FO) for d in s.assignment.choice.values())
                    fo[mode][1] += len(run)
                lab = sol.labels(split)
                labels = [lab[k.task_id] for k in run]
                for p in policies:
                    pred = predict_run(p, models, run, topology, q, split, hops, labels)
                    fixed = repair(pred, run, split, topology, q, hops)
                    costs[p].append(fixed.cost)
                    pgs[p].append(performance_gain(fixed.assignment, sol, hops))
                    repaired[p].append(100.0 * fixed.repaired.mean() if len(run) else 0.0)
            results.append(ExperimentResult(
                scenario=scen, rate=float(rate), runs=used, excluded_runs=excluded,
                cost={p: _mean(v) for p, v in costs.items()},
                pg={p: _mean(v) for p, v in pgs.items()},
                mec_pct={m: (100.0 * a / b if b else math.nan) for m, (a, b) in fo.items()},
                repaired_pct={p: _mean(v) for p, v in repaired.items()},
                solver_wall_s=wall,
            ))
    if out_dir is not None:
        timing = []
        if models is not None:
            for ti, n in enumerate(cfg.timing_tasks):
                runs = [generate_run(RunSpec(n_tasks=n, arrival_rate=cfg.default_rate,
                                             seed=run_seed(cfg.seed, TIMING_STREAM, ti, r)), topology)
                        for r in range(cfg.timing_runs)]
                timing.append(timing_bench(runs, split, topology, q, models, scfg, hops))
        write_outputs(Path(out_dir), cfg, results, timing)
    return results


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else math.nan


def write_outputs(out: Path, cfg: ExperimentConfig, results: Sequence[ExperimentResult],
                  timing: Sequence[TimingReport]) -> None:
    """One CSV per figure plus ``summary.json``."""
    out.mkdir(parents=True, exist_ok=True)
    conf = cfg.to_dict()
    first = cfg.scenarios[0]
    main = [r for r in results if r.scenario == first]
    have_models = bool(main and main[0].pg)
    if have_models:
        write_csv(out / "fig5_pg.csv", ["rate", "pg_gnn", "pg_mlp", "pg_dt", "pg_meconly"],
                  [[r.rate] + [r.pg[p] for p in POLICIES] for r in main], conf)
    write_csv(out / "fig6_mec_split.csv", ["rate", "mec_pct_split"],
              [[r.rate, r.mec_pct["split"]] for r in main], conf)
    write_csv(out / "fig7_mec_nosplit.csv", ["rate", "mec_pct_nosplit"],
              [[r.rate, r.mec_pct["nosplit"]] for r in main], conf)
    cols = ["solver", "gnn", "mlp", "dt"] if have_models else ["solver"]
    write_csv(out / "fig8_cost.csv", ["rate", "scenario"] + [f"cost_{c}" for c in cols],
              [[r.rate, r.scenario] + [r.cost[c] for c in cols] for r in results], conf)
    if timing:
        write_csv(out / "fig4_timing.csv",
                  ["n_tasks", "runs", "solver_median_s", "inference_median_s", "ratio"],
                  [[t.n_tasks, t.runs, t.solver_median_s, t.inference_median_s,
                    "" if t.ratio is None else t.ratio] for t in timing], conf)
    summary = {"config": conf, "results": [asdict(r) for r in results],
               "timing": [asdict(t) for t in timing]}
    tmp = out / "summary.json.tmp"
    tmp.write_text(json.dumps(summary, indent=2, sort_keys=True))
    tmp.replace(out / "summary.json")
