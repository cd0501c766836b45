"""Command-line entry point: ``coin-placer <command> [options]``.

Exit codes: 0 success, 1 usage, 2 validation, 3 solver budget, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from .cost_model import CouplingRule, DEFAULT_F_BAR, QueuingParams
from .dataset import (
    Dataset,
    EdgeRule,
    FormatError,
    Standardizer,
    build_graph,
    kfold_split,
    load_dataset,
    load_fold_plan,
    load_runs,
    run_features,
    save_dataset,
    save_fold_plan,
    save_runs,
)
from .eval import (
    TIMING_STREAM,
    ExperimentConfig,
    MissingArtifact,
    TrainedModels,
    experiment_suite,
    metrics,
    predict_run,
    run_seed,
    timing_bench,
    write_csv,
)
from .models import (
    TrainConfig,
    dt_fit,
    load_gcn,
    load_mlp,
    save_gcn,
    save_mlp,
    train_gcn,
    train_mlp,
    tree_from_json,
    tree_to_json,
)
from .models.tree import DEFAULT_MAX_DEPTH
from .solver import SolverConfig, solve
from .topology import (
    Topology,
    TopologyError,
    build_default_topology,
    decision_catalog,
    hop_matrix,
    load_topology,
    topology_to_dict,
    validate,
)
from .workload import RunSpec, generate_run, read_run_csv, scenario_params

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_BUDGET, EXIT_MISSING = 0, 1, 2, 3, 4
PAPER_SCALE_RUNS = 5000
MODELS = ("gcn", "mlp", "dt")


class UsageError(Exception):
    pass


class ValidationFailed(Exception):
    pass


class BudgetExceeded(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2; usage errors are 1 here
        raise UsageError(f"{self.prog}: {message}")


# --- shared helpers ----------------------------------------------------------


def _atomic_text(path: Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _config(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k == "func":
            continue
        out[k] = str(v) if isinstance(v, Path) else v
    return out


def _require(path: Path) -> Path:
    if not Path(path).exists():
        raise MissingArtifact(str(path))
    return Path(path)


def _topology(args) -> Topology:
    if getattr(args, "topology", None) is None:
        return build_default_topology()
    t = load_topology(_require(args.topology))
    problems = validate(t)
    if problems:
        raise ValidationFailed("\n".join(problems))
    return t


def _queuing(args) -> QueuingParams:
    return QueuingParams(f_bar=args.f_bar, coupling=CouplingRule(args.coupling))


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("COIN_PLACER_JOBS", "1")))
    except ValueError:
        return 1


def _map(fn, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# --- gen-topology ------------------------------------------------------------


def cmd_gen_topology(args) -> int:
    if args.default == (args.config is not None):
        raise UsageError("gen-topology: pass exactly one of --default or --config")
    if args.default:
        t = build_default_topology()
    else:
        try:
            t = load_topology(_require(args.config))
        except (TopologyError, json.JSONDecodeError) as exc:
            raise ValidationFailed(str(exc)) from None
        problems = validate(t)
        if problems:
            raise ValidationFailed("\n".join(problems))
    text = json.dumps(topology_to_dict(t), indent=2) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        _atomic_text(args.out, text)
    return EXIT_OK


# --- solving -------------------------------------------------------------------


def _label_rows(run_id, run, sol, catalog, hops):
    lab = sol.labels(catalog)
    from .cost_model import network_cost

    return [[run_id, k.task_id, lab[k.task_id],
             network_cost(k, catalog[lab[k.task_id]], hops), sol.stats.wall_time_s]
            for k in sorted(run, key=lambda k: k.task_id)]


LABEL_COLUMNS = ["run_id", "task_id", "label", "cost_of_label", "solver_wall_time_s"]


def cmd_solve(args) -> int:
    t = _topology(args)
    run = read_run_csv(_require(args.run))
    catalog = decision_catalog(t, args.mode)
    hops = hop_matrix(t)
    sol = solve(run, catalog, t, _queuing(args), SolverConfig(args.time_limit), hops)
    if sol.status == "timeout":
        raise BudgetExceeded(f"no proven optimum within {args.time_limit}s")
    if sol.status == "infeasible":
        raise ValidationFailed("the run admits no feasible placement")
    write_csv(args.out, LABEL_COLUMNS, _label_rows(args.run_id, run, sol, catalog, hops),
              _config(args))
    print(f"cost {sol.cost!r} in {sol.stats.wall_time_s:.3f}s")
    return EXIT_OK


def _solve_job(job):
    """One dataset run: generate, solve, build features (module level so it pickles)."""
    index, spec, topo_doc, mode, q, time_limit = job
    from .topology import topology_from_dict

    t = topology_from_dict(topo_doc)
    run = generate_run(spec, t)
    catalog = decision_catalog(t, mode)
    hops = hop_matrix(t)
    sol = solve(run, catalog, t, q, SolverConfig(time_limit), hops)
    if not sol.optimal:
        return index, run, sol.status, None, None, None
    x = run_features(run, t, q, catalog, hops)
    lab = sol.labels(catalog)
    labels = [lab[k.task_id] for k in run]
    return index, run, sol.status, x, labels, _label_rows(index, run, sol, catalog, hops)


def cmd_gen_dataset(args) -> int:
    runs = PAPER_SCALE_RUNS if args.paper_scale else args.runs
    if runs < 1 or args.tasks < 1:
        raise UsageError("gen-dataset: --runs and --tasks must be >= 1")
    t = _topology(args)
    q = _queuing(args)
    lo_hi = scenario_params(args.scenario)
    doc = topology_to_dict(t)
    jobs = [(r, RunSpec(n_tasks=args.tasks, deadline_range_s=lo_hi, arrival_rate=args.rate,
                        seed=run_seed(args.seed, r)), doc, args.mode, q, args.time_limit)
            for r in range(runs)]
    results = sorted(_map(_solve_job, jobs, args.jobs), key=lambda x: x[0])
    timeouts = [r for r, _, status, *_ in results if status == "timeout"]
    if timeouts:
        raise BudgetExceeded(f"{len(timeouts)} run(s) exceeded the solver budget, "
                             f"first run {timeouts[0]}; no outputs written")
    kept = [res for res in results if res[3] is not None]
    excluded = [res[0] for res in results if res[3] is None]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    conf = _config(args) | {"resolved_runs": runs}
    if kept:
        data = Dataset(
            run_id=np.concatenate([np.full(len(r[1]), r[0]) for r in kept]).astype(np.int64),
            task_id=np.concatenate([[k.task_id for k in r[1]] for r in kept]).astype(np.int64),
            features=np.vstack([r[3] for r in kept]),
            labels=np.concatenate([r[4] for r in kept]).astype(np.int64),
        )
        save_dataset(out / "dataset.csv", data, conf)
    save_runs(out / "runs.csv", [(r[0], r[1]) for r in kept], conf)
    write_csv(out / "labels.csv", LABEL_COLUMNS, [row for r in kept for row in r[5]], conf)
    manifest = {"config": conf, "runs_requested": runs, "runs_kept": len(kept),
                "excluded_infeasible_runs": excluded,
                "samples": int(sum(len(r[1]) for r in kept))}
    _atomic_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    print(f"{manifest['samples']} samples from {len(kept)} runs; "
          f"{len(excluded)} infeasible run(s) excluded")
    return EXIT_OK


# --- training and evaluation -----------------------------------------------------


def _load_data(data_dir: Path):
    data_dir = Path(data_dir)
    data = load_dataset(_require(data_dir / "dataset.csv"))
    runs = load_runs(_require(data_dir / "runs.csv"))
    ids = data.run_ids()
    feats = [data.features[data.rows_of(r)] for r in ids]
    labels = [data.labels[data.rows_of(r)] for r in ids]
    aps = []
    for r in ids:
        by_task = {k.task_id: k.ap for k in runs.get(r, [])}
        try:
            aps.append([by_task[int(tid)] for tid in data.task_id[data.rows_of(r)]])
        except KeyError:
            raise FormatError(f"runs file lacks tasks of run {r}") from None
    return ids, feats, labels, aps


def _manifest(data_dir: Path) -> dict:
    path = Path(data_dir) / "manifest.json"
    return json.loads(path.read_text())["config"] if path.exists() else {}


def _catalog_for(data_dir: Path, t: Topology):
    return decision_catalog(t, _manifest(data_dir).get("mode", "split"))


def _scaler_doc(s: Standardizer) -> dict:
    return {"mean": s.mean.tolist(), "scale": s.scale.tolist()}


def _scaler_from(doc: dict) -> Standardizer:
    return Standardizer(np.array(doc["mean"], dtype=float), np.array(doc["scale"], dtype=float))


def cmd_train(args) -> int:
    t = _topology(args)
    ids, feats, labels, aps = _load_data(args.data)
    catalog = _catalog_for(args.data, t)
    plan = kfold_split(len(ids), args.k, args.seed)
    sessions = args.folds if args.folds else list(range(args.k))
    if any(not 0 <= s < args.k for s in sessions):
        raise UsageError(f"train: fold index outside 0..{args.k - 1}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    conf = _config(args) | {"run_ids": ids}
    save_fold_plan(plan, out / "folds.json")
    cfg = TrainConfig(epochs=args.epochs, learning_rate=args.lr, seed=args.seed, delta=args.delta)
    wanted = MODELS if args.model == "all" else (args.model,)
    if "gcn" in wanted:
        graphs = [build_graph(x, args.edge_rule, aps=a, labels=y, catalog=catalog)
                  for x, y, a in zip(feats, labels, aps)]
        for t_idx, res in zip(sessions, train_gcn(graphs, plan, cfg, len(catalog), sessions)):
            save_gcn(out / f"gcn_fold{t_idx}.ckpt", res.params)
            _atomic_text(out / f"gcn_fold{t_idx}.json", json.dumps(
                {"config": conf, "fold": t_idx, "best_epoch": res.best_epoch,
                 "edge_rule": EdgeRule(args.edge_rule).value, "scaler": _scaler_doc(res.scaler),
                 "history": res.history}))
    if "mlp" in wanted:
        for t_idx, res in zip(sessions, train_mlp(feats, labels, plan, cfg, len(catalog), sessions)):
            save_mlp(out / f"mlp_fold{t_idx}.ckpt", res.params)
            _atomic_text(out / f"mlp_fold{t_idx}.json", json.dumps(
                {"config": conf, "fold": t_idx, "best_epoch": res.best_epoch,
                 "scaler": _scaler_doc(res.scaler), "history": res.history}))
    if "dt" in wanted:
        for t_idx in sessions:
            train_idx, _ = plan.split(t_idx)
            tree = dt_fit(np.vstack([feats[i] for i in train_idx]),
                          np.concatenate([labels[i] for i in train_idx]),
                          args.max_depth, len(catalog))
            _atomic_text(out / f"dt_fold{t_idx}.json", json.dumps(
                {"config": conf, "fold": t_idx, "tree": json.loads(tree_to_json(tree))}))
    print(f"trained {', '.join(wanted)} on {len(sessions)} fold(s)")
    return EXIT_OK


def _load_fold(models_dir: Path, model: str, fold: int):
    base = Path(models_dir)
    meta = json.loads(_require(base / f"{model}_fold{fold}.json").read_text())
    if model == "dt":
        return tree_from_json(json.dumps(meta["tree"])), None, meta
    loader = load_gcn if model == "gcn" else load_mlp
    return loader(_require(base / f"{model}_fold{fold}.ckpt")), _scaler_from(meta["scaler"]), meta


def load_trained(models_dir: Path, fold: int) -> TrainedModels:
    gcn, gcn_scaler, meta = _load_fold(models_dir, "gcn", fold)
    mlp, mlp_scaler, _ = _load_fold(models_dir, "mlp", fold)
    tree, _, _ = _load_fold(models_dir, "dt", fold)
    return TrainedModels(gcn, gcn_scaler, mlp, mlp_scaler, tree, EdgeRule(meta["edge_rule"]))


def cmd_evaluate(args) -> int:
    from .models import dt_predict, gcn_predict, mlp_predict

    t = _topology(args)
    ids, feats, labels, aps = _load_data(args.data)
    catalog = _catalog_for(args.data, t)
    plan = load_fold_plan(_require(Path(args.models) / "folds.json"))
    if plan.k and max(max(f, default=-1) for f in plan.folds) >= len(ids):
        raise FormatError("fold plan indexes more runs than the dataset holds")
    wanted = MODELS if args.model == "all" else (args.model,)
    report = {"config": _config(args)}
    for model in wanted:
        folds = []
        for t_idx in range(plan.k):
            path = Path(args.models) / f"{model}_fold{t_idx}.json"
            if not path.exists():
                continue
            params, scaler, meta = _load_fold(args.models, model, t_idx)
            _, val = plan.split(t_idx)
            preds, truth = [], []
            for i in val:
                if model == "gcn":
                    g = build_graph(scaler.transform(feats[i]), meta["edge_rule"], aps=aps[i],
                                    labels=labels[i], catalog=catalog)
                    p = gcn_predict(params, g)
                elif model == "mlp":
                    p = mlp_predict(params, scaler.transform(feats[i]))
                else:
                    p = dt_predict(params, feats[i])
                preds.append(p)
                truth.append(labels[i])
            m = metrics(np.concatenate(preds), np.concatenate(truth), len(catalog))
            folds.append({"fold": t_idx} | m.to_dict())
        if not folds:
            raise MissingArtifact(f"{Path(args.models) / model}_fold*.json")
        keys = ("accuracy", "macro_precision", "macro_recall", "macro_f1")
        report[model] = {"folds": folds,
                         "mean": {k: float(np.mean([f[k] for f in folds])) for k in keys}}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        _atomic_text(args.out, text)
    return EXIT_OK


# --- bench and plots ---------------------------------------------------------------


def cmd_bench(args) -> int:
    t = _topology(args)
    q = _queuing(args)
    models = load_trained(args.models, args.fold)
    catalog = decision_catalog(t, "split")
    hops = hop_matrix(t)
    reports = []
    for ti, n in enumerate(args.tasks):
        runs = [generate_run(RunSpec(n_tasks=n, arrival_rate=args.rate,
                                     deadline_range_s=scenario_params(args.scenario),
                                     seed=run_seed(args.seed, TIMING_STREAM, ti, r)), t)
                for r in range(args.runs)]
        reports.append(timing_bench(runs, catalog, t, q, models, SolverConfig(args.time_limit), hops))
    doc = {"config": _config(args), "timing": [vars(r) for r in reports]}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        _atomic_text(args.out, text)
    return EXIT_OK


def cmd_export_plots(args) -> int:
    t = _topology(args)
    models = load_trained(args.models, args.fold)
    cfg = ExperimentConfig(rates=tuple(args.rates), eval_runs=args.eval_runs, seed=args.seed,
                           f_bar=args.f_bar, time_limit_s=args.time_limit,
                           timing_runs=args.timing_runs, default_rate=args.rate)
    results = experiment_suite(cfg, models, t, Path(args.out), _queuing(args))
    excluded = sum(r.excluded_runs for r in results)
    print(f"wrote plot data for {len(results)} sweep points to {args.out}"
          + (f"; {excluded} run(s) excluded" if excluded else ""))
    return EXIT_OK


# --- parser ---------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--topology", type=Path, help="topology JSON (default topology if omitted)")
    p.add_argument("--seed", type=int, default=0, help="root seed")
    p.add_argument("--f-bar", type=float, default=DEFAULT_F_BAR,
                   help="average CPU cycles allotted per request")
    p.add_argument("--coupling", choices=[c.value for c in CouplingRule],
                   default=CouplingRule.FO_NOT_SLOWER.value)
    p.add_argument("--time-limit", type=float, default=60.0, help="solver budget per run (s)")
    p.add_argument("--jobs", type=int, default=_default_jobs(),
                   help="worker processes (default: $COIN_PLACER_JOBS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coin-placer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-topology", help="write the default or a validated topology")
    p.add_argument("--default", action="store_true")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_gen_topology)

    p = sub.add_parser("solve", help="optimal placement of one run file")
    _common(p)
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--mode", choices=["split", "nosplit"], default="split")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--run-id", type=int, default=0)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("gen-dataset", help="generate runs, solve them, write features and labels")
    _common(p)
    p.add_argument("--runs", type=int, default=200)
    p.add_argument("--paper-scale", action="store_true", help=f"{PAPER_SCALE_RUNS} runs")
    p.add_argument("--tasks", type=int, default=275)
    p.add_argument("--rate", type=float, default=10.0)
    p.add_argument("--scenario", choices=["strict", "relaxed"], default="strict")
    p.add_argument("--mode", choices=["split", "nosplit"], default="split")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="k-fold training of gcn, mlp and/or dt")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", choices=MODELS + ("all",), default="all")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--folds", type=_ints, default=None, help="subset of fold indices, e.g. 0,3")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--delta", type=int, default=64)
    p.add_argument("--max-depth", type=int, default=DEFAULT_MAX_DEPTH)
    p.add_argument("--edge-rule", choices=[r.value for r in EdgeRule], default=EdgeRule.SAME_AP.value)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="validation metrics per fold")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--models", type=Path, required=True)
    p.add_argument("--model", choices=MODELS + ("all",), default="all")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="solver against feature building plus GCN inference")
    _common(p)
    p.add_argument("--models", type=Path, required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--tasks", type=_ints, default=[50, 150, 275])
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--rate", type=float, default=10.0)
    p.add_argument("--scenario", choices=["strict", "relaxed"], default="strict")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-plots", help="rate sweep plot data (CSV per figure)")
    _common(p)
    p.add_argument("--models", type=Path, required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--rates", type=_floats, default=list(ExperimentConfig.rates))
    p.add_argument("--rate", type=float, default=10.0, help="rate used for the timing runs")
    p.add_argument("--eval-runs", type=int, default=10)
    p.add_argument("--timing-runs", type=int, default=5)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_export_plots)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ValidationFailed, TopologyError, FormatError) as exc:
        print(f"validation failed:\n{exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BudgetExceeded as exc:
        print(f"solver budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())
