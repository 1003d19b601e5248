"""Command-line pipeline: generate -> train -> allocate -> evaluate -> sweep.

Every subcommand writes a ``run.json`` manifest with the fully resolved
parameters and SHA-256 digests of its inputs and outputs. Passing that
manifest back through ``--config`` reproduces the run. Precedence is
command-line flags, then the config file, then built-in defaults.

Exit codes: 0 success, 2 invalid arguments or configuration, 3 data or
evaluation error, 1 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    ColumnSchema,
    GroundTruth,
    ParseError,
    SchemaError,
    ValidationError,
    format_float,
    load_rct_csv,
    load_truth_csv,
    read_problem_csv,
    split_train_test,
    write_assignment_csv,
    write_rct_csv,
    write_truth_csv,
)
from .dgb import POLICIES, AllocationProblem
from .evaluation import UnevaluablePolicyError, UndefinedMetricError, budget_sweep, evaluate_ite, evaluate_pmg
from .pipeline import POLICY_NAMES, default_budget_grid, fit_effect_models, policy_table
from .synthgen import SynthConfig, generate_synthetic
from .udcf import TrainingError, TrainParams, UDCFModel, predict_cate, train_forest

log = logging.getLogger("lbcf")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_IO = 1


class ConfigError(ValueError):
    pass


FOREST_DEFAULTS = {
    "trees": 100,
    "max_depth": 8,
    "m_candidates": 10,
    "min_arm": 10,
    "subsample": 0.5,
    "feature_fraction": 1.0,
    "ridge": 1e-6,
}
SCHEMA_DEFAULTS = {"treatment_col": "treatment", "outcome_col": "outcome", "cost_cols": None, "cost_levels": None}

DEFAULTS = {
    "generate": {"n": 80_000, "k": 3, "weight": 0.0, "cost_levels": None, "effect": "smooth"},
    "train": {"data": None, "model": "model.json", **FOREST_DEFAULTS, **SCHEMA_DEFAULTS},
    "allocate": {
        "model": None,
        "data": None,
        "problem": None,
        "budget": None,
        "epsilon": None,
        "policy": "dgb",
        "assignment": "assignment.csv",
        **SCHEMA_DEFAULTS,
    },
    "evaluate": {"data": None, "assignment": None, "truth": None, "report": "report.json", **SCHEMA_DEFAULTS},
    "sweep": {
        "data": None,
        "truth": None,
        "train": None,
        "test": None,
        "test_fraction": 0.5,
        "budgets": None,
        "n_budgets": 5,
        "policies": ",".join(POLICY_NAMES),
        "epsilon": None,
        **FOREST_DEFAULTS,
        **SCHEMA_DEFAULTS,
    },
}
GLOBAL_DEFAULTS = {"seed": 0, "threads": 1, "out": "."}
PATH_KEYS = {"data", "truth", "train", "test", "model", "problem", "assignment"}


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _csv_list(text, cast=str):
    if text is None or isinstance(text, (list, tuple)):
        return text
    return [cast(v) for v in str(text).split(",") if v.strip()]


def resolve(command, args) -> dict:
    """Merge flags over config file over defaults."""
    config = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        config = loaded.get("params", loaded)
        if not isinstance(config, dict):
            raise ConfigError("config file must be a JSON object")
    resolved = {}
    for key, default in {**GLOBAL_DEFAULTS, **DEFAULTS[command]}.items():
        flag = getattr(args, key, None)
        resolved[key] = flag if flag is not None else config.get(key, default)
    return resolved


def write_manifest(out_dir: Path, command, params, inputs, outputs):
    manifest = {
        "tool": "lbcf",
        "version": __version__,
        "command": command,
        "params": params,
        "inputs": {str(p): sha256(p) for p in inputs if p},
        "outputs": {Path(p).name: sha256(p) for p in outputs},
    }
    path = out_dir / "run.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _schema(p) -> ColumnSchema:
    return ColumnSchema(
        treatment_col=p["treatment_col"],
        outcome_col=p["outcome_col"],
        cost_cols=_csv_list(p["cost_cols"]),
        cost_levels=_csv_list(p["cost_levels"], float),
    )


def _train_params(p) -> TrainParams:
    try:
        return TrainParams(
            n_trees=int(p["trees"]),
            m_candidates=int(p["m_candidates"]),
            min_samples_per_arm_leaf=int(p["min_arm"]),
            max_depth=int(p["max_depth"]),
            subsample_fraction=float(p["subsample"]),
            feature_subsample_fraction=float(p["feature_fraction"]),
            ridge_epsilon=float(p["ridge"]),
            seed=int(p["seed"]),
        ).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _require(p, *keys):
    missing = [k for k in keys if p.get(k) is None]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def _out_dir(p) -> Path:
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_generate(p):
    try:
        config = SynthConfig(
            n_samples=int(p["n"]),
            n_treatments=int(p["k"]),
            uncertainty_weight=float(p["weight"]),
            seed=int(p["seed"]),
            cost_levels=_csv_list(p["cost_levels"], float),
            effect=p["effect"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(p)
    data, truth = generate_synthetic(config)
    data_path = write_rct_csv(data, out / "data.csv")
    truth_path = write_truth_csv(truth, out / "data.truth.csv")
    write_manifest(out, "generate", p, [], [data_path, truth_path])
    print(f"wrote {data.n_samples} rows, K={data.num_treatments}: {data_path}, {truth_path}")
    return 0


def cmd_train(p):
    _require(p, "data")
    params = _train_params(p)
    data = load_rct_csv(p["data"], _schema(p))
    out = _out_dir(p)
    model = train_forest(data, params, n_jobs=int(p["threads"]))
    model_path = out / p["model"]
    model.save(model_path)
    for k, tree in enumerate(model.trees):
        print(f"tree {k:4d}  depth {tree.depth:3d}  leaves {tree.n_leaves:5d}")
    write_manifest(out, "train", p, [p["data"]], [model_path])
    print(f"model: {model_path}")
    return 0


def cmd_allocate(p):
    _require(p, "budget")
    budget = float(p["budget"])
    if not budget > 0:
        raise ConfigError(f"--budget must be positive, got {budget}")
    if p["policy"] not in POLICIES:
        raise ConfigError(f"unknown policy {p['policy']!r}; choose from {sorted(POLICIES)}")
    if p["problem"]:
        ids, theta, cost = read_problem_csv(p["problem"])
        inputs = [p["problem"]]
    else:
        _require(p, "model", "data")
        model = UDCFModel.load(p["model"])
        data = load_rct_csv(p["data"], _schema(p))
        if data.n_features != model.n_features or data.num_treatments != model.num_treatments:
            raise ValidationError(
                f"model expects {model.n_features} features / K={model.num_treatments}, data has "
                f"{data.n_features} / K={data.num_treatments}"
            )
        ids, theta, cost = data.ids, predict_cate(model, data.features), data.cost
        inputs = [p["model"], p["data"]]
    problem = AllocationProblem(theta, cost, budget)
    epsilon = None if p["epsilon"] is None else float(p["epsilon"])
    if p["policy"] == "dgb":
        assignment = POLICIES["dgb"](problem, epsilon, n_jobs=int(p["threads"]))
        if not assignment.budget_binding:
            print("notice: budget is not binding; every user gets the arm with the largest positive uplift")
    else:
        assignment = POLICIES[p["policy"]](problem)
    out = _out_dir(p)
    assignment_path = write_assignment_csv(out / p["assignment"], ids, assignment.chosen, assignment.margin)
    summary = {
        "policy": p["policy"],
        "lambda_star": assignment.lambda_star,
        "total_value": assignment.total_value,
        "total_cost": assignment.total_cost,
        "budget": budget,
        "repaired": assignment.repaired,
        "budget_binding": assignment.budget_binding,
        "n_iter": assignment.n_iter,
        "n_treated": int(np.sum(assignment.chosen > 0)),
    }
    summary_path = out / "allocation.json"
    _write_json(summary_path, summary)
    write_manifest(out, "allocate", p, inputs, [assignment_path, summary_path])
    for key in ("lambda_star", "total_value", "total_cost", "repaired", "n_treated"):
        print(f"{key}: {summary[key]}")
    return 0


def _read_assignment(path, data):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and "chosen_treatment" not in rows[0]:
        raise SchemaError("assignment file needs a chosen_treatment column")
    by_id = {}
    for i, r in enumerate(rows):
        try:
            by_id[str(r["id"])] = int(r["chosen_treatment"])
        except (KeyError, ValueError):
            raise ParseError(f"row {i}: bad assignment entry {r}", i) from None
    try:
        return np.array([by_id[str(i)] for i in data.ids], dtype=np.int64)
    except KeyError as exc:
        raise ValidationError(f"assignment has no entry for id {exc.args[0]}") from None


def align_truth(truth: GroundTruth, ids) -> GroundTruth:
    """Rows of ``truth`` in the order of ``ids``."""
    position = {str(v): k for k, v in enumerate(truth.ids)}
    try:
        return truth.subset([position[str(v)] for v in ids])
    except KeyError as exc:
        raise ValidationError(f"ground truth has no row for id {exc.args[0]}") from None


def cmd_evaluate(p):
    _require(p, "data", "assignment")
    data = load_rct_csv(p["data"], _schema(p))
    chosen = _read_assignment(p["assignment"], data)
    report = {"pmg": evaluate_pmg(chosen, data).to_dict()}
    inputs = [p["data"], p["assignment"]]
    if p["truth"]:
        truth = align_truth(load_truth_csv(p["truth"]), data.ids)
        report["ite"] = evaluate_ite(chosen, truth).to_dict()
        inputs.append(p["truth"])
    out = _out_dir(p)
    report_path = out / p["report"]
    _write_json(report_path, report)
    write_manifest(out, "evaluate", p, inputs, [report_path])
    print(f"PMG: {report['pmg']['pmg']}")
    if "ite" in report:
        print(f"ITE: {report['ite']['tau_syn']}")
    return 0


def cmd_sweep(p):
    schema = _schema(p)
    truth = load_truth_csv(p["truth"]) if p["truth"] else None
    if p["train"] and p["test"]:
        train, test = load_rct_csv(p["train"], schema), load_rct_csv(p["test"], schema)
        inputs = [p["train"], p["test"]]
    else:
        _require(p, "data")
        data = load_rct_csv(p["data"], schema)
        train, test = split_train_test(data, float(p["test_fraction"]), int(p["seed"]))
        inputs = [p["data"]]
    if truth is not None:
        inputs.append(p["truth"])
        truth = align_truth(truth, test.ids)

    policies = _csv_list(p["policies"])
    unknown = sorted(set(policies) - set(POLICY_NAMES))
    if unknown:
        raise ConfigError(f"unknown policies {unknown}; choose from {list(POLICY_NAMES)}")
    budgets = _csv_list(p["budgets"], float) or default_budget_grid(test.cost, int(p["n_budgets"]))
    tp = _train_params(p)
    models = fit_effect_models(
        train,
        policies,
        n_jobs=int(p["threads"]),
        n_trees=tp.n_trees,
        m_candidates=tp.m_candidates,
        min_samples_per_arm_leaf=tp.min_samples_per_arm_leaf,
        max_depth=tp.max_depth,
        subsample_fraction=tp.subsample_fraction,
        feature_subsample_fraction=tp.feature_subsample_fraction,
        ridge_epsilon=tp.ridge_epsilon,
        random_state=tp.seed,
    )
    epsilon = None if p["epsilon"] is None else float(p["epsilon"])
    table = policy_table(models, test.features, epsilon)

    rows, details = [], []
    for name in policies:
        theta, allocator = table[name]
        rows += budget_sweep(allocator, theta, test, budgets, truth, name)
        for b in budgets:
            assignment = allocator(AllocationProblem(theta, test.cost, b))
            entry = {"policy": name, "budget": b}
            try:
                entry["pmg"] = evaluate_pmg(assignment, test).to_dict()
            except (UnevaluablePolicyError, UndefinedMetricError) as exc:
                entry["pmg_error"] = str(exc)
            details.append(entry)

    out = _out_dir(p)
    csv_path = out / "sweep.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["budget", "metric", "consumed_budget", "policy"])
        for r in rows:
            w.writerow(
                [
                    format_float(r["budget"]),
                    "" if r["metric"] is None else format_float(r["metric"]),
                    "" if r["consumed_budget"] is None else format_float(r["consumed_budget"]),
                    r["policy"],
                ]
            )
    json_path = out / "sweep.json"
    _write_json(json_path, {"metric": "ite" if truth is not None else "pmg", "rows": rows, "details": details})
    write_manifest(out, "sweep", p, inputs, [csv_path, json_path])
    failed = [r for r in rows if r["error"]]
    for r in failed:
        print(f"budget {r['budget']} policy {r['policy']}: {r['error']}", file=sys.stderr)
    print(f"sweep: {len(rows)} rows -> {csv_path}")
    return EXIT_DATA if failed else 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "allocate": cmd_allocate,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def _add_schema_flags(sp):
    sp.add_argument("--treatment-col", dest="treatment_col")
    sp.add_argument("--outcome-col", dest="outcome_col")
    sp.add_argument("--cost-cols", dest="cost_cols", help="comma-separated cost columns, one per treatment")
    sp.add_argument("--cost-levels", dest="cost_levels", help="comma-separated per-treatment costs broadcast to all rows")


def _add_forest_flags(sp):
    sp.add_argument("--trees", type=int)
    sp.add_argument("--max-depth", dest="max_depth", type=int)
    sp.add_argument("--m-candidates", dest="m_candidates", type=int)
    sp.add_argument("--min-arm", dest="min_arm", type=int, help="minimum samples per arm in a leaf")
    sp.add_argument("--subsample", type=float)
    sp.add_argument("--feature-fraction", dest="feature_fraction", type=float)
    sp.add_argument("--ridge", type=float)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--config", help="JSON config or a previous run.json manifest")
    common.add_argument("-o", "--out", help="output directory (created if missing)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lbcf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("generate", parents=[common], help="write a synthetic RCT dataset and its ground truth")
    sp.add_argument("--n", type=int)
    sp.add_argument("--k", type=int)
    sp.add_argument("--weight", type=float, help="uncertainty weight (noise scale), >= 0")
    sp.add_argument("--cost-levels", dest="cost_levels")
    sp.add_argument("--effect", choices=("smooth", "step"))

    sp = sub.add_parser("train", parents=[common], help="fit a UDCF model")
    sp.add_argument("--data")
    sp.add_argument("--model", help="model file name inside --out")
    _add_forest_flags(sp)
    _add_schema_flags(sp)

    sp = sub.add_parser("allocate", parents=[common], help="assign treatments under a budget")
    sp.add_argument("--model")
    sp.add_argument("--data")
    sp.add_argument("--problem", help="CSV with id,theta_1..theta_K,cost_1..cost_K")
    sp.add_argument("--budget", type=float)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--policy", choices=sorted(POLICIES))
    sp.add_argument("--assignment", help="output file name inside --out")
    _add_schema_flags(sp)

    sp = sub.add_parser("evaluate", parents=[common], help="PMG (and ITE with --truth) of an assignment")
    sp.add_argument("--data")
    sp.add_argument("--assignment")
    sp.add_argument("--truth")
    sp.add_argument("--report", help="output file name inside --out")
    _add_schema_flags(sp)

    sp = sub.add_parser("sweep", parents=[common], help="compare policies over a budget grid")
    sp.add_argument("--data", help="dataset split into train/test by --test-fraction")
    sp.add_argument("--train")
    sp.add_argument("--test")
    sp.add_argument("--truth", help="ground truth; switches the metric from PMG to ITE")
    sp.add_argument("--test-fraction", dest="test_fraction", type=float)
    sp.add_argument("--budgets", help="comma-separated ascending budgets")
    sp.add_argument("--n-budgets", dest="n_budgets", type=int)
    sp.add_argument("--policies", help=f"comma-separated subset of {','.join(POLICY_NAMES)}")
    sp.add_argument("--epsilon", type=float)
    _add_forest_flags(sp)
    _add_schema_flags(sp)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        params = resolve(args.command, args)
        log.info("resolved parameters: %s", json.dumps(params, sort_keys=True))
        return COMMANDS[args.command](params)
    except ConfigError as exc:
        print(f"lbcf {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnevaluablePolicyError as exc:
        print(f"lbcf {args.command}: unevaluable policy (arm {exc.arm}): {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValidationError, SchemaError, ParseError, TrainingError, UndefinedMetricError, ValueError) as exc:
        print(f"lbcf {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"lbcf {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
