"""Command-line front end: partition, plan, simulate, sweep, report.

Configs are JSON documents, either a bare run config or a wrapper
{"version": 1, "run": {...}, "sweep": {"axes": [...], "seeds": [...]}}.
Flag overrides (--tau, --beta, --seed, ...) are applied before validation.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .report import generate_report
from .scenario import generate_scenario
from .scheduler import TierPlan
from .sim import (
    ALGORITHMS,
    ConfigError,
    RunConfig,
    _sub_seeds,
    make_plan,
    prepare_run,
    run as run_algorithm,
    run_config_from_doc,
    run_summary,
)
from .workload import WorkloadAssignment, optimize_workloads

log = logging.getLogger(__name__)

WRAPPER_VERSION = 1


def _load_doc(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: not valid JSON: {err}")


def _split_config(doc: dict) -> tuple[dict, dict | None]:
    """Wrapper docs carry 'run' (+ optional 'sweep'); bare docs are the run."""
    if "run" in doc:
        version = doc.get("version", WRAPPER_VERSION)
        if version != WRAPPER_VERSION:
            raise ConfigError(f"unsupported config version {version!r}")
        sweep = doc.get("sweep")
        if sweep is not None and not isinstance(sweep, dict):
            raise ConfigError("'sweep' must be a JSON object")
        if not isinstance(doc["run"], dict):
            raise ConfigError("'run' must be a JSON object")
        return copy.deepcopy(doc["run"]), copy.deepcopy(sweep)
    return copy.deepcopy(doc), None


def _apply_overrides(run_doc: dict, args: argparse.Namespace) -> dict:
    if getattr(args, "algorithm", None) is not None:
        run_doc["algorithm"] = args.algorithm
    if getattr(args, "tau", None) is not None:
        run_doc["tau_s"] = args.tau
    if getattr(args, "beta", None) is not None:
        run_doc["beta"] = args.beta
    if getattr(args, "seed", None) is not None:
        run_doc["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        run_doc["iterations"] = args.iterations
        run_doc["time_budget_s"] = None
    if getattr(args, "time_budget", None) is not None:
        run_doc["time_budget_s"] = args.time_budget
        run_doc["iterations"] = None
    return run_doc


def _write_json(path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _set_path(doc: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = doc
    for key in parts[:-1]:
        nxt = node.get(key)
        if not isinstance(nxt, dict):
            nxt = {}
            node[key] = nxt
        node = nxt
    node[parts[-1]] = value


# --- subcommands ---


def _cmd_partition(args) -> int:
    run_doc, _ = _split_config(_load_doc(args.config))
    cfg = run_config_from_doc(_apply_overrides(run_doc, args))
    profiles, _, _, _ = prepare_run(cfg)
    doc = {
        "version": 1,
        "beta": cfg.beta,
        "seed": cfg.seed,
        "n_clients": len(profiles),
        "clients": {str(p.id): list(p.dataset_indices) for p in profiles},
    }
    _write_json(args.out, doc)
    print(f"wrote {args.out}")
    return 0


def _cmd_plan(args) -> int:
    run_doc, _ = _split_config(_load_doc(args.config))
    cfg = run_config_from_doc(_apply_overrides(run_doc, args))
    scenario_seed, _, _, _ = _sub_seeds(cfg.seed)
    profiles = generate_scenario(replace(cfg.scenario, seed=scenario_seed))
    plan = make_plan(cfg, profiles)
    assignment = optimize_workloads(plan, profiles, cfg.d_min)
    doc = plan.to_doc()
    doc["workload"] = assignment.to_doc()
    _write_json(args.out, doc)
    tiers = ", ".join(f"{j}:{len(plan.upload_order[j])}" for j in plan.tiers())
    print(f"wrote {args.out} (tiers {tiers})")
    return 0


def _load_plan(path) -> tuple[TierPlan, dict | None]:
    doc = _load_doc(path)
    workload_doc = doc.pop("workload", None)
    plan = TierPlan.from_doc(doc)
    workloads = None
    if workload_doc is not None:
        workloads = WorkloadAssignment.from_doc(workload_doc).d_int
    return plan, workloads


def _cmd_simulate(args) -> int:
    run_doc, _ = _split_config(_load_doc(args.config))
    cfg = run_config_from_doc(_apply_overrides(run_doc, args))
    plan = None
    workloads = None
    if args.plan is not None:
        plan, workloads = _load_plan(args.plan)
        if plan.n_clients != cfg.scenario.n_clients:
            raise ConfigError(
                f"plan covers {plan.n_clients} clients, config has "
                f"{cfg.scenario.n_clients}"
            )
    metrics = run_algorithm(cfg, plan, workloads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.to_csv(out)
    summary_path = out.with_suffix(out.suffix + ".summary.json")
    _write_json(summary_path, run_summary(cfg, metrics))
    final = metrics.rows[-1].test_acc if metrics.rows else float("nan")
    print(f"wrote {out} and {summary_path} (final accuracy {final:.4f})")
    return 0


def _sweep_cells(run_doc: dict, sweep_doc: dict | None):
    """Cartesian product of axis values times seeds, as override dicts."""
    axes = []
    seeds = [run_doc.get("seed", 0)]
    if sweep_doc:
        raw_axes = sweep_doc.get("axes", [])
        if not isinstance(raw_axes, list):
            raise ConfigError("sweep.axes must be a list of [path, values] pairs")
        for pair in raw_axes:
            if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
                raise ConfigError("sweep.axes entries must be [path, values] pairs")
            path, values = pair
            if not isinstance(values, list) or not values:
                raise ConfigError(f"sweep axis {path!r} needs a non-empty value list")
            axes.append((str(path), list(values)))
        if "seeds" in sweep_doc:
            seeds = [int(s) for s in sweep_doc["seeds"]]
            if not seeds:
                raise ConfigError("sweep.seeds must be non-empty")
        unknown = sorted(set(sweep_doc) - {"axes", "seeds"})
        if unknown:
            raise ConfigError(f"unknown field sweep.{unknown[0]!r}")

    combos = [{}]
    for path, values in axes:
        combos = [dict(c, **{path: v}) for c in combos for v in values]
    cells = []
    for combo in combos:
        for seed in seeds:
            doc = copy.deepcopy(run_doc)
            for path, value in combo.items():
                _set_path(doc, path, value)
            doc["seed"] = seed
            cells.append({"params": combo, "seed": seed, "doc": doc})
    return cells, axes, seeds


def _run_cell(doc_json: str) -> dict:
    """Executes one sweep cell; separate function so worker processes can pickle it."""
    cfg = run_config_from_doc(json.loads(doc_json))
    metrics = run_algorithm(cfg)
    return {"csv": metrics.to_csv_text(), "summary": run_summary(cfg, metrics)}


def _cmd_sweep(args) -> int:
    run_doc, sweep_doc = _split_config(_load_doc(args.config))
    cells, axes, seeds = _sweep_cells(run_doc, sweep_doc)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    payloads = [json.dumps(c["doc"]) for c in cells]
    results: list[dict | Exception] = [None] * len(cells)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_run_cell, p) for p in payloads]
            for k, fut in enumerate(futures):
                try:
                    results[k] = fut.result()
                except Exception as err:  # isolate per-cell failures
                    results[k] = err
    else:
        for k, payload in enumerate(payloads):
            try:
                results[k] = _run_cell(payload)
            except Exception as err:
                results[k] = err

    manifest_cells = []
    n_failed = 0
    for k, (cell, result) in enumerate(zip(cells, results)):
        csv_name = f"cell_{k:04d}.csv"
        resolved = {
            "algorithm": cell["doc"].get("algorithm", "decantfed"),
            "tau_s": cell["doc"].get("tau_s", 15.0),
            "beta": cell["doc"].get("beta", 1.0),
        }
        entry = {
            "index": k,
            "params": cell["params"],
            "seed": cell["seed"],
            "csv": csv_name,
            "resolved": resolved,
        }
        if isinstance(result, Exception):
            n_failed += 1
            entry["status"] = f"error: {result}"
            log.error("cell %d failed: %s", k, result)
        else:
            with open(out_dir / csv_name, "w", encoding="utf-8", newline="\n") as f:
                f.write(result["csv"])
            entry["status"] = "ok"
            entry["summary"] = result["summary"]
        manifest_cells.append(entry)

    manifest = {
        "version": 1,
        "base": run_doc,
        "axes": [[p, v] for p, v in axes],
        "seeds": seeds,
        "cells": manifest_cells,
    }
    _write_json(out_dir / "manifest.json", manifest)
    print(f"wrote {len(cells) - n_failed}/{len(cells)} cells to {out_dir}")
    return 0 if n_failed == 0 else 1


def _cmd_report(args) -> int:
    written = generate_report(args.config, args.out, target_acc=args.target_acc)
    for name, path in sorted(written.items()):
        print(f"wrote {path}")
    return 0


# --- parser ---


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="decantfed",
        description="Tier-scheduled federated learning simulator and baselines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, *, plan=False, iterations=False):
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", required=True, help="output file or directory")
        p.add_argument("--seed", type=int, help="override run seed")
        p.add_argument("--tau", type=float, help="override aggregation period (s)")
        p.add_argument("--beta", type=float, help="override partition skew")
        p.add_argument("--algorithm", choices=ALGORITHMS, help="override algorithm")
        if plan:
            p.add_argument("--plan", help="reuse a plan JSON written by 'plan'")
        if iterations:
            p.add_argument("--iterations", type=int, help="stop after N iterations")
            p.add_argument("--time-budget", type=float, dest="time_budget",
                           help="stop after this much simulated time (s)")

    p = sub.add_parser("partition", help="write per-client dataset indices")
    add_common(p)
    p.set_defaults(func=_cmd_partition)

    p = sub.add_parser("plan", help="write the tier plan and optimized workloads")
    add_common(p)
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("simulate", help="run one algorithm, write metrics CSV + summary")
    add_common(p, plan=True, iterations=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("sweep", help="run a grid of configs into a directory")
    add_common(p, iterations=True)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="tables and figures from a sweep directory")
    p.add_argument("--config", required=True,
                   help="sweep output directory (or its manifest.json)")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--target-acc", type=float, default=0.8, dest="target_acc",
                   help="accuracy target for time-to-accuracy tables")
    p.set_defaults(func=_cmd_report)

    return parser


def cli(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
