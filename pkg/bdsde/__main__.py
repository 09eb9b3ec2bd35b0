import argparse
from dataclasses import replace
import json
import os
import sys
import time
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pandas.core.frame import DataFrame
from tabulate import tabulate
import yaml

from . import __version__
from . import analytics
from . import datatypes
from . import forward
from . import paths
from . import problems
from . import regression
from . import solver
from . import utils

# (label, schedule index j, B path index, solver settings)
Setting = Tuple[str, Optional[int], int, datatypes.SolverConfig]


def plan_settings(config: datatypes.ExperimentConfig) -> List[Setting]:
    s = config.solver
    if config.mode == datatypes.RunMode.schedule:
        entries = analytics.schedule(config.j_max, config.alpha_m, config.beta, config.delta_base)
        return [
            (f"j{e.j}", e.j, 0, replace(s, steps=e.steps, samples=e.samples, delta=e.delta))
            for e in entries
        ]
    if config.mode == datatypes.RunMode.ensemble:
        return [
            (f"p{b}_N{n}", None, b, replace(s, steps=n))
            for b in range(config.ensemble_paths)
            for n in config.ensemble_steps
        ]
    return [(f"N{s.steps}", None, 0, s)]


def run_setting(
    problem: datatypes.Problem,
    linear: Optional[datatypes.LinearParams],
    config: datatypes.SolverConfig,
    b_path: datatypes.BPath,
    b_seed: int,
    setting_seed: int,
    label: str,
    j: Optional[int] = None,
    path: int = 0,
    verbose: bool = False,
) -> datatypes.SettingResult:
    start = time.time()
    solutions, failures = solver.run_repetitions(problem, config, b_path, setting_seed)
    result = datatypes.SettingResult(
        label=label,
        solver=config,
        path=path,
        seed=setting_seed,
        b_seed=b_seed,
        solutions=solutions,
        failures=failures,
        j=j,
    )
    if solutions:
        result.stats = analytics.empirical_stats([s.y0 for s in solutions])
    if linear is not None:
        result.oracle_y0 = np.atleast_1d(
            analytics.explicit_linear_y(0.0, problem.x0[0], b_path, linear)
        )
        for s in solutions:
            batch = forward.replay_paths(problem, config, s.w_seed)  # type: ignore
            result.errors.append(analytics.error_vs_oracle(s, batch, b_path, linear))
    result.runtime = time.time() - start
    print(f"setting {label} (N={config.steps}, M={config.samples}, delta={config.delta:g}) took {result.runtime:.2f} seconds")
    report_diagnostics(problem, result, verbose)
    return result


def report_diagnostics(
    problem: datatypes.Problem, result: datatypes.SettingResult, verbose: bool = False
):
    for failure in result.failures:
        print(f"ERROR: setting {result.label} repetition {failure.index} failed: {failure.message}")
    solutions = result.solutions
    if not solutions:
        return

    clamped = sum(s.clamped for s in solutions)
    if clamped > 0:
        print(
            f"WARNING: {clamped} simulated states of setting {result.label} were outside"
            f" the regression domain and were clamped into the boundary cells"
        )
    log_clamped = sum(s.log_clamped for s in solutions)
    if log_clamped > 0:
        print(
            f"WARNING: {log_clamped} simulated states of setting {result.label} were clamped"
            f" into {problem.log_domain} before taking log(x)"
        )
    collapsed = sum(s.collapsed for s in solutions)
    if collapsed > 0:
        print(
            f"WARNING: cell edge {result.solver.delta:g} covers the whole domain span in"
            f" {collapsed} of {len(solutions)} repetitions of setting {result.label},"
            f" regression collapses to a single cell along that axis"
        )
    starved = sorted(set().union(*(s.starved_steps for s in solutions)))
    if starved:
        print(
            f"WARNING: more than half of the cells between the extreme samples are empty"
            f" at steps {starved} of setting {result.label}"
        )

    if verbose:
        first = solutions[0]
        for n in range(first.grid.steps):
            residuals = " ".join(f"{r:.3e}" for r in first.picard_residuals[n])
            field = first.y_fields[n]
            occupancy = ""
            if isinstance(field, datatypes.PiecewiseField):
                stats = regression.occupancy_stats(field)
                occupancy = (
                    f", {stats['occupied']}/{stats['cells']} cells occupied"
                    f" ({stats['min_occupancy']}..{stats['max_occupancy']} samples)"
                )
            print(f"  n={n}: picard residuals {residuals}{occupancy}")


# ============================================================================
# Tables
# ============================================================================


def setting_columns(result: datatypes.SettingResult) -> Dict[str, Any]:
    s = result.solver
    return {
        "setting": result.label,
        "path": result.path,
        "j": result.j if result.j is not None else "",
        "N": s.steps,
        "M": s.samples,
        "delta": s.delta,
    }


def y0_frame(results: List[datatypes.SettingResult], k: int) -> DataFrame:
    rows = []
    for result in results:
        for s in result.solutions:
            row = setting_columns(result)
            row.update({"repetition": s.repetition, "w_seed": s.w_seed})
            row.update(zip(utils.component_columns("y0", k), s.y0.tolist()))
            row.update({"clamped": s.clamped, "log_clamped": s.log_clamped})
            rows.append(row)
    return pd.DataFrame(rows)


def stats_frame(results: List[datatypes.SettingResult], k: int) -> DataFrame:
    rows = []
    for result in results:
        row = setting_columns(result)
        row.update(
            {
                "I": result.solver.picard,
                "reps": len(result.solutions),
                "failures": len(result.failures),
            }
        )
        if result.stats is not None:
            row.update(analytics.stats_row(result.stats, k))
        else:
            row.update(dict.fromkeys(utils.component_columns("y0_mean", k), np.nan))
            row.update(dict.fromkeys(utils.component_columns("y0_std", k), np.nan))
        oracle = (
            result.oracle_y0 if result.oracle_y0 is not None else np.full(k, np.nan)
        )
        row.update(zip(utils.component_columns("oracle_y0", k), oracle.tolist()))
        rel_err = np.nan
        if result.stats is not None and result.oracle_y0 is not None:
            rel_err = analytics.relative_error(result.stats.mean[0], result.oracle_y0[0])
        row["rel_err"] = rel_err
        rows.append(row)
    return pd.DataFrame(rows)


def errors_frame(results: List[datatypes.SettingResult]) -> DataFrame:
    rows = []
    for result in results:
        if not result.errors:
            continue
        row = setting_columns(result)
        row.update(
            {
                "h": result.solutions[0].grid.h,
                "reps": len(result.errors),
                "y_error": float(np.mean([e.y_error for e in result.errors])),
                "z_error": float(np.mean([e.z_error for e in result.errors])),
                "error": float(np.mean([e.total for e in result.errors])),
            }
        )
        rows.append(row)
    return pd.DataFrame(rows)


def slice_stats(
    result: datatypes.SettingResult, n: int
) -> Tuple[np.ndarray, np.ndarray]:
    stats = analytics.empirical_stats([s.slice_means[n] for s in result.solutions])
    return stats.mean, stats.std


def slices_frame(
    config: datatypes.ExperimentConfig, results: List[datatypes.SettingResult], k: int
) -> DataFrame:
    rows = []
    for result in results:
        if not result.solutions:
            continue
        grid = result.solutions[0].grid
        for n in config.slice_steps(grid.steps):
            mean, std = slice_stats(result, n)
            row = {"setting": result.label, "n": n, "t": grid.time(n)}
            row.update(zip(utils.component_columns("y_mean", k), mean.tolist()))
            row.update(zip(utils.component_columns("y_std", k), std.tolist()))
            rows.append(row)
    return pd.DataFrame(rows)


def fields_frame(
    config: datatypes.ExperimentConfig, result: datatypes.SettingResult
) -> Optional[DataFrame]:
    """Fields of the first solved repetition at the requested slices."""
    if not result.solutions:
        return None
    first = result.solutions[0]
    frames = []
    for n in config.slice_steps(first.grid.steps):
        y_field, z_field = first.y_fields[n], first.z_fields[n]
        if not isinstance(y_field, datatypes.PiecewiseField) or not isinstance(
            z_field, datatypes.PiecewiseField
        ):
            continue
        df = regression.field_frame(y_field, n, "y")
        z = regression.field_frame(z_field, n, "z")
        z_columns = [c for c in z.columns if c == "z" or c.startswith("z_")]
        frames.append(pd.concat([df, z[z_columns]], axis=1))
    if not frames:
        return None
    return pd.concat(frames, ignore_index=True)


def compare_frame(
    config: datatypes.ExperimentConfig,
    pairs: List[Tuple[datatypes.SettingResult, datatypes.SettingResult]],
    k: int,
) -> DataFrame:
    """One block of slices per planned setting, latest slice first."""
    rows = []
    for bsde, bdsde in pairs:
        if not bsde.solutions or not bdsde.solutions:
            continue
        grid = bdsde.solutions[0].grid
        for n in sorted(config.slice_steps(grid.steps), reverse=True):
            row: Dict[str, Any] = setting_columns(bdsde)
            row["setting"] = bdsde.label.split("_", 1)[1]
            row.update({"n": n, "t": grid.time(n)})
            for name, result in (("bsde", bsde), ("bdsde", bdsde)):
                mean, std = slice_stats(result, n)
                row.update(zip(utils.component_columns(f"{name}_mean", k), mean.tolist()))
                row.update(zip(utils.component_columns(f"{name}_std", k), std.tolist()))
            rows.append(row)
    return pd.DataFrame(rows)


# ============================================================================
# Artifacts
# ============================================================================


def manifest_dict(
    command: str,
    config: datatypes.ExperimentConfig,
    problem: datatypes.Problem,
    results: List[datatypes.SettingResult],
    extra: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    settings = []
    for result in results:
        entry: Dict[str, Any] = {
            "label": result.label,
            "j": result.j,
            "path": result.path,
            "steps": result.solver.steps,
            "samples": result.solver.samples,
            "delta": result.solver.delta,
            "seed": result.seed,
            "b_seed": result.b_seed,
            "w_seeds": [s.w_seed for s in result.solutions],
            "failures": [
                {"repetition": f.index, "w_seed": f.w_seed, "message": f.message}
                for f in result.failures
            ],
            "clamped": int(sum(s.clamped for s in result.solutions)),
            "log_clamped": int(sum(s.log_clamped for s in result.solutions)),
        }
        if result.solutions:
            first = result.solutions[0]
            entry["picard_residuals"] = first.picard_residuals.tolist()
            entry["occupancy"] = [
                regression.occupancy_stats(field)
                for field in first.y_fields[:-1]
                if isinstance(field, datatypes.PiecewiseField)
            ]
        settings.append(entry)
    manifest = {
        "bdsde_version": __version__,
        "schema": utils.CSV_SCHEMA_VERSION,
        "revision": utils.git_revision(),
        "command": command,
        "config": config.to_dict(),
        "problem": {
            "name": problem.name,
            "d": problem.d,
            "k": problem.k,
            "l": problem.l,
            "alpha": problem.alpha,
            "conforming": problem.conforming,
            "log_domain": None if problem.log_domain is None else list(problem.log_domain),
        },
        "settings": settings,
    }
    manifest.update(extra or {})
    return manifest


def write_outputs(
    command: str,
    config: datatypes.ExperimentConfig,
    problem: datatypes.Problem,
    results: List[datatypes.SettingResult],
    tables: Dict[str, DataFrame],
    extra: Optional[Dict[str, Any]] = None,
):
    output_dir = config.output_dir
    os.makedirs(output_dir, exist_ok=True)
    for name, df in tables.items():
        utils.write_csv(df, os.path.join(output_dir, f"{name}.csv"))
    for result in results:
        df = fields_frame(config, result)
        if df is not None:
            utils.write_csv(df, os.path.join(output_dir, f"fields_{result.label}.csv"))
    with open(os.path.join(output_dir, "manifest.json"), "w") as f:
        json.dump(manifest_dict(command, config, problem, results, extra), f, indent=2)
        f.write("\n")

    failures = [(r.label, f) for r in results for f in r.failures]
    log_file = os.path.join(output_dir, "errors.log")
    if failures:
        with open(log_file, "w") as f:
            for label, failure in failures:
                f.write(
                    f"setting {label} repetition {failure.index} (w_seed {failure.w_seed}): {failure.message}\n"
                )
    elif os.path.exists(log_file):
        os.remove(log_file)
    print(f"Wrote {len(tables)} tables and manifest.json to {output_dir}")


def print_summary(df: DataFrame):
    if df.empty:
        return
    print("\n" + tabulate(df, headers="keys", showindex=False, floatfmt=".4f") + "\n")


# ============================================================================
# Commands
# ============================================================================


def draw_b_paths(
    config: datatypes.ExperimentConfig,
    problem: datatypes.Problem,
    settings: List[Setting],
) -> Tuple[datatypes.TimeGrid, List[int], List[datatypes.BPath]]:
    """B paths on the finest grid of the plan; each setting coarsens its own."""
    fine = paths.finest_grid(problem.horizon, [s.steps for _, _, _, s in settings])
    path_count = (
        config.ensemble_paths if config.mode == datatypes.RunMode.ensemble else 1
    )
    b_seeds = [utils.derive_seed(config.seed, datatypes.Stream.b, b) for b in range(path_count)]
    b_paths = [paths.sample_b_path(seed, fine, problem.l) for seed in b_seeds]
    print(
        f"Running {len(settings)} setting(s) of {problem.name} on {path_count} B path(s),"
        f" fine grid N={fine.steps}"
    )
    return fine, b_seeds, b_paths


def run_experiment(config: datatypes.ExperimentConfig, verbose: bool = False) -> int:
    """
    Run every setting of the config (one, a refinement schedule, or an
    ensemble of B paths times step counts) and write its artifacts.

    :return:    Exit status, 1 if any repetition failed.
    """
    problem = problems.problem_by_name(config.problem, config.params)
    config.validate_against(problem.d)
    linear = problems.linear_params(config.problem, config.params)
    settings = plan_settings(config)
    fine, b_seeds, b_paths = draw_b_paths(config, problem, settings)

    results = []
    for index, (label, j, path, solver_config) in enumerate(settings):
        setting_seed = utils.derive_seed(config.seed, datatypes.Stream.w, index)
        results.append(
            run_setting(
                problem,
                linear,
                solver_config,
                b_paths[path],
                b_seeds[path],
                setting_seed,
                label,
                j,
                path,
                verbose,
            )
        )

    k = problem.k
    stats = stats_frame(results, k)
    tables = {
        "y0": y0_frame(results, k),
        "stats": stats,
        "slices": slices_frame(config, results, k),
    }
    extra: Dict[str, Any] = {"b_seeds": b_seeds, "fine_steps": fine.steps}
    if linear is not None:
        errors = errors_frame(results)
        tables["errors"] = errors
        if config.mode == datatypes.RunMode.schedule and len(errors) >= 2:
            try:
                slope = analytics.convergence_slope(errors["h"], errors["error"])
                extra["convergence_slope"] = slope
                print(f"Convergence slope of the error against h: {slope:.3f}")
            except ValueError as e:
                print(f"WARNING: no convergence slope: {e}")

    write_outputs("run", config, problem, results, tables, extra)
    print_summary(stats)
    return 1 if any(r.failures for r in results) else 0


def compare_bsde(config: datatypes.ExperimentConfig, verbose: bool = False) -> int:
    """
    Solve a finance problem twice per planned setting on the same seeds, once
    as configured and once with g = 0, and write the two sets of slice
    statistics side by side. Settings are labelled bsde_<setting> and
    bdsde_<setting>.
    """
    if not config.problem.startswith("finance-"):
        raise datatypes.ConfigError(
            [f"problem.name: compare-bsde needs a finance problem, got {config.problem}"]
        )
    problem = problems.problem_by_name(config.problem, config.params)
    config.validate_against(problem.d)
    variants = (("bsde", problems.without_noise(problem)), ("bdsde", problem))
    settings = plan_settings(config)
    fine, b_seeds, b_paths = draw_b_paths(config, problem, settings)

    results = []
    pairs: List[Tuple[datatypes.SettingResult, datatypes.SettingResult]] = []
    for index, (label, j, path, solver_config) in enumerate(settings):
        setting_seed = utils.derive_seed(config.seed, datatypes.Stream.w, index)
        bsde, bdsde = [
            run_setting(
                variant,
                None,
                solver_config,
                b_paths[path],
                b_seeds[path],
                setting_seed,
                f"{name}_{label}",
                j,
                path,
                verbose,
            )
            for name, variant in variants
        ]
        results.extend([bsde, bdsde])
        pairs.append((bsde, bdsde))

    k = problem.k
    stats = stats_frame(results, k)
    tables = {
        "y0": y0_frame(results, k),
        "stats": stats,
        "slices": slices_frame(config, results, k),
        "compare": compare_frame(config, pairs, k),
    }
    extra: Dict[str, Any] = {"b_seeds": b_seeds, "fine_steps": fine.steps}
    write_outputs("compare-bsde", config, problem, results, tables, extra)
    print_summary(tables["compare"])
    return 1 if any(r.failures for r in results) else 0


def replay(
    manifest_file: str,
    output_dir: Optional[str] = None,
    threads: Optional[int] = None,
    verbose: bool = False,
) -> int:
    """Re-run the command recorded in a manifest with the same config and seeds."""
    with open(manifest_file) as f:
        manifest = json.load(f)
    if manifest.get("schema") != utils.CSV_SCHEMA_VERSION:
        print(
            f"WARNING: manifest schema {manifest.get('schema')} differs from"
            f" {utils.CSV_SCHEMA_VERSION}, outputs may not match"
        )
    if manifest.get("revision") != utils.git_revision():
        print(f"WARNING: manifest was written at revision {manifest.get('revision')}")
    data = manifest["config"]
    if output_dir is not None:
        data = datatypes.merge_dicts(data, {"output_dir": output_dir})
    if threads is not None:
        data = datatypes.merge_dicts(data, {"solver": {"workers": threads}})
    config = datatypes.ExperimentConfig.from_dict(data)
    if manifest.get("command") == "compare-bsde":
        return compare_bsde(config, verbose)
    return run_experiment(config, verbose)


def build_config(
    args: argparse.Namespace, mode: Optional[datatypes.RunMode] = None
) -> datatypes.ExperimentConfig:
    """Defaults < preset < --config file < command line flags."""
    data = datatypes.ExperimentConfig.load_dict(args.config, args.preset)
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.threads is not None:
        overrides["solver"] = {"workers": args.threads}
    if args.j_max is not None:
        overrides["schedule"] = {"j_max": args.j_max}
    if mode is not None:
        overrides["mode"] = mode.value
    return datatypes.ExperimentConfig.from_dict(datatypes.merge_dicts(data, overrides))


def main(argv: Optional[List[str]] = None):
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="YAML experiment file")
    common.add_argument(
        "--preset",
        type=str,
        default=None,
        help="Bundled experiment preset, applied before --config",
    )
    common.add_argument("--seed", type=int, default=None, help="Master seed")
    common.add_argument("--out", type=str, default=None, help="Output directory")
    common.add_argument(
        "--threads", type=int, default=None, help="Worker processes for repetitions"
    )
    common.add_argument(
        "--j-max", dest="j_max", type=int, default=None, help="Last schedule index"
    )
    common.add_argument("-v", "--verbose", action="store_true", default=False)

    args_parser = argparse.ArgumentParser(prog="bdsde")
    args_parser.add_argument("--version", action="version", version=__version__)
    commands = args_parser.add_subparsers(dest="command", required=True)
    commands.add_parser("run", parents=[common], help="Run the configured experiment")
    commands.add_parser(
        "schedule", parents=[common], help="Run the refinement schedule j = 1..j_max"
    )
    commands.add_parser(
        "compare-bsde",
        parents=[common],
        help="Solve a finance problem with and without the B noise",
    )
    replay_parser = commands.add_parser("replay", help="Re-run the run recorded in a manifest")
    replay_parser.add_argument("manifest", type=str, help="manifest.json of an earlier run")
    replay_parser.add_argument("--out", type=str, default=None, help="Output directory")
    replay_parser.add_argument("--threads", type=int, default=None)
    replay_parser.add_argument("-v", "--verbose", action="store_true", default=False)
    args = args_parser.parse_args(argv)

    try:
        if args.command == "replay":
            status = replay(args.manifest, args.out, args.threads, args.verbose)
        elif args.command == "compare-bsde":
            status = compare_bsde(build_config(args), args.verbose)
        elif args.command == "schedule":
            status = run_experiment(
                build_config(args, datatypes.RunMode.schedule), args.verbose
            )
        else:
            status = run_experiment(build_config(args), args.verbose)
    except datatypes.ConfigError as e:
        for message in e.messages:
            print(f"ERROR: {message}")
        status = 1
    except (OSError, yaml.YAMLError, json.JSONDecodeError) as e:
        print(f"ERROR: {e}")
        status = 1
    sys.exit(status)


if __name__ == "__main__":
    main()
