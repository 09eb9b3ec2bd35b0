import argparse
from concurrent.futures import ProcessPoolExecutor
from functools import partial
import json
from os import makedirs, path
import subprocess
import sys
import time
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd
from tabulate import tabulate
import yaml

from bdsde.utils import git_revision


def read_table(out_folder: str, table: str) -> Optional[pd.DataFrame]:
    filename = path.join(out_folder, f"{table}.csv")
    if not path.exists(filename):
        return None
    return pd.read_csv(filename, comment="#")


def read_manifest(out_folder: str) -> Dict[str, Any]:
    with open(path.join(out_folder, "manifest.json")) as f:
        return json.load(f)


def check_value(check: Dict[str, Any], values: List[float]) -> Tuple[bool, str]:
    """Every value must lie within the check's optional min and max."""
    ok = True
    lo = check.get("min")
    hi = check.get("max")
    if lo is not None and any(not v >= lo for v in values):
        ok = False
    if hi is not None and any(not v <= hi for v in values):
        ok = False
    shown = ", ".join(f"{v:.4g}" for v in values)
    return ok, shown


def run_checks(benchmark: Any, out_folder: str) -> List[Tuple[str, bool, str]]:
    results = []
    for check in benchmark.get("checks", []):
        if "manifest" in check:
            key = check["manifest"]
            manifest = read_manifest(out_folder)
            if key not in manifest:
                results.append((key, False, "missing"))
                continue
            ok, shown = check_value(check, [float(manifest[key])])
            results.append((key, ok, shown))
            continue
        name = f"{check['table']}.{check['column']}"
        df = read_table(out_folder, check["table"])
        if df is None or check["column"] not in df.columns:
            results.append((name, False, "missing"))
            continue
        ok, shown = check_value(check, df[check["column"]].astype(float).tolist())
        results.append((name, ok, shown))
    return results


def run_benchmark(
    benchmark: Any,
    output_folder: str,
    verbose: bool = False,
) -> Tuple[str, float, int, List[Tuple[str, bool, str]]]:
    out_folder = path.join(output_folder, benchmark["name"])
    makedirs(out_folder, exist_ok=True)

    args = [benchmark.get("command", "run"), "--out", out_folder]
    if "preset" in benchmark:
        args.extend(["--preset", benchmark["preset"]])
    if "config" in benchmark:
        config_file = path.join(out_folder, "benchmark.yml")
        with open(config_file, "w") as f:
            yaml.safe_dump(benchmark["config"], f)
        args.extend(["--config", config_file])

    start = time.time()
    res = subprocess.run(
        ["bdsde"] + args,
        stdout=subprocess.PIPE,
        stderr=subprocess.STDOUT,
        text=True,
    )
    runtime = time.time() - start

    if verbose:
        line = "-" * 80
        print(f"\n{line}\n{benchmark['name']}\n{line}\n\n{res.stdout}")
    else:
        print(".", end="", flush=True)
    with open(path.join(out_folder, "stdout"), "w") as f:
        f.write(res.stdout)

    if not path.exists(path.join(out_folder, "manifest.json")):
        return (benchmark["name"], runtime, res.returncode, [("run", False, "no output")])

    checks = run_checks(benchmark, out_folder)
    if "max_runtime" in benchmark:
        checks.append(
            (
                "runtime",
                runtime <= benchmark["max_runtime"],
                f"{runtime:.1f}s / {benchmark['max_runtime']}s",
            )
        )
    return (benchmark["name"], runtime, res.returncode, checks)


def run_comparisons(spec: Any, output_folder: str) -> List[Tuple[str, bool, str]]:
    results = []
    for comparison in spec.get("comparisons", []):
        values = []
        for side in ("smaller", "larger"):
            df = read_table(path.join(output_folder, comparison[side]), comparison["table"])
            if df is None or comparison["column"] not in df.columns:
                values.append(None)
            else:
                values.append(float(df[comparison["column"]].iloc[0]))
        if None in values:
            results.append((comparison["name"], False, "missing"))
            continue
        smaller, larger = values
        results.append((comparison["name"], smaller < larger, f"{smaller:.4g} < {larger:.4g}"))
    return results


def run_all_benchmarks(
    output_folder: str,
    benchmarks: list,
    spec: Any,
    verbose: bool = False,
):
    print(f"Running benchmarks at revision {git_revision()}", end="", flush=True)
    run_a_benchmark = partial(run_benchmark, output_folder=output_folder, verbose=verbose)
    with ProcessPoolExecutor() as executor:
        results = list(executor.map(run_a_benchmark, benchmarks))

    headers = ["Benchmark", "Time (s)", "Exit", "Check", "Value", "OK"]
    rows = []
    failed = []
    for name, runtime, returncode, checks in results:
        if returncode != 0:
            failed.append(f"{name} (exit {returncode})")
        for check, ok, shown in checks:
            rows.append((name, runtime, returncode, check, shown, "yes" if ok else "NO"))
            if not ok:
                failed.append(f"{name}: {check}")
    for check, ok, shown in run_comparisons(spec, output_folder):
        rows.append(("comparison", 0.0, 0, check, shown, "yes" if ok else "NO"))
        if not ok:
            failed.append(check)
    print("\n\n" + tabulate(rows, headers, floatfmt=".1f") + "\n")

    if failed:
        print(f"ERROR: failed checks: {', '.join(failed)}")
        sys.exit(1)
    print("All acceptance checks passed.")


if __name__ == "__main__":
    args_parser = argparse.ArgumentParser()
    args_parser.add_argument(
        "benchmarks_yaml",
        type=str,
        help="Benchmarks specification file",
    )
    args_parser.add_argument(
        "--run",
        type=str,
        default=None,
        help="Run a single benchmark instead of all benchmarks",
    )
    args_parser.add_argument(
        "--verbose",
        action="store_true",
        default=False,
        help="Print output of run on each benchmark",
    )
    args = args_parser.parse_args()

    with open(args.benchmarks_yaml) as f:
        spec = yaml.safe_load(f)
    output_folder = spec["output_folder"]
    benchmark_names = [b["name"] for b in spec["benchmarks"]]
    if len(set(benchmark_names)) != len(benchmark_names):
        print("ERROR: Found duplicate name in benchmarks YAML file")
        sys.exit(1)

    if args.run is not None:
        benchmark = next((b for b in spec["benchmarks"] if b["name"] == args.run), None)
        if benchmark is None:
            print(f"ERROR: could not find {args.run} in {args.benchmarks_yaml}")
            sys.exit(1)
        name, runtime, returncode, checks = run_benchmark(
            benchmark, output_folder, verbose=args.verbose
        )
        print(f"\nRan {name} in {runtime:.2f}s (exit {returncode}).")
        print(tabulate(checks, ["Check", "OK", "Value"]))
        if returncode != 0 or not all(ok for _, ok, _ in checks):
            sys.exit(1)
    else:
        run_all_benchmarks(
            output_folder, benchmarks=spec["benchmarks"], spec=spec, verbose=args.verbose
        )
