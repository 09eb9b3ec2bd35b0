from dataclasses import dataclass
import math
from typing import List, Sequence

import numpy as np

from . import datatypes
from . import utils


def _check_linear(p: datatypes.LinearParams):
    if not isinstance(p, datatypes.LinearParams):
        raise ValueError(
            f"closed-form solution only exists for the linear problem, got {type(p).__name__}"
        )


def _multiplier(t: float, b_path: datatypes.BPath, n: int, p: datatypes.LinearParams):
    tau = p.horizon - t
    return math.exp(
        p.a0 * tau + p.b0 * float(b_path.remaining(n)[0]) - 0.5 * p.b0**2 * tau
    )


def _step_of(t_n: float, b_path: datatypes.BPath) -> int:
    n = int(round(t_n / b_path.grid.h))
    if not math.isclose(b_path.grid.time(n), t_n, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"t={t_n} is not a node of the B path grid (h={b_path.grid.h})")
    return n


def explicit_linear_y(
    t_n: float, x: np.ndarray, b_path: datatypes.BPath, p: datatypes.LinearParams
) -> np.ndarray:
    """
    Solution of the linear problem conditional on B:
    u(t, x) = exp(a0 (T-t) + b0 (B_T - B_t) - b0^2 (T-t) / 2) (K - x exp(mu (T-t))).

    :param t_n:         A node of b_path's grid.
    :param x:           Scalar or array of states.
    :param b_path:      Supplies B_T - B_t.
    :param p:           Linear problem parameters.
    :return:            Values with the shape of x.
    """
    _check_linear(p)
    n = _step_of(t_n, b_path)
    tau = p.horizon - t_n
    x = np.asarray(x, dtype=float)
    return _multiplier(t_n, b_path, n, p) * (p.strike - x * math.exp(p.mu * tau))


def explicit_linear_z(
    t_n: float, x: np.ndarray, b_path: datatypes.BPath, p: datatypes.LinearParams
) -> np.ndarray:
    """Gradient of explicit_linear_y in x times sigma(x) = sigma x."""
    _check_linear(p)
    n = _step_of(t_n, b_path)
    tau = p.horizon - t_n
    x = np.asarray(x, dtype=float)
    return -p.sigma * x * math.exp(p.mu * tau) * _multiplier(t_n, b_path, n, p)


@dataclass(frozen=True, eq=False)
class OracleField:
    """The closed-form y (or z) at time t_n, usable wherever a fitted field is."""

    t_n: float
    b_path: datatypes.BPath
    params: datatypes.LinearParams
    gradient: bool = False

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(points)[:, 0]
        if self.gradient:
            return explicit_linear_z(self.t_n, x, self.b_path, self.params)[:, None, None]
        return explicit_linear_y(self.t_n, x, self.b_path, self.params)[:, None]


def oracle_solution(
    batch: datatypes.PathBatch, b_path: datatypes.BPath, p: datatypes.LinearParams
) -> datatypes.BackwardSolution:
    """A BackwardSolution whose fields are the exact linear solution."""
    _check_linear(p)
    grid = batch.grid
    y_fields: List[datatypes.Field] = []
    z_fields: List[datatypes.Field] = []
    slice_means = np.empty((grid.steps + 1, 1))
    for n in range(grid.steps + 1):
        t_n = grid.time(n)
        y_fields.append(OracleField(t_n, b_path, p))
        z_fields.append(OracleField(t_n, b_path, p, gradient=True))
        slice_means[n] = y_fields[n].evaluate(batch.at(n)).mean(axis=0)
    return datatypes.BackwardSolution(
        grid=grid,
        y_fields=y_fields,
        z_fields=z_fields,
        y0=y_fields[0].evaluate(np.array([[p.x0]]))[0],
        picard_residuals=np.zeros((grid.steps, 0)),
        slice_means=slice_means,
    )


def empirical_stats(values: Sequence[np.ndarray]) -> datatypes.RunStats:
    """
    Mean and standard deviation with the (count - 1) divisor over repetitions.
    A single value has an undefined std, reported as nan.
    """
    if len(values) == 0:
        raise ValueError("cannot take statistics of zero repetitions")
    stacked = np.array([np.atleast_1d(v) for v in values], dtype=float)
    count = stacked.shape[0]
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0, ddof=1) if count > 1 else np.full_like(mean, np.nan)
    return datatypes.RunStats(mean=mean, std=std, count=count, values=stacked)


def error_vs_oracle(
    solution: datatypes.BackwardSolution,
    batch: datatypes.PathBatch,
    b_path: datatypes.BPath,
    p: datatypes.LinearParams,
) -> datatypes.ErrorReport:
    """
    Monte Carlo estimate of max_n E|Y_n - y_n(X_n)|^2 plus
    h sum_n E|Z_n - z_n(X_n)|^2 for n = 0..N-1, against the closed form along
    the simulated states. At n = N both sides are Phi(X_N).
    """
    _check_linear(p)
    grid = solution.grid
    if grid.steps != batch.grid.steps or not grid.same_horizon(batch.grid):
        raise ValueError(
            f"solution grid N={grid.steps} does not match batch grid N={batch.grid.steps}"
        )
    if not b_path.grid.same_horizon(grid) or b_path.grid.steps % grid.steps != 0:
        raise ValueError(f"B path grid N={b_path.grid.steps} does not refine N={grid.steps}")
    y_errors = np.empty(grid.steps)
    z_errors = np.empty(grid.steps)
    for n in range(grid.steps):
        t_n = grid.time(n)
        x = batch.at(n)
        y_exact = explicit_linear_y(t_n, x[:, 0], b_path, p)
        z_exact = explicit_linear_z(t_n, x[:, 0], b_path, p)
        y_fit = solution.y_fields[n].evaluate(x).reshape(batch.samples)
        z_fit = solution.z_fields[n].evaluate(x).reshape(batch.samples)
        y_errors[n] = np.mean((y_exact - y_fit) ** 2)
        z_errors[n] = np.mean((z_exact - z_fit) ** 2)
    return datatypes.ErrorReport(
        y_error=float(y_errors.max()), z_error=float(grid.h * z_errors.sum())
    )


def _nearest(value: float) -> int:
    return int(math.floor(value + 0.5))


def schedule(
    j_max: int, alpha_m: float = 3.0, beta: float = 1.0, delta_base: float = 50.0
) -> List[datatypes.ScheduleEntry]:
    """
    Refinement schedule for convergence studies, j = 1..j_max:
    N = 2 sqrt(2)^(j-1), M = 2 sqrt(2)^(alpha_m (j-1)),
    delta = delta_base / sqrt(2)^((j-1)(beta+1)/2), counts rounded to nearest.
    """
    if j_max < 1:
        raise ValueError(f"j_max must be >= 1, got {j_max}")
    entries = []
    for j in range(1, j_max + 1):
        root = math.sqrt(2.0) ** (j - 1)
        entries.append(
            datatypes.ScheduleEntry(
                j=j,
                steps=max(2, _nearest(2 * root)),
                samples=max(1, _nearest(2 * root**alpha_m)),
                delta=delta_base / root ** ((beta + 1) / 2),
            )
        )
    return entries


def convergence_slope(hs: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(h)."""
    hs = np.asarray(hs, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if hs.shape != errors.shape or hs.size < 2:
        raise ValueError(f"need at least two (h, error) pairs, got {hs.size} and {errors.size}")
    if np.any(hs <= 0) or np.any(errors <= 0):
        raise ValueError("step sizes and errors must be positive for a log-log fit")
    slope, _ = np.polyfit(np.log(hs), np.log(errors), 1)
    return float(slope)


def relative_error(estimate: float, reference: float) -> float:
    if reference == 0:
        raise ValueError("relative error against a zero reference")
    return abs(float(estimate) - float(reference)) / abs(float(reference))


def stats_row(stats: datatypes.RunStats, k: int) -> dict:
    row = {}
    row.update(zip(utils.component_columns("y0_mean", k), stats.mean.tolist()))
    row.update(zip(utils.component_columns("y0_std", k), stats.std.tolist()))
    return row
