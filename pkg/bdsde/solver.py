from concurrent.futures import ProcessPoolExecutor
from typing import List, Optional, Tuple, Union

from more_itertools import partition
import numpy as np

from . import datatypes
from . import forward
from . import paths
from . import problems
from . import regression
from . import utils

# Values of y_{n+1} / z_{n+1} at X_{n+1}: either a fitted field or the values
# themselves (the terminal step uses Phi(X_N) pointwise).
NextSlice = Union[datatypes.Field, np.ndarray]

STARVATION_THRESHOLD = 0.5


def _values_at(next_slice: NextSlice, x: np.ndarray) -> np.ndarray:
    if isinstance(next_slice, np.ndarray):
        return next_slice
    return next_slice.evaluate(x)


def _noise_term(
    n: int,
    batch: datatypes.PathBatch,
    b_path: datatypes.BPath,
    y_next: np.ndarray,
    z_next: np.ndarray,
    problem: datatypes.Problem,
) -> np.ndarray:
    """g(t_{n+1}, X_{n+1}, y_{n+1}, z_{n+1}) dB_n, shape (M, k)."""
    g = problem.noise(batch.grid.time(n + 1), batch.at(n + 1), y_next, z_next)
    return g @ b_path.increments[n]


def regress_z(
    n: int,
    batch: datatypes.PathBatch,
    b_path: datatypes.BPath,
    next_y: NextSlice,
    next_z: NextSlice,
    problem: datatypes.Problem,
    basis: datatypes.HypercubeBasis,
    cells: Optional[np.ndarray] = None,
) -> datatypes.PiecewiseField:
    """
    Explicit Z step: project (y_{n+1} + g_{n+1} dB_n) dW_n / h on the cells of
    X_n. The result has k x d values per cell.
    """
    if not 0 <= n < batch.grid.steps:
        raise ValueError(f"Z step needs 0 <= n < {batch.grid.steps}, got {n}")
    x_next = batch.at(n + 1)
    y_next = _values_at(next_y, x_next)
    z_next = _values_at(next_z, x_next)
    carried = y_next + _noise_term(n, batch, b_path, y_next, z_next, problem)
    responses = carried[:, :, None] * (batch.w.increments[:, n, None, :] / batch.grid.h)
    regression.check_finite("Z response", n, responses)
    return regression.project(basis, batch.at(n), responses, cells=cells)


def picard_y(
    n: int,
    batch: datatypes.PathBatch,
    b_path: datatypes.BPath,
    next_y: NextSlice,
    next_z: NextSlice,
    z_n: datatypes.PiecewiseField,
    problem: datatypes.Problem,
    basis: datatypes.HypercubeBasis,
    iterations: int,
    cells: Optional[np.ndarray] = None,
) -> Tuple[datatypes.PiecewiseField, np.ndarray]:
    """
    Implicit Y step resolved by Picard iteration, starting from y = 0 and
    holding z_n fixed inside the driver.

    :param n:           Time step, 0 <= n < N.
    :param next_y:      y_{n+1} as field or as values at X_{n+1}.
    :param next_z:      z_{n+1} as field or as values at X_{n+1}.
    :param z_n:         Z field of this step, already regressed.
    :param iterations:  Number of Picard iterations I >= 1.
    :return:            The last iterate and the I sup-norm cell deltas
                        between successive iterates.
    """
    if iterations < 1:
        raise ValueError(f"need at least one Picard iteration, got {iterations}")
    if cells is None:
        cells = basis.locate_cells(batch.at(n))
    x_n = batch.at(n)
    x_next = batch.at(n + 1)
    y_next = _values_at(next_y, x_next)
    z_next = _values_at(next_z, x_next)
    carried = y_next + _noise_term(n, batch, b_path, y_next, z_next, problem)
    z_values = z_n.values[cells]
    t_n = batch.grid.time(n)
    h = batch.grid.h

    y_field = regression.zero_field(basis, (problem.k,))
    residuals = np.empty(iterations)
    for i in range(iterations):
        responses = carried + h * problem.driver(t_n, x_n, y_field.values[cells], z_values)
        regression.check_finite("Y iterate", n, responses)
        update = regression.project(basis, x_n, responses, cells=cells)
        residuals[i] = np.max(np.abs(update.values - y_field.values))
        y_field = update
    return y_field, residuals


def backward_solve(
    problem: datatypes.Problem,
    config: datatypes.SolverConfig,
    b_path: datatypes.BPath,
    w_batch: datatypes.WBatch,
    repetition: int = 0,
    w_seed: Optional[int] = None,
) -> datatypes.BackwardSolution:
    """
    Backward induction for one W batch and one fixed B path: simulate X, set
    y_N = Phi(X_N) pointwise and z_N = 0, then for n = N-1..0 regress z_n and
    iterate y_n. A B path on a finer grid is coarsened to the run grid.
    """
    grid = w_batch.grid
    if grid.steps != config.steps or not grid.same_horizon(
        paths.make_grid(problem.horizon, config.steps)
    ):
        raise ValueError(
            f"W batch grid (T={grid.horizon}, N={grid.steps}) does not match"
            f" T={problem.horizon}, N={config.steps}"
        )
    if b_path.dim != problem.l:
        raise ValueError(f"B path has dimension {b_path.dim}, problem {problem.name} needs {problem.l}")
    b_path = paths.coarsen_b_path(b_path, grid)

    batch = forward.simulate_forward(problem, w_batch)
    if config.domain == datatypes.DomainMode.data:
        basis = regression.data_basis(batch.states, config.delta, warn=False)
    else:
        basis = regression.build_basis(config.lower, config.upper, config.delta, warn=False)
    counter = datatypes.ClampCounter()
    cells = [basis.locate_cells(batch.at(n), counter) for n in range(grid.steps + 1)]

    N, k, d = grid.steps, problem.k, problem.d
    y_values = np.asarray(problem.terminal(batch.at(N)), dtype=float)
    regression.check_finite("terminal value", N, y_values)
    z_values = np.zeros((batch.samples, k, d))
    y_fields: List[datatypes.Field] = [None] * (N + 1)  # type: ignore
    z_fields: List[datatypes.Field] = [None] * (N + 1)  # type: ignore
    terminal = regression.project(basis, batch.at(N), y_values, cells=cells[N])
    y_fields[N] = datatypes.PiecewiseField(
        basis=basis, values=terminal.values, occupancy=terminal.occupancy, derived=True
    )
    z_fields[N] = regression.zero_field(basis, (k, d))

    slice_means = np.empty((N + 1, k))
    slice_means[N] = y_values.mean(axis=0)
    residuals = np.empty((N, config.picard))
    starved = []
    for n in reversed(range(N)):
        z_field = regress_z(n, batch, b_path, y_values, z_values, problem, basis, cells[n])
        y_field, residuals[n] = picard_y(
            n, batch, b_path, y_values, z_values, z_field, problem, basis, config.picard, cells[n]
        )
        y_fields[n], z_fields[n] = y_field, z_field
        y_values = y_field.values[cells[n]]
        z_values = z_field.values[cells[n]]
        slice_means[n] = y_values.mean(axis=0)
        if regression.reachable_empty_fraction(basis, cells[n]) > STARVATION_THRESHOLD:
            starved.append(n)

    y0 = y_fields[0].evaluate(problem.x0[None, :])[0]
    if not np.all(np.isfinite(y0)):
        raise datatypes.NonFiniteError("y0", 0, 0)
    return datatypes.BackwardSolution(
        grid=grid,
        y_fields=y_fields,
        z_fields=z_fields,
        y0=y0,
        picard_residuals=residuals,
        slice_means=slice_means,
        repetition=repetition,
        w_seed=w_seed,
        clamped=counter.count,
        log_clamped=problems.count_clamped(problem, batch.states[:, 1:, :].reshape(-1, d)),
        starved_steps=sorted(starved),
        collapsed=bool(np.any(basis.delta >= basis.upper - basis.lower)),
    )


def solve_repetition(
    problem: datatypes.Problem,
    config: datatypes.SolverConfig,
    b_path: datatypes.BPath,
    master_seed: int,
    repetition: int,
) -> Union[datatypes.BackwardSolution, datatypes.RepetitionFailure]:
    """Solve repetition r on the W stream derived from (master_seed, r)."""
    w_seed = utils.derive_seed(master_seed, datatypes.Stream.w, repetition)
    try:
        grid = paths.make_grid(problem.horizon, config.steps)
        w = paths.sample_w_batch(w_seed, grid, problem.d, config.samples)
        return backward_solve(problem, config, b_path, w, repetition, w_seed)
    except (ValueError, ArithmeticError) as e:
        return datatypes.RepetitionFailure(index=repetition, w_seed=w_seed, message=str(e))


def _solve_repetition_star(args) -> Union[datatypes.BackwardSolution, datatypes.RepetitionFailure]:
    return solve_repetition(*args)


def run_repetitions(
    problem: datatypes.Problem,
    config: datatypes.SolverConfig,
    b_path: datatypes.BPath,
    master_seed: int,
) -> Tuple[List[datatypes.BackwardSolution], List[datatypes.RepetitionFailure]]:
    """
    Solve config.repetitions independent W batches against the same B path.
    A failing repetition is reported and the others still run. Each result
    depends only on (master_seed, repetition), so the worker count never
    changes the output.

    Returns:
        (solutions, failures), both in repetition order.
    """
    jobs = [(problem, config, b_path, master_seed, r) for r in range(config.repetitions)]
    use_pool = config.workers > 1 and config.repetitions > 1
    if use_pool:
        with ProcessPoolExecutor(max_workers=config.workers) as executor:
            results = list(executor.map(_solve_repetition_star, jobs))
    else:
        results = [_solve_repetition_star(job) for job in jobs]
    solutions, failures = partition(
        lambda result: isinstance(result, datatypes.RepetitionFailure), results
    )
    return list(solutions), list(failures)
