from typing import Optional

import numpy as np

from . import datatypes
from . import paths


def simulate_forward(
    problem: datatypes.Problem,
    w: datatypes.WBatch,
    x0: Optional[np.ndarray] = None,
) -> datatypes.PathBatch:
    """
    Euler scheme X_{n+1} = X_n + b(X_n) h + sigma(X_n) dW_n for all M samples
    at once. States are kept for every n since the backward pass regresses on
    each time slice.

    :param problem:     Supplies b, sigma and the default starting point.
    :param w:           Increments driving the samples.
    :param x0:          Starting point; problem.x0 if omitted.
    :return:            PathBatch with states of shape (M, N + 1, d).
    """
    x0 = problem.x0 if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (problem.d,):
        raise ValueError(f"x0 has shape {x0.shape}, expected ({problem.d},)")
    if w.dim != problem.d:
        raise ValueError(f"W has dimension {w.dim}, problem {problem.name} needs {problem.d}")

    grid = w.grid
    h = grid.h
    states = np.empty((w.samples, grid.steps + 1, problem.d))
    states[:, 0, :] = x0
    for n in range(grid.steps):
        x = states[:, n, :]
        step = problem.drift(x) * h + np.einsum(
            "mij,mj->mi", problem.diffusion(x), w.increments[:, n, :]
        )
        states[:, n + 1, :] = x + step
        bad = ~np.isfinite(states[:, n + 1, :]).all(axis=1)
        if bad.any():
            raise datatypes.NonFiniteError("forward state", n + 1, int(np.argmax(bad)))
    return datatypes.PathBatch(grid=grid, states=states, w=w)


def replay_paths(
    problem: datatypes.Problem, config: datatypes.SolverConfig, w_seed: int
) -> datatypes.PathBatch:
    """Regenerate the batch a repetition was solved on from its recorded W seed."""
    grid = paths.make_grid(problem.horizon, config.steps)
    w = paths.sample_w_batch(w_seed, grid, problem.d, config.samples)
    return simulate_forward(problem, w)
