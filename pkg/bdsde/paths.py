import math
from typing import Iterable

import numpy as np

from . import datatypes


def make_grid(horizon: float, steps: int) -> datatypes.TimeGrid:
    """
    Equidistant partition of [0, horizon] into 'steps' intervals.

    :param horizon:     Terminal time T > 0.
    :param steps:       Number of intervals N >= 1.
    :return:            The grid, with h = T / N.
    """
    return datatypes.TimeGrid(horizon=float(horizon), steps=int(steps))


def finest_grid(horizon: float, steps: Iterable[int]) -> datatypes.TimeGrid:
    """
    Smallest grid that every grid of the given step counts is a coarsening of,
    i.e. N = lcm(steps). One B path drawn on it serves every N of a schedule.
    """
    return make_grid(horizon, math.lcm(*[int(n) for n in steps]))


def sample_b_path(seed: int, grid_fine: datatypes.TimeGrid, l: int) -> datatypes.BPath:
    """
    Draw one l-dimensional Brownian path on 'grid_fine'. Increments are drawn
    step-major, then by component, and accumulated into node values.

    :param seed:        Seed of the B stream; equal seeds give identical paths.
    :param grid_fine:   Finest grid of the experiment.
    :param l:           Dimension of B.
    :return:            The path as node values B_{t_n}, n = 0..N.
    """
    rng = np.random.default_rng(seed)
    increments = rng.normal(0.0, math.sqrt(grid_fine.h), size=(grid_fine.steps, l))
    values = np.zeros((grid_fine.steps + 1, l))
    np.cumsum(increments, axis=0, out=values[1:])
    return datatypes.BPath(grid=grid_fine, values=values)


def coarsen_b_path(
    path: datatypes.BPath, coarse: datatypes.TimeGrid
) -> datatypes.BPath:
    """
    Restrict a path to a coarser grid by keeping every r-th node, so that each
    coarse increment is the sum of the fine increments it covers and B_T is
    unchanged.
    """
    fine = path.grid
    if not fine.same_horizon(coarse):
        raise ValueError(
            f"cannot coarsen a path on [0, {fine.horizon}] to [0, {coarse.horizon}]"
        )
    if fine.steps % coarse.steps != 0:
        raise ValueError(
            f"coarse grid N={coarse.steps} does not divide fine grid N={fine.steps}"
        )
    ratio = fine.steps // coarse.steps
    if ratio == 1:
        return path
    return datatypes.BPath(grid=coarse, values=path.values[::ratio].copy())


def sample_w_batch(
    seed: int, grid: datatypes.TimeGrid, d: int, samples: int
) -> datatypes.WBatch:
    """
    Draw M independent d-dimensional W increment paths on 'grid'. The stream
    order is sample-major, then step, then component.
    """
    if samples < 1:
        raise ValueError(f"need at least one sample, got {samples}")
    rng = np.random.default_rng(seed)
    increments = rng.normal(0.0, math.sqrt(grid.h), size=(samples, grid.steps, d))
    return datatypes.WBatch(grid=grid, increments=increments)
