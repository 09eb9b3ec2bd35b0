import math

import numpy as np
import pytest

from bdsde import datatypes
from bdsde import forward
from bdsde import paths
from bdsde import problems

SEED = 3
GBM_SAMPLES = 100_000
MEAN_BAND = 4.0
LINEARITY_TOL = 1e-12


def _forward_problem(drift, diffusion, d=1, x0=None):
    return problems.custom_problem(
        d=d,
        k=1,
        l=1,
        drift=drift,
        diffusion=diffusion,
        driver=lambda t, x, y, z: np.zeros_like(y),
        noise=lambda t, x, y, z: np.zeros((y.shape[0], 1, 1)),
        terminal=lambda x: np.zeros((x.shape[0], 1)),
        x0=np.ones(d) if x0 is None else x0,
        horizon=1.0,
    )


def test_constant_path_without_coefficients():
    problem = _forward_problem(
        lambda x: np.zeros_like(x), lambda x: np.zeros((x.shape[0], 1, 1)), x0=[2.5]
    )
    w = paths.sample_w_batch(SEED, paths.make_grid(1.0, 10), 1, 50)
    batch = forward.simulate_forward(problem, w)
    assert batch.states.shape == (50, 11, 1)
    assert np.all(batch.states == 2.5)


def test_one_deterministic_euler_step():
    problem = _forward_problem(lambda x: 0.05 * x, lambda x: np.zeros((x.shape[0], 1, 1)))
    w = paths.sample_w_batch(SEED, paths.make_grid(1.0, 1), 1, 4)
    batch = forward.simulate_forward(problem, w)
    np.testing.assert_allclose(batch.at(1), 1.05)
    np.testing.assert_array_equal(batch.at(0), 1.0)


def test_gbm_terminal_mean():
    problem = problems.linear_problem(datatypes.LinearParams())
    w = paths.sample_w_batch(SEED, paths.make_grid(0.25, 20), 1, GBM_SAMPLES)
    terminal = forward.simulate_forward(problem, w).at(20)[:, 0]
    standard_error = terminal.std(ddof=1) / math.sqrt(GBM_SAMPLES)
    assert abs(terminal.mean() - 100 * math.exp(0.0125)) <= MEAN_BAND * standard_error


def test_constant_diffusion_sums_increments():
    s = np.array([[0.3, -0.1], [0.2, 0.5]])
    problem = _forward_problem(
        lambda x: np.zeros_like(x),
        lambda x: np.broadcast_to(s, (x.shape[0], 2, 2)),
        d=2,
        x0=[1.0, -1.0],
    )
    w = paths.sample_w_batch(SEED, paths.make_grid(1.0, 16), 2, 100)
    batch = forward.simulate_forward(problem, w)
    expected = w.increments.sum(axis=1) @ s.T
    np.testing.assert_allclose(batch.at(16) - problem.x0, expected, rtol=0, atol=LINEARITY_TOL)


def test_simulation_is_deterministic():
    problem = problems.linear_problem(datatypes.LinearParams())
    w = paths.sample_w_batch(SEED, paths.make_grid(0.25, 20), 1, 100)
    first = forward.simulate_forward(problem, w)
    second = forward.simulate_forward(problem, w)
    np.testing.assert_array_equal(first.states, second.states)


def test_non_finite_state_names_step_and_sample():
    def drift(x):
        out = np.zeros_like(x)
        out[x[:, 0] > 1.5] = np.inf
        return out

    problem = datatypes.Problem(
        name="explodes",
        d=1,
        k=1,
        l=1,
        drift=drift,
        diffusion=lambda x: np.ones((x.shape[0], 1, 1)),
        driver=lambda t, x, y, z: np.zeros_like(y),
        noise=lambda t, x, y, z: np.zeros((y.shape[0], 1, 1)),
        terminal=lambda x: np.zeros((x.shape[0], 1)),
        x0=np.array([1.0]),
        horizon=1.0,
    )
    grid = paths.make_grid(1.0, 3)
    increments = np.zeros((3, 3, 1))
    increments[2, 0, 0] = 1.0  # sample 2 reaches x = 2 at n = 1
    w = datatypes.WBatch(grid=grid, increments=increments)
    with pytest.raises(datatypes.NonFiniteError) as e:
        forward.simulate_forward(problem, w)
    assert (e.value.step, e.value.sample) == (2, 2)


def test_rejects_dimension_mismatch():
    problem = problems.linear_problem(datatypes.LinearParams())
    w = paths.sample_w_batch(SEED, paths.make_grid(0.25, 4), 2, 10)
    with pytest.raises(ValueError):
        forward.simulate_forward(problem, w)


def test_replay_paths_regenerates_batch():
    problem = problems.linear_problem(datatypes.LinearParams())
    config = datatypes.SolverConfig(steps=10, samples=64, delta=1.0, lower=(60,), upper=(200,))
    grid = paths.make_grid(problem.horizon, 10)
    original = forward.simulate_forward(problem, paths.sample_w_batch(99, grid, 1, 64))
    replayed = forward.replay_paths(problem, config, 99)
    np.testing.assert_array_equal(original.states, replayed.states)
