from dataclasses import replace

import numpy as np
import pytest

from bdsde import analytics
from bdsde import datatypes
from bdsde import forward
from bdsde import paths
from bdsde import problems
from bdsde import regression
from bdsde import solver
from bdsde import utils

SEED = 2024
EXACT_TOL = 1e-12
PICARD_SLACK = 1e-6
LINEAR_REL_TOL = 0.03


def _config(steps=5, samples=400, delta=1.0, **kwargs):
    kwargs.setdefault("lower", (40.0,))
    kwargs.setdefault("upper", (200.0,))
    return datatypes.SolverConfig(steps=steps, samples=samples, delta=delta, **kwargs)


def _solve(problem, config, b_seed=1, w_seed=2):
    grid = paths.make_grid(problem.horizon, config.steps)
    b_path = paths.sample_b_path(b_seed, grid, problem.l)
    w = paths.sample_w_batch(w_seed, grid, problem.d, config.samples)
    return solver.backward_solve(problem, config, b_path, w), b_path, w


def _constant_problem(c, terminal=None, driver=None, noise=None):
    return problems.custom_problem(
        d=1,
        k=1,
        l=1,
        drift=lambda x: np.zeros_like(x),
        diffusion=lambda x: np.zeros((x.shape[0], 1, 1)),
        driver=driver or (lambda t, x, y, z: np.zeros_like(y)),
        noise=noise or (lambda t, x, y, z: np.zeros((y.shape[0], 1, 1))),
        terminal=terminal or (lambda x: np.full((x.shape[0], 1), c)),
        x0=[1.0],
        horizon=1.0,
    )


@pytest.mark.parametrize(
    "steps,samples,delta,domain",
    [
        (1, 1, 1.0, datatypes.DomainMode.fixed),
        (4, 37, 0.3, datatypes.DomainMode.fixed),
        (10, 200, 2.0, datatypes.DomainMode.fixed),
        (7, 50, 1.0, datatypes.DomainMode.data),
    ],
)
def test_degenerate_problem_is_exact(steps, samples, delta, domain):
    problem = _constant_problem(3.7)
    config = datatypes.SolverConfig(
        steps=steps, samples=samples, delta=delta, domain=domain, lower=(0.0,), upper=(10.0,)
    )
    solution, _, _ = _solve(problem, config)
    assert abs(solution.y0[0] - 3.7) <= EXACT_TOL


@pytest.mark.parametrize("name", ["linear", "finance-g1", "finance-g2", "finance-g3"])
def test_without_noise_ignores_b_path(name):
    problem = problems.without_noise(problems.problem_by_name(name, {}))
    config = _config(steps=5, samples=500)
    grid = paths.make_grid(problem.horizon, config.steps)
    w = paths.sample_w_batch(5, grid, 1, config.samples)
    first = solver.backward_solve(problem, config, paths.sample_b_path(10, grid, 1), w)
    second = solver.backward_solve(problem, config, paths.sample_b_path(11, grid, 1), w)
    np.testing.assert_allclose(first.y0, second.y0, rtol=0, atol=EXACT_TOL)
    for a, b in zip(first.z_fields + first.y_fields, second.z_fields + second.y_fields):
        np.testing.assert_allclose(a.values, b.values, rtol=0, atol=EXACT_TOL)


def test_noise_makes_solution_depend_on_b_path():
    problem = problems.linear_problem(datatypes.LinearParams())
    config = _config(steps=5, samples=500)
    grid = paths.make_grid(problem.horizon, config.steps)
    w = paths.sample_w_batch(5, grid, 1, config.samples)
    first = solver.backward_solve(problem, config, paths.sample_b_path(10, grid, 1), w)
    second = solver.backward_solve(problem, config, paths.sample_b_path(11, grid, 1), w)
    assert first.y0[0] != second.y0[0]


def test_terminal_contract():
    problem = problems.linear_problem(datatypes.LinearParams())
    solution, _, _ = _solve(problem, _config())
    steps = solution.grid.steps
    assert len(solution.y_fields) == len(solution.z_fields) == steps + 1
    assert np.all(solution.z_fields[steps].values == 0)
    assert solution.y_fields[steps].derived
    assert not any(f.derived for f in solution.y_fields[:steps])
    for y, z in zip(solution.y_fields, solution.z_fields):
        assert y.value_shape == (1,)
        assert z.value_shape == (1, 1)
    assert solution.picard_residuals.shape == (steps, 3)
    assert np.isfinite(solution.y0).all()


def test_terminal_step_uses_exact_terminal_values():
    # sigma = 0 forward and linear Phi: the n = N-1 responses are Phi(X_N) itself
    problem = _constant_problem(0.0, terminal=lambda x: 2.0 * x)
    config = _config(steps=1, samples=20, lower=(0.0,), upper=(10.0,), picard=1)
    solution, _, _ = _solve(problem, config)
    assert solution.y0[0] == pytest.approx(2.0, abs=EXACT_TOL)


def _scripted_batch(problem, increments):
    grid = paths.make_grid(1.0, 1)
    w = datatypes.WBatch(grid=grid, increments=np.asarray(increments, dtype=float).reshape(-1, 1, 1))
    return forward.simulate_forward(problem, w)


def test_regress_z_hand_instance():
    problem = _constant_problem(
        2.0, noise=lambda t, x, y, z: (0.5 * y)[:, :, None]
    )
    batch = _scripted_batch(problem, [0.1, -0.2, 0.3, 0.2])
    b_path = datatypes.BPath(grid=batch.grid, values=np.array([[0.0], [0.3]]))
    basis = regression.build_basis(0.0, 10.0, 10.0)
    y_next = np.full((4, 1), 2.0)
    z_next = np.zeros((4, 1, 1))
    z = solver.regress_z(0, batch, b_path, y_next, z_next, problem, basis)
    # (2 + 0.5 * 2 * 0.3) * mean(dW) / h
    assert z.values[0, 0, 0] == pytest.approx(2.3 * 0.1, abs=EXACT_TOL)


def test_regress_z_without_noise_averages_to_zero():
    problem = _constant_problem(5.0)
    config = _config(steps=4, samples=20_000, lower=(0.0,), upper=(10.0,))
    solution, _, _ = _solve(problem, config)
    h = solution.grid.h
    # response c dW / h has standard deviation c / sqrt(h)
    bound = 5 * 5.0 / np.sqrt(h * config.samples)
    for z in solution.z_fields[:-1]:
        assert np.abs(z.values).max() <= bound


def test_picard_is_exact_when_driver_ignores_y():
    problem = problems.finance_problem(datatypes.FinanceParams(), datatypes.GVariant.g3)
    problem = problems.custom_problem(
        d=1,
        k=1,
        l=1,
        drift=problem.drift,
        diffusion=problem.diffusion,
        driver=lambda t, x, y, z: 0.3 * z[:, :, 0] + 1.0,
        noise=problem.noise,
        terminal=problem.terminal,
        x0=[100.0],
        horizon=0.25,
    )
    solution, _, _ = _solve(problem, _config(picard=3))
    np.testing.assert_array_equal(solution.picard_residuals[:, 1:], 0.0)


def test_picard_contracts_at_rate_a0_h():
    params = datatypes.LinearParams()
    problem = problems.linear_problem(params)
    solution, _, _ = _solve(problem, _config(steps=20, samples=1000, picard=3))
    bound = params.a0 * solution.grid.h * (1 + PICARD_SLACK)
    residuals = solution.picard_residuals
    assert np.all(residuals[:, 0] > 0)
    assert np.all(residuals[:, 2] <= bound * residuals[:, 1])
    assert np.all(residuals[:, 1] <= bound * residuals[:, 0])
    assert np.all(np.diff(residuals, axis=1) <= 0)


def test_zero_data_gives_zero_iterates():
    problem = problems.linear_problem(datatypes.LinearParams(strike=0.0))
    problem = problems.custom_problem(
        d=1,
        k=1,
        l=1,
        drift=problem.drift,
        diffusion=problem.diffusion,
        driver=problem.driver,
        noise=problem.noise,
        terminal=lambda x: np.zeros((x.shape[0], 1)),
        x0=[100.0],
        horizon=0.25,
    )
    solution, _, _ = _solve(problem, _config())
    assert np.all(solution.picard_residuals == 0)
    assert all(np.all(f.values == 0) for f in solution.y_fields + solution.z_fields)


def test_slice_means_start_at_y0_and_end_at_terminal_mean():
    problem = problems.linear_problem(datatypes.LinearParams())
    solution, _, w = _solve(problem, _config())
    batch = forward.simulate_forward(problem, w)
    assert solution.slice_means[0, 0] == pytest.approx(solution.y0[0], abs=EXACT_TOL)
    assert solution.slice_means[-1, 0] == pytest.approx(np.mean(115.0 - batch.at(5)[:, 0]))


def test_data_domain_never_clamps():
    problem = problems.linear_problem(datatypes.LinearParams())
    config = datatypes.SolverConfig(steps=5, samples=300, delta=1.0, domain=datatypes.DomainMode.data)
    solution, _, _ = _solve(problem, config)
    assert solution.clamped == 0


@pytest.mark.parametrize("domain", [datatypes.DomainMode.fixed, datatypes.DomainMode.data])
def test_single_cell_basis_is_recorded_not_printed(domain, capsys):
    problem = problems.linear_problem(datatypes.LinearParams())
    if domain == datatypes.DomainMode.fixed:
        config = _config(delta=500.0)
    else:
        config = datatypes.SolverConfig(steps=5, samples=50, delta=500.0, domain=domain)
    solution, _, _ = _solve(problem, config)
    assert solution.collapsed
    assert "WARNING" not in capsys.readouterr().out
    fine, _, _ = _solve(problem, _config())
    assert not fine.collapsed


def test_fixed_domain_counts_clamps():
    problem = problems.linear_problem(datatypes.LinearParams())
    solution, _, _ = _solve(problem, _config(lower=(99.0,), upper=(101.0,)))
    assert solution.clamped > 0


def test_log_domain_clamps_are_counted():
    params = datatypes.FinanceParams(log_lower=99.0, log_upper=101.0)
    problem = problems.finance_problem(params, datatypes.GVariant.g1)
    solution, _, _ = _solve(problem, _config())
    assert solution.log_clamped > 0


def test_b_path_on_finer_grid_is_coarsened():
    problem = problems.linear_problem(datatypes.LinearParams())
    config = _config(steps=5)
    fine = paths.make_grid(problem.horizon, 20)
    coarse = paths.make_grid(problem.horizon, 5)
    b_fine = paths.sample_b_path(1, fine, 1)
    w = paths.sample_w_batch(2, coarse, 1, config.samples)
    from_fine = solver.backward_solve(problem, config, b_fine, w)
    from_coarse = solver.backward_solve(problem, config, paths.coarsen_b_path(b_fine, coarse), w)
    np.testing.assert_array_equal(from_fine.y0, from_coarse.y0)


def test_backward_solve_rejects_mismatched_grid():
    problem = problems.linear_problem(datatypes.LinearParams())
    grid = paths.make_grid(problem.horizon, 4)
    with pytest.raises(ValueError):
        solver.backward_solve(
            problem,
            _config(steps=5),
            paths.sample_b_path(1, grid, 1),
            paths.sample_w_batch(2, grid, 1, 10),
        )


def test_non_finite_response_is_reported():
    problem = _constant_problem(1.0, driver=lambda t, x, y, z: y / 0.0 if 0 < t < 0.5 else np.zeros_like(y))
    with pytest.raises(datatypes.NonFiniteError) as e:
        with np.errstate(divide="ignore", invalid="ignore"):
            _solve(problem, _config(steps=4, lower=(0.0,), upper=(10.0,)))
    assert e.value.step == 1


def test_single_repetition_matches_backward_solve():
    problem = problems.linear_problem(datatypes.LinearParams())
    config = _config(repetitions=1)
    grid = paths.make_grid(problem.horizon, config.steps)
    b_path = paths.sample_b_path(1, grid, 1)
    solutions, failures = solver.run_repetitions(problem, config, b_path, SEED)
    assert failures == [] and len(solutions) == 1
    w_seed = utils.derive_seed(SEED, datatypes.Stream.w, 0)
    direct = solver.backward_solve(problem, config, b_path, paths.sample_w_batch(w_seed, grid, 1, config.samples))
    assert solutions[0].w_seed == w_seed
    np.testing.assert_array_equal(solutions[0].y0, direct.y0)


def test_repetition_order_does_not_matter():
    problem = problems.linear_problem(datatypes.LinearParams())
    config = _config(repetitions=4)
    b_path = paths.sample_b_path(1, paths.make_grid(problem.horizon, config.steps), 1)
    solutions, _ = solver.run_repetitions(problem, config, b_path, SEED)
    reversed_y0 = [
        solver.solve_repetition(problem, config, b_path, SEED, r).y0[0]  # type: ignore
        for r in reversed(range(4))
    ]
    assert sorted(s.y0[0] for s in solutions) == sorted(reversed_y0)
    assert [s.repetition for s in solutions] == [0, 1, 2, 3]


def test_worker_count_does_not_change_results():
    problem = problems.finance_problem(datatypes.FinanceParams(), datatypes.GVariant.g1)
    config = _config(samples=200, repetitions=4)
    b_path = paths.sample_b_path(1, paths.make_grid(problem.horizon, config.steps), 1)
    serial, _ = solver.run_repetitions(problem, config, b_path, SEED)
    pooled, _ = solver.run_repetitions(
        problem, replace(config, workers=2), b_path, SEED
    )
    assert [s.y0[0] for s in serial] == [s.y0[0] for s in pooled]


def test_failed_repetition_does_not_stop_the_others():
    calls = {"count": 0}

    def terminal(x):
        calls["count"] += 1
        if calls["count"] == 2:
            raise ValueError("terminal blew up")
        return np.ones((x.shape[0], 1))

    problem = datatypes.Problem(
        name="flaky",
        d=1,
        k=1,
        l=1,
        drift=lambda x: np.zeros_like(x),
        diffusion=lambda x: np.zeros((x.shape[0], 1, 1)),
        driver=lambda t, x, y, z: np.zeros_like(y),
        noise=lambda t, x, y, z: np.zeros((y.shape[0], 1, 1)),
        terminal=terminal,
        x0=np.array([1.0]),
        horizon=1.0,
    )
    config = _config(steps=2, samples=10, repetitions=3, lower=(0.0,), upper=(10.0,))
    b_path = paths.sample_b_path(1, paths.make_grid(1.0, 2), 1)
    solutions, failures = solver.run_repetitions(problem, config, b_path, SEED)
    assert [s.repetition for s in solutions] == [0, 2]
    assert len(failures) == 1
    assert failures[0].index == 1
    assert "terminal blew up" in failures[0].message


def _linear_accuracy(b0):
    params = datatypes.LinearParams(b0=b0)
    problem = problems.linear_problem(params)
    config = datatypes.SolverConfig(
        steps=20, samples=5000, delta=1.0, repetitions=10, lower=(60.0,), upper=(200.0,)
    )
    b_path = paths.sample_b_path(
        utils.derive_seed(SEED, datatypes.Stream.b, 0), paths.make_grid(params.horizon, 20), 1
    )
    solutions, failures = solver.run_repetitions(problem, config, b_path, SEED)
    assert not failures
    stats = analytics.empirical_stats([s.y0 for s in solutions])
    oracle = analytics.explicit_linear_y(0.0, params.x0, b_path, params)
    return analytics.relative_error(stats.mean[0], oracle)


@pytest.mark.slow
def test_linear_accuracy_without_noise():
    assert _linear_accuracy(0.0) <= LINEAR_REL_TOL


@pytest.mark.slow
def test_linear_accuracy_with_noise():
    assert _linear_accuracy(0.5) <= LINEAR_REL_TOL
