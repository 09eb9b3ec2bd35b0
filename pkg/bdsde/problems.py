from dataclasses import fields, replace
from functools import partial
from typing import Any, Dict, Optional

import numpy as np

from . import datatypes

# ============================================================================
# Coefficients are module level functions bound with functools.partial so that
# problems can be shipped to worker processes.
# ============================================================================


def negative_part(a: np.ndarray) -> np.ndarray:
    """a^- = max(0, -a)"""
    return np.maximum(0.0, -a)


def _linear_drift(x: np.ndarray, mu: float) -> np.ndarray:
    return mu * x


def _linear_diffusion(x: np.ndarray, sigma: float) -> np.ndarray:
    return (sigma * x)[:, :, None]


def _put_terminal(x: np.ndarray, strike: float) -> np.ndarray:
    return strike - x


def _scaled_y(t: float, x: np.ndarray, y: np.ndarray, z: np.ndarray, a: float):
    return a * y


def _scaled_y_noise(t: float, x: np.ndarray, y: np.ndarray, z: np.ndarray, b: float):
    return (b * y)[:, :, None]


def _rates_driver(
    t: float,
    x: np.ndarray,
    y: np.ndarray,
    z: np.ndarray,
    theta: float,
    r: float,
    big_r: float,
    sigma: float,
) -> np.ndarray:
    z = z[:, :, 0]
    return -theta * z - r * y + negative_part(y - z / sigma) * (big_r - r)


def _finance_noise(
    t: float,
    x: np.ndarray,
    y: np.ndarray,
    z: np.ndarray,
    variant: datatypes.GVariant,
    lower: float,
    upper: float,
) -> np.ndarray:
    z = z[:, :, 0]
    if variant == datatypes.GVariant.g2:
        g = 0.1 * z + 0.5 * y
    else:
        log_x = np.log(np.clip(x, lower, upper))
        if variant == datatypes.GVariant.g1:
            g = 0.1 * z + 0.5 * y + log_x
        else:
            g = log_x + 0.5 * y
    return g[:, :, None]


def _zero_noise(t: float, x: np.ndarray, y: np.ndarray, z: np.ndarray, l: int):
    return np.zeros((y.shape[0], y.shape[1], l))


def linear_problem(p: datatypes.LinearParams) -> datatypes.Problem:
    """
    One-dimensional linear problem with explicit solution:
    dX = X (mu dt + sigma dW), Phi(x) = K - x, f = a0 y, g = b0 y.
    """
    return datatypes.Problem(
        name="linear",
        d=1,
        k=1,
        l=1,
        drift=partial(_linear_drift, mu=p.mu),
        diffusion=partial(_linear_diffusion, sigma=p.sigma),
        driver=partial(_scaled_y, a=p.a0),
        noise=partial(_scaled_y_noise, b=p.b0),
        terminal=partial(_put_terminal, strike=p.strike),
        x0=np.array([p.x0]),
        horizon=p.horizon,
        alpha=0.0,
        lipschitz=max(abs(p.a0), abs(p.b0), abs(p.mu), p.sigma, 1.0),
    )


def finance_problem(
    p: datatypes.FinanceParams, g_variant: datatypes.GVariant
) -> datatypes.Problem:
    """
    One-dimensional pricing problem with different interest rates, driven by the
    noise coefficient 'g_variant'. Log variants clamp x into
    [p.log_lower, p.log_upper] before taking the natural logarithm.
    """
    g_variant = datatypes.GVariant(g_variant)
    if g_variant.uses_log() and not p.log_lower > 0:
        raise ValueError(
            f"{g_variant.value} takes log(x): lower bound must be positive, got {p.log_lower}"
        )
    if not p.log_lower < p.log_upper:
        raise ValueError(f"empty coefficient domain [{p.log_lower}, {p.log_upper}]")
    return datatypes.Problem(
        name=f"finance-{g_variant.value}",
        d=1,
        k=1,
        l=1,
        drift=partial(_linear_drift, mu=p.mu),
        diffusion=partial(_linear_diffusion, sigma=p.sigma),
        driver=partial(
            _rates_driver, theta=p.theta, r=p.r, big_r=p.big_r, sigma=p.sigma
        ),
        noise=partial(
            _finance_noise, variant=g_variant, lower=p.log_lower, upper=p.log_upper
        ),
        terminal=partial(_put_terminal, strike=p.strike),
        x0=np.array([p.x0]),
        horizon=p.horizon,
        alpha=0.0 if g_variant == datatypes.GVariant.g3 else 0.1,
        lipschitz=max(abs(p.theta), p.big_r, 1.0 / p.log_lower if g_variant.uses_log() else 0.5),
        log_domain=(p.log_lower, p.log_upper) if g_variant.uses_log() else None,
    )


def custom_problem(
    d: int,
    k: int,
    l: int,
    drift: datatypes.SpaceFn,
    diffusion: datatypes.SpaceFn,
    driver: datatypes.BackwardFn,
    noise: datatypes.BackwardFn,
    terminal: datatypes.SpaceFn,
    x0,
    horizon: float,
    alpha: float = 0.0,
    lipschitz: Optional[float] = None,
    name: str = "custom",
    probe: Optional[np.ndarray] = None,
) -> datatypes.Problem:
    """
    Build a problem from user supplied vectorized coefficients and check them on
    probe points (x0 by default): every output must have the documented shape
    and be finite.

    Args:
        d, k, l:    Dimensions of X (and W), Y and B.
        drift:      x[M,d] -> [M,d]
        diffusion:  x[M,d] -> [M,d,d]
        driver:     (t, x[M,d], y[M,k], z[M,k,d]) -> [M,k]
        noise:      (t, x[M,d], y[M,k], z[M,k,d]) -> [M,k,l]
        terminal:   x[M,d] -> [M,k]
        probe:      Optional [P,d] array of points to validate at.

    Returns:
        A validated Problem.
    """
    if min(d, k, l) < 1:
        raise ValueError(f"dimensions must be >= 1, got d={d}, k={k}, l={l}")
    problem = datatypes.Problem(
        name=name,
        d=d,
        k=k,
        l=l,
        drift=drift,
        diffusion=diffusion,
        driver=driver,
        noise=noise,
        terminal=terminal,
        x0=np.atleast_1d(np.asarray(x0, dtype=float)),
        horizon=float(horizon),
        alpha=alpha,
        lipschitz=lipschitz,
    )
    validate_problem(problem, probe)
    return problem


def validate_problem(problem: datatypes.Problem, probe: Optional[np.ndarray] = None):
    if problem.x0.shape != (problem.d,):
        raise ValueError(f"x0 has shape {problem.x0.shape}, expected ({problem.d},)")
    if not problem.horizon > 0:
        raise ValueError(f"horizon must be positive, got {problem.horizon}")
    x = problem.x0[None, :] if probe is None else np.atleast_2d(probe)
    m = x.shape[0]
    y = np.zeros((m, problem.k))
    z = np.zeros((m, problem.k, problem.d))
    checks = [
        ("drift", lambda: problem.drift(x), (m, problem.d)),
        ("diffusion", lambda: problem.diffusion(x), (m, problem.d, problem.d)),
        ("terminal", lambda: problem.terminal(x), (m, problem.k)),
        ("driver", lambda: problem.driver(0.0, x, y, z), (m, problem.k)),
        ("noise", lambda: problem.noise(0.0, x, y, z), (m, problem.k, problem.l)),
    ]
    for name, evaluate, shape in checks:
        value = np.asarray(evaluate())
        if value.shape != shape:
            raise ValueError(
                f"{problem.name}: {name} returned shape {value.shape}, expected {shape}"
            )
        if not np.all(np.isfinite(value)):
            raise ValueError(f"{problem.name}: {name} is not finite at the probe points")
    if not problem.conforming:
        print(
            f"WARNING: {problem.name} has contraction constant alpha={problem.alpha} >= 1,"
            f" results are not covered by the convergence theory"
        )


def without_noise(problem: datatypes.Problem) -> datatypes.Problem:
    """The same problem with g = 0, i.e. the plain backward SDE."""
    return replace(
        problem,
        name=f"{problem.name}-bsde",
        noise=partial(_zero_noise, l=problem.l),
        alpha=0.0,
        log_domain=None,
    )


def count_clamped(problem: datatypes.Problem, x: np.ndarray) -> int:
    """Number of points the coefficients clamp into the log domain."""
    if problem.log_domain is None:
        return 0
    lower, upper = problem.log_domain
    return int(np.count_nonzero(np.any((x < lower) | (x > upper), axis=-1)))


PROBLEM_NAMES = ("linear", "finance-g1", "finance-g2", "finance-g3", "custom")


def _params(cls, values: Dict[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise datatypes.ConfigError(
            [f"problem.params.{key}: unknown parameter for {cls.__name__}" for key in unknown]
        )
    try:
        return cls(**{key: float(value) for key, value in values.items()})
    except (TypeError, ValueError) as e:
        raise datatypes.ConfigError([f"problem.params: {e}"])


def problem_by_name(name: str, params: Dict[str, Any]) -> datatypes.Problem:
    """
    Problems selectable from a configuration file. Custom problems need
    coefficient functions and are only available through custom_problem().
    """
    if name == "linear":
        return linear_problem(_params(datatypes.LinearParams, params))
    if name.startswith("finance-") and name[len("finance-") :] in datatypes.GVariant._value2member_map_:
        variant = datatypes.GVariant(name[len("finance-") :])
        try:
            return finance_problem(_params(datatypes.FinanceParams, params), variant)
        except datatypes.ConfigError:
            raise
        except ValueError as e:
            raise datatypes.ConfigError([f"problem.params: {e}"])
    if name == "custom":
        raise datatypes.ConfigError(
            ["problem.name: custom problems require library use (bdsde.problems.custom_problem)"]
        )
    raise datatypes.ConfigError(
        [f"problem.name: unknown problem {name}, expected one of {', '.join(PROBLEM_NAMES)}"]
    )


def linear_params(problem_name: str, params: Dict[str, Any]) -> Optional[datatypes.LinearParams]:
    """Parameters of the closed-form oracle, when the problem has one."""
    if problem_name != "linear":
        return None
    return _params(datatypes.LinearParams, params)
