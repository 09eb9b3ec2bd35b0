from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
import math
from typing import Any, Callable, Dict, List, Optional, Protocol, Tuple

import numpy as np
import yaml

# ============================================================================
# ===============                   CLASSES                   ================
# ============================================================================


class Stream(int, Enum):
    """
    Independent random streams derived from a master seed. The B stream never
    depends on how many W repetitions are drawn.
    """

    b = 0
    w = 1


class GVariant(str, Enum):
    """Noise coefficients of the finance test problem."""

    g1 = "g1"  # 0.1 z + 0.5 y + log(x)
    g2 = "g2"  # 0.1 z + 0.5 y
    g3 = "g3"  # log(x) + 0.5 y

    def uses_log(self) -> bool:
        return self in (GVariant.g1, GVariant.g3)


class DomainMode(str, Enum):
    """How the regression domain [d1, d2] is chosen."""

    fixed = "fixed"  # user supplied bounds
    data = "data"  # min/max over all simulated states


class RunMode(str, Enum):
    single = "single"
    schedule = "schedule"
    ensemble = "ensemble"


class NonFiniteError(ValueError):
    """Raised when a simulated state, response or iterate is NaN or infinite."""

    def __init__(self, what: str, step: int, sample: int):
        super().__init__(f"non-finite {what} at step n={step}, sample m={sample}")
        self.step = step
        self.sample = sample


class ConfigError(ValueError):
    """Collects field-level validation messages for a configuration."""

    def __init__(self, messages: List[str]):
        super().__init__("; ".join(messages))
        self.messages = messages


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition t_n = n h of [0, horizon] with h = horizon / steps."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    @property
    def h(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        nodes = np.arange(self.steps + 1) * self.h
        nodes[-1] = self.horizon
        return nodes

    def time(self, n: int) -> float:
        return float(self.nodes[n])

    def same_horizon(self, other: "TimeGrid") -> bool:
        return math.isclose(self.horizon, other.horizon, rel_tol=1e-12)


@dataclass(frozen=True, eq=False)
class BPath:
    """
    One trajectory of the l-dimensional Brownian motion B, stored by its node
    values B_{t_n} (values[0] is 0). Increments are first differences, so
    subsampling nodes coarsens the path without touching B_T.
    """

    grid: TimeGrid
    values: np.ndarray  # (N + 1, l)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def remaining(self, n: int) -> np.ndarray:
        """B_T - B_{t_n}"""
        return self.values[-1] - self.values[n]


@dataclass(frozen=True, eq=False)
class WBatch:
    """M independent d-dimensional W increment paths, stored (M, N, d)."""

    grid: TimeGrid
    increments: np.ndarray

    @property
    def samples(self) -> int:
        return self.increments.shape[0]

    @property
    def dim(self) -> int:
        return self.increments.shape[2]


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Euler states X_n^m stored (M, N + 1, d), with the increments that drove them."""

    grid: TimeGrid
    states: np.ndarray
    w: WBatch

    @property
    def samples(self) -> int:
        return self.states.shape[0]

    def at(self, n: int) -> np.ndarray:
        return self.states[:, n, :]


# Coefficients are vectorized over the sample axis:
#   drift(x[M,d]) -> [M,d], diffusion(x) -> [M,d,d], terminal(x) -> [M,k]
#   driver(t, x, y[M,k], z[M,k,d]) -> [M,k], noise(t, x, y, z) -> [M,k,l]
SpaceFn = Callable[[np.ndarray], np.ndarray]
BackwardFn = Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class Problem:
    """
    Coefficient bundle (b, sigma, f, g, Phi) of a decoupled forward-backward
    doubly stochastic system, with its dimensions and starting point.

    Attributes:
        d           Dimension of the forward process X and of W.
        k           Dimension of Y.
        l           Dimension of the second Brownian motion B.
        alpha       Contraction constant of g in z; runs with alpha >= 1 are
                    carried out but flagged non-conforming.
        lipschitz   Lipschitz constant of the coefficients, if known.
        log_domain  [d1, d2] on which the coefficients are defined; x is clamped
                    into it before taking logarithms.
    """

    name: str
    d: int
    k: int
    l: int
    drift: SpaceFn
    diffusion: SpaceFn
    driver: BackwardFn
    noise: BackwardFn
    terminal: SpaceFn
    x0: np.ndarray
    horizon: float
    alpha: float = 0.0
    lipschitz: Optional[float] = None
    log_domain: Optional[Tuple[float, float]] = None

    @property
    def conforming(self) -> bool:
        return self.alpha < 1


@dataclass(frozen=True)
class LinearParams:
    """Geometric Brownian motion forward, Phi(x) = K - x, f = a0 y, g = b0 y."""

    a0: float = 0.5
    b0: float = 0.5
    strike: float = 115.0
    mu: float = 0.05
    sigma: float = 0.2
    x0: float = 100.0
    horizon: float = 0.25

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class FinanceParams:
    """
    Pricing with different lending (r) and borrowing (R) rates, see
    f(t, x, y, z) = -theta z - r y + (y - z / sigma)^- (R - r).
    """

    mu: float = 0.05
    sigma: float = 0.2
    r: float = 0.01
    big_r: float = 0.06
    strike: float = 115.0
    x0: float = 100.0
    horizon: float = 0.25
    log_lower: float = 60.0
    log_upper: float = 200.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.big_r < self.r:
            raise ValueError(f"borrowing rate {self.big_r} below lending rate {self.r}")

    @property
    def theta(self) -> float:
        return (self.mu - self.r) / self.sigma


@dataclass
class ClampCounter:
    """Number of points moved into the regression or coefficient domain."""

    count: int = 0

    def add(self, n: int):
        self.count += int(n)


@dataclass(frozen=True, eq=False)
class HypercubeBasis:
    """
    Regular partition of [lower, upper) into half-open boxes of edge delta.
    Cell indices are flattened in C order over cells_per_axis.
    """

    lower: np.ndarray
    upper: np.ndarray
    delta: float
    cells_per_axis: Tuple[int, ...]

    @property
    def dim(self) -> int:
        return len(self.cells_per_axis)

    @property
    def size(self) -> int:
        return int(np.prod(self.cells_per_axis))

    def locate_cells(
        self, points: np.ndarray, counter: Optional[ClampCounter] = None
    ) -> np.ndarray:
        points = np.atleast_2d(points)
        top = np.nextafter(self.upper, -np.inf)
        outside = np.any((points < self.lower) | (points > top), axis=1)
        if counter is not None:
            counter.add(np.count_nonzero(outside))
        clamped = np.clip(points, self.lower, top)
        axis_index = np.floor((clamped - self.lower) / self.delta).astype(np.int64)
        axis_index = np.clip(axis_index, 0, np.asarray(self.cells_per_axis) - 1)
        return np.ravel_multi_index(tuple(axis_index.T), self.cells_per_axis)

    def cell_bounds(self, cell: int) -> Tuple[np.ndarray, np.ndarray]:
        axis_index = np.array(np.unravel_index(cell, self.cells_per_axis))
        lo = self.lower + axis_index * self.delta
        return lo, np.minimum(lo + self.delta, self.upper)


class Field(Protocol):
    def evaluate(self, points: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class PiecewiseField:
    """
    Field constant on the cells of a basis. values has shape (L, *value_shape);
    empty cells (occupancy 0) hold zeros. derived marks the terminal y-field,
    which the scheme never uses (it takes Phi pointwise).
    """

    basis: HypercubeBasis
    values: np.ndarray
    occupancy: np.ndarray
    derived: bool = False

    @property
    def value_shape(self) -> Tuple[int, ...]:
        return self.values.shape[1:]

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        return self.values[self.basis.locate_cells(points)]


@dataclass(frozen=True)
class SolverConfig:
    """
    Discretization and Monte Carlo parameters of one backward solve.

    Attributes:
        steps           Number of time steps N.
        samples         Number of simulated paths M.
        delta           Hypercube edge.
        picard          Picard iterations I for the implicit Y step.
        repetitions     Independent runs for the mean / std estimates.
        domain          Fixed bounds or data-driven bounds.
        lower, upper    Bounds used when domain is fixed.
        workers         Processes used for repetitions; never changes results.
    """

    steps: int
    samples: int
    delta: float
    picard: int = 3
    repetitions: int = 50
    domain: DomainMode = DomainMode.fixed
    lower: Optional[Tuple[float, ...]] = None
    upper: Optional[Tuple[float, ...]] = None
    workers: int = 1

    def __post_init__(self):
        errors = []
        if self.steps < 1:
            errors.append(f"solver.steps: must be >= 1, got {self.steps}")
        if self.samples < 1:
            errors.append(f"solver.samples: must be >= 1, got {self.samples}")
        if not self.delta > 0:
            errors.append(f"solver.delta: must be positive, got {self.delta}")
        if self.picard < 1:
            errors.append(f"solver.picard: must be >= 1, got {self.picard}")
        if self.repetitions < 1:
            errors.append(f"solver.repetitions: must be >= 1, got {self.repetitions}")
        if self.workers < 1:
            errors.append(f"solver.workers: must be >= 1, got {self.workers}")
        if self.domain == DomainMode.fixed:
            if self.lower is None or self.upper is None:
                errors.append("solver.lower/upper: required when domain is fixed")
            elif len(self.lower) != len(self.upper):
                errors.append("solver.lower/upper: lengths differ")
            elif any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
                errors.append("solver.lower/upper: lower must be below upper")
        if errors:
            raise ConfigError(errors)


@dataclass(eq=False)
class BackwardSolution:
    """
    Fields of one backward induction, conditional on a fixed B path.

    Attributes:
        y_fields            y_n for n = 0..N (y_N is derived, for export only).
        z_fields            z_n for n = 0..N, z_N identically zero.
        y0                  y_0 evaluated at x0.
        picard_residuals    (N, I) sup-norm cell deltas between Picard iterates,
                            indexed by time step.
        slice_means         (N + 1, k) sample means of y_n(X_n^m).
        clamped             Points moved into the regression domain.
        log_clamped         Points moved into the coefficient log domain.
        starved_steps       Steps where most cells between the extreme samples
                            stayed empty.
        collapsed           The cell edge covered the whole domain span along
                            some axis.
    """

    grid: TimeGrid
    y_fields: List[Field]
    z_fields: List[Field]
    y0: np.ndarray
    picard_residuals: np.ndarray
    slice_means: np.ndarray
    repetition: int = 0
    w_seed: Optional[int] = None
    clamped: int = 0
    log_clamped: int = 0
    starved_steps: List[int] = field(default_factory=list)
    collapsed: bool = False


@dataclass(frozen=True)
class RepetitionFailure:
    index: int
    w_seed: int
    message: str


@dataclass(frozen=True, eq=False)
class RunStats:
    """Empirical mean and (count - 1)-divisor standard deviation of y0 values."""

    mean: np.ndarray
    std: np.ndarray
    count: int
    values: np.ndarray


@dataclass(frozen=True)
class ScheduleEntry:
    j: int
    steps: int
    samples: int
    delta: float


@dataclass(frozen=True)
class ErrorReport:
    """Monte Carlo estimate of sup_n E|Y - y|^2 plus h sum_n E|Z - z|^2."""

    y_error: float
    z_error: float

    @property
    def total(self) -> float:
        return self.y_error + self.z_error


@dataclass(eq=False)
class SettingResult:
    """
    Outcome of all repetitions of one (N, M, delta) setting on one B path.

    Attributes:
        label       Name used in CSV rows and field file names, e.g. j3 or p1_N20.
        seed        Setting seed the repetition W seeds are derived from.
        oracle_y0   Closed-form y0 for the run's B path, when one exists.
        errors      One ErrorReport per solved repetition, when an oracle exists.
    """

    label: str
    solver: SolverConfig
    path: int
    seed: int
    b_seed: int
    solutions: List[BackwardSolution]
    failures: List[RepetitionFailure]
    j: Optional[int] = None
    stats: Optional[RunStats] = None
    oracle_y0: Optional[np.ndarray] = None
    errors: List[ErrorReport] = field(default_factory=list)
    runtime: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Everything needed to replay a run of the command line tool. The dictionary
    form (to_dict / from_dict) is what goes into YAML files and manifests.
    """

    solver: SolverConfig
    problem: str = "linear"
    params: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    mode: RunMode = RunMode.single
    j_max: int = 6
    alpha_m: float = 3.0
    beta: float = 1.0
    delta_base: float = 50.0
    ensemble_paths: int = 5
    ensemble_steps: Tuple[int, ...] = (5, 10, 20, 40)
    slices: Optional[Tuple[int, ...]] = None
    output_dir: str = "output"

    def slice_steps(self, steps: int) -> List[int]:
        """Requested export slices, defaulting to {0, floor(3N/4), N-1}."""
        if self.slices is not None:
            return sorted({n for n in self.slices if 0 <= n <= steps})
        return sorted({0, (3 * steps) // 4, max(steps - 1, 0)})

    def validate_against(self, d: int):
        errors = []
        for name in ("lower", "upper"):
            bounds = getattr(self.solver, name)
            if bounds is not None and len(bounds) != d:
                errors.append(
                    f"solver.{name}: expected {d} value(s) for problem {self.problem}, got {len(bounds)}"
                )
        if errors:
            raise ConfigError(errors)

    def to_dict(self) -> Dict[str, Any]:
        s = self.solver
        return {
            "problem": {"name": self.problem, "params": dict(self.params)},
            "solver": {
                "steps": s.steps,
                "samples": s.samples,
                "delta": s.delta,
                "picard": s.picard,
                "repetitions": s.repetitions,
                "domain": s.domain.value,
                "lower": None if s.lower is None else list(s.lower),
                "upper": None if s.upper is None else list(s.upper),
                "workers": s.workers,
            },
            "seed": self.seed,
            "mode": self.mode.value,
            "schedule": {
                "j_max": self.j_max,
                "alpha_m": self.alpha_m,
                "beta": self.beta,
                "delta_base": self.delta_base,
            },
            "ensemble": {
                "paths": self.ensemble_paths,
                "steps": list(self.ensemble_steps),
            },
            "slices": None if self.slices is None else list(self.slices),
            "output_dir": self.output_dir,
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "ExperimentConfig":
        """
        Build a config from its dictionary form, collecting one message per bad
        field before raising ConfigError.
        """
        errors: List[str] = []
        known = {
            "problem",
            "solver",
            "seed",
            "mode",
            "schedule",
            "ensemble",
            "slices",
            "output_dir",
        }
        for key in sorted(set(data) - known):
            errors.append(f"{key}: unknown configuration key")

        def get(section: Dict[str, Any], path: str, key: str, convert, default):
            if key not in section or section[key] is None:
                return default
            try:
                return convert(section[key])
            except (TypeError, ValueError):
                errors.append(f"{path}{key}: cannot interpret {section[key]!r}")
                return default

        def bounds(value) -> Tuple[float, ...]:
            if isinstance(value, (int, float)):
                return (float(value),)
            return tuple(float(v) for v in value)

        problem = data.get("problem") or {}
        if isinstance(problem, str):
            problem = {"name": problem}
        params = dict(problem.get("params") or {})

        solver = data.get("solver") or {}
        for key in sorted(set(solver) - set(SolverConfig.__dataclass_fields__)):
            errors.append(f"solver.{key}: unknown configuration key")
        steps = get(solver, "solver.", "steps", int, 20)
        samples = get(solver, "solver.", "samples", int, 1000)
        delta = get(solver, "solver.", "delta", float, 1.0)
        picard = get(solver, "solver.", "picard", int, 3)
        repetitions = get(solver, "solver.", "repetitions", int, 50)
        domain = get(solver, "solver.", "domain", DomainMode, DomainMode.fixed)
        lower = get(solver, "solver.", "lower", bounds, None)
        upper = get(solver, "solver.", "upper", bounds, None)
        workers = get(solver, "solver.", "workers", int, 1)

        schedule = data.get("schedule") or {}
        ensemble = data.get("ensemble") or {}
        top = dict(data)
        seed = get(top, "", "seed", int, 0)
        mode = get(top, "", "mode", RunMode, RunMode.single)
        slices = get(top, "", "slices", lambda v: tuple(int(n) for n in v), None)
        output_dir = get(top, "", "output_dir", str, "output")
        j_max = get(schedule, "schedule.", "j_max", int, 6)
        alpha_m = get(schedule, "schedule.", "alpha_m", float, 3.0)
        beta = get(schedule, "schedule.", "beta", float, 1.0)
        delta_base = get(schedule, "schedule.", "delta_base", float, 50.0)
        ensemble_paths = get(ensemble, "ensemble.", "paths", int, 5)
        ensemble_steps = get(
            ensemble, "ensemble.", "steps", lambda v: tuple(int(n) for n in v), (5, 10, 20, 40)
        )
        if seed < 0:
            errors.append(f"seed: must be non-negative, got {seed}")
        if j_max < 1:
            errors.append(f"schedule.j_max: must be >= 1, got {j_max}")
        if ensemble_paths < 1:
            errors.append(f"ensemble.paths: must be >= 1, got {ensemble_paths}")
        if not ensemble_steps or min(ensemble_steps) < 1:
            errors.append("ensemble.steps: need at least one step count >= 1")

        try:
            solver_config = SolverConfig(
                steps=steps,
                samples=samples,
                delta=delta,
                picard=picard,
                repetitions=repetitions,
                domain=domain,
                lower=lower,
                upper=upper,
                workers=workers,
            )
        except ConfigError as e:
            errors.extend(e.messages)
            solver_config = None

        if errors or solver_config is None:
            raise ConfigError(errors)

        return ExperimentConfig(
            solver=solver_config,
            problem=str(problem.get("name", "linear")),
            params=params,
            seed=seed,
            mode=mode,
            j_max=j_max,
            alpha_m=alpha_m,
            beta=beta,
            delta_base=delta_base,
            ensemble_paths=ensemble_paths,
            ensemble_steps=ensemble_steps,
            slices=slices,
            output_dir=output_dir,
        )

    @staticmethod
    def read_presets() -> Dict[str, Dict[str, Any]]:
        with resources.open_text("bdsde.config", "presets.yml") as f:
            return yaml.safe_load(f)

    @staticmethod
    def load_dict(
        config_file: Optional[str] = None, preset: Optional[str] = None
    ) -> Dict[str, Any]:
        """
        Read the dictionary form of a config from a bundled preset and/or a YAML
        file. Keys in the file override the preset.
        """
        data: Dict[str, Any] = {}
        if preset is not None:
            presets = ExperimentConfig.read_presets()
            if preset not in presets:
                raise ConfigError(
                    [f"preset: unknown preset {preset}, expected one of {', '.join(sorted(presets))}"]
                )
            data = merge_dicts(data, presets[preset])
        if config_file is not None:
            with open(config_file) as f:
                data = merge_dicts(data, yaml.safe_load(f) or {})
        return data


def merge_dicts(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge 'overrides' into a copy of 'base'."""
    result = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = merge_dicts(result[key], value)
        else:
            result[key] = value
    return result
