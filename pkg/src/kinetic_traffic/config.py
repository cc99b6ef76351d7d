"""Run configuration: YAML files, flag overrides, and initial states.

A run is described by one declarative mapping (usually a YAML file) that
CLI flags may override key by key.  The velocity grid can be pinned by
any two of (cell count, cell width, cells-per-jump ratio, jump count);
the resolver derives the rest and rejects inconsistent combinations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import numpy as np
import yaml

from .equilibrium import closed_form_equilibrium, equilibrium_on_grid
from .matrices import VelocityGrid, build_grid
from .params import (
    ConfigurationError,
    CustomLaw,
    Kernel,
    ModelParams,
    PowerLaw,
    ProbabilityLaw,
    evaluate_probability,
)

__all__ = [
    "InitialCondition",
    "IntegratorSettings",
    "OutputSettings",
    "DiagramSettings",
    "ConvergenceSettings",
    "RunConfig",
    "load_config",
    "parse_ratio",
    "build_initial_state",
]

IC_KINDS = ("uniform", "all-at-rest", "congested", "custom", "equilibrium")


@dataclass(frozen=True)
class InitialCondition:
    """How the starting cell masses are laid out.

    uniform        rho spread evenly over all cells
    all-at-rest    everything in the lowest-speed cell
    congested      rho*(1-epsilon) in the top cell, the rest spread below
    custom         explicit mass vector
    equilibrium    closed-form equilibrium on the grid, plus epsilon added
                   to one cell (may be negative; jump kernel only)
    """

    kind: str = "uniform"
    epsilon: float = 0.0
    cell: int = 1
    masses: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in IC_KINDS:
            raise ConfigurationError(
                f"unknown initial condition {self.kind!r}; pick one of {IC_KINDS}"
            )
        if self.kind == "congested" and not (0.0 <= self.epsilon <= 1.0):
            raise ConfigurationError("congested epsilon must lie in [0, 1]")
        if self.kind == "custom" and not self.masses:
            raise ConfigurationError("custom initial condition needs a mass vector")
        if self.cell < 1:
            raise ConfigurationError("cells are numbered from 1")


@dataclass(frozen=True)
class IntegratorSettings:
    step: Optional[float] = None
    t_end: float = 50.0
    t_max: float = 1e7
    residual_tol: float = 1e-10

    def __post_init__(self):
        if self.step is not None and self.step <= 0:
            raise ConfigurationError("step must be positive")
        if self.t_end <= 0 or self.t_max <= 0 or self.residual_tol <= 0:
            raise ConfigurationError("time horizons and tolerances must be positive")


@dataclass(frozen=True)
class OutputSettings:
    directory: Path = Path("out")
    prefix: str = "run"


@dataclass(frozen=True)
class DiagramSettings:
    rho_grid: tuple[float, ...]
    ratios: tuple[float, ...] = (1.0,)
    insert_critical: bool = True
    kink_threshold: float = 0.2


@dataclass(frozen=True)
class ConvergenceSettings:
    rho_set: tuple[float, ...]
    ratios: tuple[float, ...] = (1.0, 2.0)
    t_end: Optional[float] = None
    workers: int = 1


@dataclass(frozen=True)
class RunConfig:
    params: ModelParams
    law: ProbabilityLaw
    ratio: Optional[Fraction] = None  # sweeps carry their own ratio lists
    rho: Optional[float] = None  # sweeps carry their own density lists
    initial: InitialCondition = InitialCondition()
    integrator: IntegratorSettings = IntegratorSettings()
    output: OutputSettings = OutputSettings()
    diagram: Optional[DiagramSettings] = None
    convergence: Optional[ConvergenceSettings] = None
    workers: int = 1

    def __post_init__(self):
        if self.rho is not None and not (0.0 <= self.rho <= self.params.rho_max):
            raise ConfigurationError(
                f"rho={self.rho} outside [0, {self.params.rho_max}]"
            )
        if self.workers < 1:
            raise ConfigurationError("workers must be at least 1")

    def require_rho(self) -> float:
        if self.rho is None:
            raise ConfigurationError("this command needs the run density rho")
        return self.rho

    def require_ratio(self) -> Fraction:
        if self.ratio is None:
            raise ConfigurationError(
                "this command needs the cells-per-jump ratio r (or N, or dv)"
            )
        return self.ratio


def parse_ratio(value: Union[str, int, float, Fraction]) -> Fraction:
    """Cells-per-jump ratio from 4, 4.0, '4', '14/3', or a Fraction."""
    if isinstance(value, Fraction):
        ratio = value
    elif isinstance(value, str):
        try:
            ratio = Fraction(value.strip())
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigurationError(f"cannot parse ratio {value!r}") from exc
    elif isinstance(value, int):
        ratio = Fraction(value)
    elif isinstance(value, float):
        ratio = Fraction(value).limit_denominator(10**9)
    else:
        raise ConfigurationError(f"cannot parse ratio {value!r}")
    if ratio <= 0:
        raise ConfigurationError(f"ratio must be positive, got {ratio}")
    return ratio


def _resolve_grid(
    v_max: float,
    n_cells: Optional[int],
    cell_width: Optional[float],
    ratio: Optional[Fraction],
    n_jumps: Optional[int],
) -> tuple[Optional[Fraction], int]:
    """Derive (ratio, n_jumps) from any consistent pair of grid controls.

    The ratio may stay None: sweep subcommands carry their own ratio
    lists.  The jump count is always required.
    """
    r, t = ratio, n_jumps
    if t is None and r is not None and n_cells is not None:
        jumps = Fraction(n_cells - 1) / r
        if jumps.denominator != 1:
            raise ConfigurationError(
                f"N={n_cells} with r={r} gives a fractional jump count {jumps}"
            )
        t = int(jumps)
    if t is None and r is not None and cell_width is not None:
        t_val = v_max / (float(r) * cell_width)
        t = round(t_val)
        if abs(t_val - t) > 1e-9 * max(abs(t_val), 1.0):
            raise ConfigurationError(
                f"dv={cell_width} with r={r} gives a fractional jump count {t_val}"
            )
    if r is None and t is not None and n_cells is not None:
        r = Fraction(n_cells - 1, t)
    if r is None and t is not None and cell_width is not None:
        r = Fraction(v_max / (t * cell_width)).limit_denominator(10**9)
    if t is None:
        raise ConfigurationError(
            "the grid is underdetermined: give at least two of N, dv, r, T "
            "(the jump count T must be derivable)"
        )
    if t < 1:
        raise ConfigurationError(f"jump count must be at least 1, got {t}")
    if r is not None:
        n_expected = r * t + 1
        if n_expected.denominator != 1:
            raise ConfigurationError(
                f"r={r}, T={t} give a fractional cell count {n_expected}"
            )
        if n_cells is not None and n_cells != int(n_expected):
            raise ConfigurationError(
                f"N={n_cells} conflicts with r={r}, T={t} "
                f"(expect N={int(n_expected)})"
            )
        if cell_width is not None:
            dv_expected = v_max / (float(r) * t)
            if abs(cell_width - dv_expected) > 1e-9 * dv_expected:
                raise ConfigurationError(
                    f"dv={cell_width} conflicts with r={r}, T={t} "
                    f"(expect dv={dv_expected!r})"
                )
    return r, t


def _law_from_mapping(data: Mapping[str, Any]) -> ProbabilityLaw:
    custom = data.get("law")
    gamma = data.get("gamma")
    if custom is not None:
        if gamma is not None:
            raise ConfigurationError("give either gamma or a custom law, not both")
        points = custom.get("points") if isinstance(custom, Mapping) else custom
        if not points:
            raise ConfigurationError("custom law needs a points table")
        return CustomLaw(tuple((float(a), float(b)) for a, b in points))
    return PowerLaw(gamma=float(gamma if gamma is not None else 1.0))


def _tuple_of_floats(values: Any, what: str) -> tuple[float, ...]:
    if isinstance(values, Mapping):
        start, stop = float(values["start"]), float(values["stop"])
        count = int(values["count"])
        if count < 1:
            raise ConfigurationError(f"{what}: count must be positive")
        return tuple(float(x) for x in np.linspace(start, stop, count))
    try:
        return tuple(float(x) for x in values)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{what}: expected a list of numbers") from exc


def _ratio_list(values: Any) -> tuple[float, ...]:
    out = []
    for v in values:
        if isinstance(v, str) and v.strip().lower() in ("inf", "infinity"):
            out.append(math.inf)
        elif isinstance(v, float) and math.isinf(v):
            out.append(math.inf)
        else:
            out.append(float(parse_ratio(v)))
    return tuple(out)


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Read a YAML run description, apply flat overrides, validate.

    Overrides use the top-level key names (kernel, gamma, eta, rho, N, dv,
    r, T, ...); None values are ignored so CLI flags can pass through
    unconditionally.
    """
    data: dict[str, Any] = {}
    if path is not None:
        raw = Path(path).read_text()
        loaded = yaml.safe_load(raw)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, Mapping):
            raise ConfigurationError(f"{path}: config must be a mapping")
        data.update(loaded)
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value

    kernel = Kernel(str(data.get("kernel", "delta")).lower())
    v_max = float(data.get("v_max", 1.0))
    rho_max = float(data.get("rho_max", 1.0))
    eta = float(data.get("eta", 1.0))
    law = _law_from_mapping(data)

    n_cells = data.get("N")
    n_cells = int(n_cells) if n_cells is not None else None
    cell_width = data.get("dv")
    cell_width = float(cell_width) if cell_width is not None else None
    ratio_in = data.get("r")
    ratio = parse_ratio(ratio_in) if ratio_in is not None else None
    n_jumps = data.get("T")
    n_jumps = int(n_jumps) if n_jumps is not None else None
    ratio, n_jumps = _resolve_grid(v_max, n_cells, cell_width, ratio, n_jumps)

    params = ModelParams(
        v_max=v_max,
        rho_max=rho_max,
        delta_v=v_max / n_jumps,
        eta=eta,
        kernel=kernel,
    )

    rho = float(data["rho"]) if data.get("rho") is not None else None

    ic_data = data.get("initial_condition", {})
    if isinstance(ic_data, str):
        ic_data = {"kind": ic_data}
    initial = InitialCondition(
        kind=str(ic_data.get("kind", "uniform")),
        epsilon=float(ic_data.get("epsilon", 0.0)),
        cell=int(ic_data.get("cell", 1)),
        masses=tuple(float(x) for x in ic_data.get("masses", ())),
    )

    integ = data.get("integrator", {})
    integrator = IntegratorSettings(
        step=None if integ.get("step") is None else float(integ["step"]),
        t_end=float(integ.get("t_end", 50.0)),
        t_max=float(integ.get("t_max", 1e7)),
        residual_tol=float(integ.get("residual_tol", 1e-10)),
    )

    out = data.get("output", {})
    output = OutputSettings(
        directory=Path(out.get("directory", "out")),
        prefix=str(out.get("prefix", "run")),
    )

    diagram = None
    if "diagram" in data:
        d = data["diagram"]
        diagram = DiagramSettings(
            rho_grid=_tuple_of_floats(d.get("rho_grid", ()), "diagram.rho_grid"),
            ratios=_ratio_list(d.get("ratios", [1])),
            insert_critical=bool(d.get("insert_critical", True)),
            kink_threshold=float(d.get("kink_threshold", 0.2)),
        )

    convergence = None
    if "convergence" in data:
        c = data["convergence"]
        convergence = ConvergenceSettings(
            rho_set=_tuple_of_floats(c.get("rho_set", ()), "convergence.rho_set"),
            ratios=_ratio_list(c.get("ratios", [1, 2])),
            t_end=None if c.get("t_end") is None else float(c["t_end"]),
            workers=int(c.get("workers", data.get("workers", 1))),
        )

    return RunConfig(
        params=params,
        law=law,
        ratio=ratio,
        rho=rho,
        initial=initial,
        integrator=integrator,
        output=output,
        diagram=diagram,
        convergence=convergence,
        workers=int(data.get("workers", 1)),
    )


def build_initial_state(cfg: RunConfig, grid: VelocityGrid) -> np.ndarray:
    """Materialize the configured initial masses on a concrete grid."""
    n = grid.n_cells
    ic = cfg.initial
    rho = cfg.require_rho()
    if ic.kind == "uniform":
        return np.full(n, rho / n)
    if ic.kind == "all-at-rest":
        f = np.zeros(n)
        f[0] = rho
        return f
    if ic.kind == "congested":
        f = np.zeros(n)
        if n > 1:
            f[-1] = rho * (1.0 - ic.epsilon)
            f[:-1] = rho * ic.epsilon / (n - 1)
        else:
            f[0] = rho
        return f
    if ic.kind == "custom":
        f = np.asarray(ic.masses, dtype=float)
        if f.shape != (n,):
            raise ConfigurationError(
                f"custom vector has {f.size} entries, the grid has {n} cells"
            )
        if f.min() < 0:
            raise ConfigurationError("custom initial masses must be non-negative")
        total = f.sum()
        if rho > 0 and abs(total - rho) > 1e-9 * max(rho, 1.0):
            raise ConfigurationError(
                f"custom masses sum to {total!r}, declared rho is {rho!r}"
            )
        return f
    # equilibrium +/- perturbation
    if cfg.params.kernel is not Kernel.DELTA:
        raise ConfigurationError(
            "equilibrium initial conditions need the jump kernel's closed form"
        )
    ratio = cfg.require_ratio()
    if ratio.denominator != 1:
        raise ConfigurationError(
            "equilibrium initial conditions need an integer cells-per-jump ratio"
        )
    p = evaluate_probability(cfg.law, rho, cfg.params)
    eq = closed_form_equilibrium(rho, p, cfg.params.n_jumps)
    f = equilibrium_on_grid(
        eq, int(ratio), grid=grid, v_max=cfg.params.v_max
    ).masses.copy()
    if ic.cell > n:
        raise ConfigurationError(f"perturbation cell {ic.cell} beyond grid size {n}")
    f[ic.cell - 1] += ic.epsilon
    if f[ic.cell - 1] < 0:
        raise ConfigurationError("perturbation drives a cell mass negative")
    return f
