"""Velocity grid and discrete interaction tensors.

The velocity range [0, v_max] is split into N cells: two half-width cells
at the ends and N-2 full cells of width dv in between, so that the speeds
0, dv, 2*dv, ..., v_max are cell centers (the end speeds sit a quarter-cell
inside their half cells).  A binary interaction maps a candidate speed in
cell h and a field speed in cell k to a distribution over output cells j;
collecting those probabilities gives N matrices A^j whose entries are
nonnegative and sum to 1 over j for every (h, k) pair.

Braking and keep-speed terms are identical for both kernels and contribute
(1 - P) to every (h, k) pair.  Acceleration contributes weight P spread
over candidate rows only (field-independent), stored here as a dense
(N, N) weight matrix `accel` with accel[j, h] = acceleration probability
mass sent from candidate cell h to output cell j.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import IO, Iterable, Union

import numpy as np

from .params import ConfigurationError, Kernel, ModelParams

__all__ = [
    "VelocityGrid",
    "GridRatio",
    "InteractionTensor",
    "StochasticityReport",
    "build_grid",
    "build_delta_tensor_integer",
    "build_delta_tensor_generic",
    "build_chi_tensor",
    "verify_stochasticity",
    "dump_tensor",
]


@dataclass(frozen=True)
class VelocityGrid:
    """Partition of [0, v_max] into N velocity cells.

    Cell j (1-based) spans [(j - 3/2) dv, (j - 1/2) dv] clipped to the
    range, so cells 1 and N have width dv/2 and centers dv/4 and
    v_max - dv/4; interior centers are (j - 1) dv.
    """

    n_cells: int
    v_max: float

    def __post_init__(self):
        if self.n_cells < 2:
            raise ConfigurationError("grid needs at least 2 cells")
        if self.v_max <= 0:
            raise ConfigurationError("v_max must be positive")

    @property
    def dv(self) -> float:
        return self.v_max / (self.n_cells - 1)

    @property
    def cells(self) -> list[tuple[float, float]]:
        dv = self.dv
        out = []
        for j in range(1, self.n_cells + 1):
            lo = max((j - 1.5) * dv, 0.0)
            hi = min((j - 0.5) * dv, self.v_max)
            out.append((lo, hi))
        return out

    @property
    def centers(self) -> np.ndarray:
        dv = self.dv
        c = np.arange(self.n_cells, dtype=float) * dv
        c[0] = 0.25 * dv
        c[-1] = self.v_max - 0.25 * dv
        return c

    @property
    def widths(self) -> np.ndarray:
        w = np.full(self.n_cells, self.dv)
        w[0] = w[-1] = 0.5 * self.dv
        return w


@dataclass(frozen=True)
class GridRatio:
    """Ratio r = delta_v / dv between the speed jump and the cell width.

    Carried as an exact Fraction so that the ceiling arithmetic in the
    generic-ratio tensor builder has no floating-point tie hazards (r equal
    to an integer plus one half is an exact tie case).
    """

    fraction: Fraction

    def __post_init__(self):
        if self.fraction <= 0:
            raise ConfigurationError("grid ratio r must be positive")

    @classmethod
    def from_value(cls, r: Union[int, float, Fraction]) -> "GridRatio":
        if isinstance(r, Fraction):
            return cls(r)
        if isinstance(r, int):
            return cls(Fraction(r))
        frac = Fraction(r).limit_denominator(10**9)
        if abs(float(frac) - r) > 1e-9 * max(1.0, abs(r)):
            raise ConfigurationError(f"grid ratio {r!r} is not a usable rational")
        return cls(frac)

    @property
    def r(self) -> float:
        return float(self.fraction)

    @property
    def r_plus(self) -> float:
        return float(self.fraction + Fraction(1, 2))

    @property
    def r_minus(self) -> float:
        return float(self.fraction - Fraction(1, 2))

    @property
    def is_integer(self) -> bool:
        return self.fraction.denominator == 1


@dataclass(frozen=True)
class StochasticityReport:
    """Worst column-sum deviation over all (h, k) pairs, 1-based indices."""

    max_deviation: float
    worst_pair: tuple[int, int]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tol


@dataclass(frozen=True)
class InteractionTensor:
    """The N interaction matrices of one kernel at one braking level.

    Entry (h, k) of matrix j is the probability that a candidate in cell h
    meeting a field vehicle in cell k leaves the interaction in cell j.
    Matrix j decomposes as a braking/keep-speed part, identical for both
    kernels -- weight (1 - p) on entry (j, j), on row j for columns k > j,
    and on column j for rows h > j -- plus a field-independent acceleration
    part: weight accel[j, h] on every entry of row h.
    """

    kernel: Kernel
    p: float
    grid: VelocityGrid
    accel: np.ndarray  # (N, N), [j-1, h-1], acceleration weight with P baked in

    def __post_init__(self):
        n = self.grid.n_cells
        if self.accel.shape != (n, n):
            raise ConfigurationError("acceleration weight matrix shape mismatch")

    @property
    def n_cells(self) -> int:
        return self.grid.n_cells

    def matrix(self, j: int) -> np.ndarray:
        """Dense matrix A^j for 1-based output-cell index j."""
        n = self.n_cells
        if not 1 <= j <= n:
            raise ConfigurationError(f"matrix index {j} outside 1..{n}")
        a = np.zeros((n, n))
        i = j - 1
        one_minus_p = 1.0 - self.p
        a[i, i:] = one_minus_p
        a[i:, i] = one_minus_p
        a += self.accel[i][:, None]
        return a

    def to_dense(self) -> np.ndarray:
        """Full (N, N, N) array indexed [j, h, k], all 0-based."""
        return np.stack([self.matrix(j) for j in range(1, self.n_cells + 1)])

    def quadratic_forms(self, f: np.ndarray) -> np.ndarray:
        """Vector of f^T A^j f for all j, computed from the sparse structure."""
        f = np.asarray(f, dtype=float)
        total = f.sum()
        above = np.concatenate((np.cumsum(f[::-1])[::-1][1:], [0.0]))
        braking = (1.0 - self.p) * f * (f + 2.0 * above)
        return braking + (self.accel @ f) * total


def build_grid(params: ModelParams, r: Union[int, float, Fraction]) -> tuple[VelocityGrid, GridRatio]:
    """Velocity grid with N = r*T + 1 cells plus the exact grid ratio.

    T = v_max/delta_v comes from the parameters; r may be fractional as
    long as r*T is an integer (so the last cell edge lands on v_max).
    """
    ratio = GridRatio.from_value(r)
    t = params.n_jumps
    n_minus_1 = ratio.fraction * t
    if n_minus_1.denominator != 1:
        raise ConfigurationError(
            f"r*T = {ratio.fraction} * {t} is not an integer; no such grid"
        )
    n = int(n_minus_1) + 1
    if n < 2:
        raise ConfigurationError("grid needs at least 2 cells")
    return VelocityGrid(n_cells=n, v_max=params.v_max), ratio


def _check_probability(p: float):
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"probability P={p!r} outside [0, 1]")


def build_delta_tensor_integer(grid: VelocityGrid, ratio: GridRatio, p: float) -> InteractionTensor:
    """Jump-kernel tensor for integer grid ratio.

    A candidate in cell h accelerates to cell h + r, except that every cell
    within r of the top saturates into cell N.  So matrix j (r < j < N)
    has acceleration weight P on row j - r, and matrix N collects rows
    N - r .. N.
    """
    _check_probability(p)
    if not ratio.is_integer:
        raise ConfigurationError("integer-ratio builder called with fractional r")
    n = grid.n_cells
    r = int(ratio.fraction)
    if r > n - 1:
        raise ConfigurationError(f"jump spans {r} cells but the grid has only {n}")
    accel = np.zeros((n, n))
    for j in range(r + 1, n):  # 1-based output cells r+1 .. N-1
        accel[j - 1, j - 1 - r] = p
    accel[n - 1, n - 1 - r:] += p
    return InteractionTensor(kernel=Kernel.DELTA, p=p, grid=grid, accel=accel)


def build_delta_tensor_generic(grid: VelocityGrid, ratio: GridRatio, p: float) -> InteractionTensor:
    """Jump-kernel tensor for any rational grid ratio r >= 1.

    When the jump is not a whole number of cells, the image of cell h under
    v -> v + delta_v straddles two cells, splitting the acceleration weight
    by the exact overlap lengths.  The split coefficients are assembled
    here in exact rational arithmetic (the ceiling expressions have ties at
    half-integer r) and reduce bit-for-bit to the integer builder when r is
    whole.  The top matrix accumulates every candidate within one jump of
    full speed, weighted by how much of its cell saturates.
    """
    _check_probability(p)
    rf = ratio.fraction
    if rf < 1:
        raise ConfigurationError(
            "generic-ratio builder requires r >= 1 (jump at least one cell wide)"
        )
    n = grid.n_cells
    if rf > n - 1:
        raise ConfigurationError(f"jump spans {float(rf)} cells but the grid has only {n}")
    half = Fraction(1, 2)
    cp = math.ceil(rf + half)   # cell index containing speed dv/4 + delta_v's cell top
    cm = math.ceil(rf - half)
    cr = math.ceil(rf)
    tie_hi = cr == cp           # r exactly half past an integer (or integer r: False)
    tie_lo = cr == cm           # integer r, or r within (k-1/2, k]

    w: dict[tuple[int, int], Fraction] = {}

    def add(j: int, h: int, weight: Fraction):
        if weight != 0:
            w[(j, h)] = w.get((j, h), Fraction(0)) + weight

    # First output cell receiving accelerated mass: the bottom half-cell's
    # image [delta_v, delta_v + dv/2] meets cells cm(+1) depending on ties.
    if cp <= n - 1:
        add(cp, 1, 2 * min(half, cp - half - rf))
        if tie_lo:
            add(cp, 2, cm - rf)
    for j in range(cp + 1, n):  # interior output cells past the first image cell
        lead = Fraction(1 + rf - cr)
        if tie_hi and j == cp + 1:
            lead *= 2
        add(j, j - cr, lead)
        add(j, j - cr + 1, Fraction(cr - rf))
    # Top cell: everything whose image pokes past v_max - dv/2.
    if tie_hi:
        add(n, n - cp, rf - cm)
        add(n, n - cm, cp - half - rf)
    if tie_lo:
        add(n, n - cm, half)
    add(n, n - cm, rf - cm + half)
    for h in range(n - cp + 2, n + 1):
        add(n, h, Fraction(1))

    accel = np.zeros((n, n))
    for (j, h), weight in w.items():
        if not (1 <= j <= n and 1 <= h <= n):
            raise ConfigurationError(
                f"acceleration weight out of range: output {j}, candidate {h}"
            )
        if weight < 0:
            raise ConfigurationError(f"negative acceleration weight at ({j}, {h})")
        accel[j - 1, h - 1] += p * float(weight)
    return InteractionTensor(kernel=Kernel.DELTA, p=p, grid=grid, accel=accel)


def build_chi_tensor(grid: VelocityGrid, ratio: GridRatio, p: float) -> InteractionTensor:
    """Spread-kernel tensor (accelerated speed uniform over the jump window).

    Derived by integrating the defining kernel exactly over each candidate
    cell: for candidate speed x below v_max - delta_v the output is uniform
    on [x, x + delta_v] (overlap of that window with cell j is piecewise
    linear in x, integrated as exact trapezoids); above it the output is
    uniform on the shrinking window [x, v_max], giving logarithmic weights.
    Valid for every integer r >= 1 and any N >= r + 1, including grids too
    small for the saturated and unsaturated index ranges to stay disjoint.
    """
    _check_probability(p)
    if not ratio.is_integer:
        raise ConfigurationError("spread-kernel tensor requires integer r")
    n = grid.n_cells
    r = int(ratio.fraction)
    if not 1 <= r <= n - 1:
        raise ConfigurationError(f"jump of {r} cells incompatible with {n}-cell grid")
    m = n - 1              # v_max in units of dv
    sat = m - r            # candidate speeds above this saturate at v_max

    def edges(j: int) -> tuple[float, float]:
        return (max(j - 1.5, 0.0), min(j - 0.5, float(m)))

    accel = np.zeros((n, n))
    for h in range(1, n + 1):
        lo_h, hi_h = edges(h)
        width_h = hi_h - lo_h
        for j in range(h, n + 1):  # acceleration never lowers the speed
            lo_j, hi_j = edges(j)
            total = 0.0
            # Unsaturated part: window overlap is piecewise linear with
            # breakpoints where the window edge crosses a cell edge.
            a, b = lo_h, min(hi_h, sat)
            if b > a:
                pts = sorted({a, b, *(
                    q for q in (lo_j - r, hi_j - r, lo_j, hi_j) if a < q < b
                )})
                part = 0.0
                for x1, x2 in zip(pts, pts[1:]):
                    w1 = max(0.0, min(x1 + r, hi_j) - max(x1, lo_j))
                    w2 = max(0.0, min(x2 + r, hi_j) - max(x2, lo_j))
                    part += 0.5 * (w1 + w2) * (x2 - x1)
                total += part / r
            # Saturated part: output uniform on [x, m], density 1/(m - x).
            a, b = max(lo_h, sat), hi_h
            if b > a:
                pts = sorted({a, b, *(q for q in (lo_j, hi_j) if a < q < b)})
                part = 0.0
                for x1, x2 in zip(pts, pts[1:]):
                    if x2 <= lo_j:
                        part += (hi_j - lo_j) * math.log((m - x1) / (m - x2))
                    elif x1 >= lo_j and x2 <= hi_j:
                        part += x2 - x1
                        if hi_j < m:
                            part -= (m - hi_j) * math.log((m - x1) / (m - x2))
                    # segments beyond hi_j contribute nothing
                total += part
            if total:
                accel[j - 1, h - 1] = p * total / width_h
    return InteractionTensor(kernel=Kernel.CHI, p=p, grid=grid, accel=accel)


def verify_stochasticity(
    tensor: Union[InteractionTensor, np.ndarray], tol: float = 1e-12
) -> StochasticityReport:
    """Check that the matrices sum to one over the output index.

    Accepts either a built tensor or a raw (N, N, N) array indexed
    [j, h, k] (used by fault-injection tests).  Reports the worst (h, k)
    pair with 1-based indices.
    """
    dense = tensor.to_dense() if isinstance(tensor, InteractionTensor) else np.asarray(tensor)
    if dense.ndim != 3 or dense.shape[0] != dense.shape[1] or dense.shape[1] != dense.shape[2]:
        raise ConfigurationError(f"expected (N, N, N) tensor, got shape {dense.shape}")
    sums = dense.sum(axis=0)
    dev = np.abs(sums - 1.0)
    h, k = np.unravel_index(int(np.argmax(dev)), dev.shape)
    return StochasticityReport(
        max_deviation=float(dev[h, k]),
        worst_pair=(int(h) + 1, int(k) + 1),
        tol=tol,
    )


def dump_tensor(tensor: InteractionTensor, stream: IO[str], threshold: float = 0.0):
    """Write nonzero entries as 'j,h,k,value' lines (1-based indices)."""
    dense = tensor.to_dense()
    stream.write("j,h,k,value\n")
    for j, h, k in zip(*np.nonzero(np.abs(dense) > threshold)):
        stream.write(f"{j + 1},{h + 1},{k + 1},{dense[j, h, k]:.17g}\n")
