"""Velocity grids and interaction tensors against from-scratch oracles.

The jump-kernel builder is checked entrywise against exact rational interval
geometry, the spread-kernel builder against adaptive quadrature of its
defining kernel plus closed-form spot values, and both against the
column-stochasticity contract.
"""
import io
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinetic_traffic import (
    ConfigurationError,
    GridRatio,
    Kernel,
    ModelParams,
    VelocityGrid,
    build_chi_tensor,
    build_delta_tensor_generic,
    build_delta_tensor_integer,
    build_grid,
    dump_tensor,
    verify_stochasticity,
)

from _oracles import chi_accel_quad, delta_accel_exact

# integer ladders plus non-integer ratios, including half-integer ties
INTEGER_CASES = [(t, Fraction(r)) for t in (1, 3, 5) for r in (1, 2, 4, 20)]
GENERIC_CASES = [
    (3, Fraction(14, 3)),
    (2, Fraction(7, 2)),
    (4, Fraction(7, 2)),
    (3, Fraction(8, 3)),
    (5, Fraction(9, 5)),
    (2, Fraction(3, 2)),
    (4, Fraction(5, 2)),
    (3, Fraction(4, 3)),
    (3, Fraction(5, 3)),
]
P_VALUES = (0.0, 0.3, 0.85, 1.0)


def make_grid(t_jumps: int, r: Fraction) -> VelocityGrid:
    n = r * t_jumps + 1
    assert n.denominator == 1
    return VelocityGrid(n_cells=int(n), v_max=1.0)


class TestVelocityGrid:
    def test_coarse_ladder(self):
        params = ModelParams(delta_v=1.0 / 3.0)
        grid, ratio = build_grid(params, 1)
        assert grid.n_cells == 4
        assert grid.dv == pytest.approx(1.0 / 3.0)
        assert grid.centers == pytest.approx([1 / 12, 1 / 3, 2 / 3, 11 / 12])
        assert ratio.is_integer and ratio.r == 1

    def test_refined_ladder(self):
        grid, _ = build_grid(ModelParams(delta_v=1.0 / 3.0), 4)
        assert grid.n_cells == 13
        assert grid.dv == pytest.approx(1.0 / 12.0)

    def test_smallest_grid_is_two_half_cells(self):
        grid, _ = build_grid(ModelParams(delta_v=1.0), 1)
        assert grid.n_cells == 2
        assert grid.widths == pytest.approx([0.5, 0.5])
        assert grid.centers == pytest.approx([0.25, 0.75])

    def test_boundary_cells_are_half_width(self):
        grid = VelocityGrid(n_cells=16, v_max=1.0)
        assert grid.widths[0] == pytest.approx(grid.dv / 2)
        assert grid.widths[-1] == pytest.approx(grid.dv / 2)
        assert grid.widths.sum() == pytest.approx(1.0)
        assert grid.centers[0] == pytest.approx(grid.dv / 4)
        assert grid.centers[-1] == pytest.approx(1.0 - grid.dv / 4)

    def test_fractional_cell_count_rejected(self):
        with pytest.raises(ConfigurationError):
            build_grid(ModelParams(delta_v=1.0 / 3.0), Fraction(7, 2))
        with pytest.raises(ConfigurationError):
            build_grid(ModelParams(delta_v=0.2), 1.01)

    def test_non_positive_ratio_rejected(self):
        with pytest.raises(ConfigurationError):
            build_grid(ModelParams(delta_v=0.5), 0)


class TestGridRatio:
    def test_half_offsets(self):
        tie = GridRatio(Fraction(7, 2))
        assert (tie.r, tie.r_plus, tie.r_minus) == (3.5, 4.0, 3.0)
        assert not tie.is_integer
        four = GridRatio(Fraction(4))
        assert four.is_integer and four.r_plus == 4.5 and four.r_minus == 3.5

    def test_from_value_accepts_exact_floats(self):
        assert GridRatio.from_value(3.5).fraction == Fraction(7, 2)
        assert GridRatio.from_value(4).fraction == Fraction(4)
        assert GridRatio.from_value(Fraction(14, 3)).fraction == Fraction(14, 3)


class TestJumpTensorAgainstGeometry:
    """Builder entries must equal the exact rational interval weights."""

    @pytest.mark.parametrize("t_jumps,r", INTEGER_CASES + GENERIC_CASES)
    def test_acceleration_weights_exact(self, t_jumps, r):
        grid = make_grid(t_jumps, r)
        n = grid.n_cells
        oracle = delta_accel_exact(n, r)
        want = np.zeros((n, n))
        for (j, h), w in oracle.items():
            want[j - 1, h - 1] = float(w)
        for p in P_VALUES:
            tensor = build_delta_tensor_generic(grid, GridRatio(r), p)
            assert np.abs(tensor.accel - p * want).max() <= 1e-15
            if p > 0:
                got_support = set(zip(*np.nonzero(tensor.accel)))
                assert got_support == {(j - 1, h - 1) for j, h in oracle}

    @pytest.mark.parametrize("t_jumps,r", INTEGER_CASES)
    def test_generic_builder_reduces_to_integer_builder(self, t_jumps, r):
        grid = make_grid(t_jumps, r)
        for p in P_VALUES:
            gen = build_delta_tensor_generic(grid, GridRatio(r), p)
            fix = build_delta_tensor_integer(grid, GridRatio(r), p)
            assert np.array_equal(gen.accel, fix.accel)

    def test_known_matrix_rows(self):
        # N=4, r=1, P=0.4: second matrix's acceleration row is P everywhere
        grid = VelocityGrid(n_cells=4, v_max=1.0)
        tensor = build_delta_tensor_integer(grid, GridRatio(Fraction(1)), 0.4)
        a2 = tensor.matrix(2)
        assert a2[0] == pytest.approx([0.4, 0.4, 0.4, 0.4], abs=1e-15)
        a1 = tensor.matrix(1)
        expect = np.zeros((4, 4))
        expect[0, :] = 0.6
        expect[:, 0] = 0.6
        assert a1 == pytest.approx(expect, abs=1e-15)

    @pytest.mark.parametrize("t_jumps,r", [(3, 2), (5, 4), (3, 4)])
    def test_sparsity_pattern_of_interior_matrices(self, t_jumps, r):
        grid = make_grid(t_jumps, Fraction(r))
        tensor = build_delta_tensor_integer(grid, GridRatio(Fraction(r)), 0.3)
        n = grid.n_cells
        for j in range(r + 1, n):  # interior: acceleration row present, j < N
            a = tensor.matrix(j)
            allowed = np.zeros((n, n), dtype=bool)
            allowed[j - 1, j - 1 :] = True  # braking into own row tail
            allowed[j - 1 :, j - 1] = True  # braking into own column tail
            allowed[j - 1 - r, :] = True  # quantized acceleration source row
            assert not np.any(a[~allowed])
            # neighbours of the acceleration row stay empty
            assert not np.any(a[j - r, : j - 1])
            if j >= r + 2:
                assert not np.any(a[j - 2 - r, :])

    def test_mass_lands_somewhere(self):
        # each column of the stacked tensor is a probability distribution
        grid = make_grid(3, Fraction(14, 3))
        tensor = build_delta_tensor_generic(grid, GridRatio(Fraction(14, 3)), 0.85)
        dense = tensor.to_dense()
        assert dense.min() >= 0.0
        assert np.abs(dense.sum(axis=0) - 1.0).max() <= 1e-12


class TestSpreadTensorAgainstQuadrature:
    @pytest.mark.parametrize("t_jumps,r", [(1, 1), (3, 1), (3, 2), (5, 2), (3, 4), (1, 20)])
    def test_acceleration_weights_match_quadrature(self, t_jumps, r):
        grid = make_grid(t_jumps, Fraction(r))
        tensor = build_chi_tensor(grid, GridRatio(Fraction(r)), 0.7)
        ref = 0.7 * chi_accel_quad(grid.n_cells, r)
        assert np.abs(tensor.accel - ref).max() <= 1e-12

    @pytest.mark.parametrize("r", [1, 2, 20])
    def test_closed_form_spot_values(self, r):
        p = 0.6
        n = 3 * r + 1
        grid = VelocityGrid(n_cells=n, v_max=1.0)
        a = build_chi_tensor(grid, GridRatio(Fraction(r)), p).accel
        assert a[0, 0] == pytest.approx(p / (4 * r), rel=1e-12)
        assert a[r, 0] == pytest.approx(3 * p / (4 * r), rel=1e-12)
        assert a[n - 1, n - 1] == pytest.approx(p, rel=1e-12)
        # top-row coefficient of the last saturating source cell
        log_w = p * (1 / (8 * r) + 0.5 * math.log(2 * r / (2 * r - 1)))
        assert a[n - 1, n - 1 - r] == pytest.approx(log_w, rel=1e-12)
        if r >= 2:
            # one cell below the top the log weight is ratio-independent
            assert a[n - 1, n - 2] == pytest.approx(p * 0.5 * math.log(3.0), rel=1e-12)

    def test_two_cell_grid_saturates_immediately(self):
        grid = VelocityGrid(n_cells=2, v_max=1.0)
        a = build_chi_tensor(grid, GridRatio(Fraction(1)), 0.5).accel
        assert a[0, 0] == pytest.approx(0.5 * (1.0 - math.log(2.0)), rel=1e-12)

    def test_pure_braking_collapses_to_jump_kernel(self):
        grid = VelocityGrid(n_cells=7, v_max=1.0)
        chi = build_chi_tensor(grid, GridRatio(Fraction(2)), 0.0)
        delta = build_delta_tensor_integer(grid, GridRatio(Fraction(2)), 0.0)
        assert np.array_equal(chi.to_dense(), delta.to_dense())

    @pytest.mark.parametrize("r", [2, 10, 50])
    def test_first_matrix_approaches_jump_kernel(self, r):
        # only the self-weight p/(4r) separates the two bottom matrices
        p = 0.85
        grid = VelocityGrid(n_cells=2 * r + 1, v_max=1.0)
        chi = build_chi_tensor(grid, GridRatio(Fraction(r)), p)
        delta = build_delta_tensor_integer(grid, GridRatio(Fraction(r)), p)
        gap = np.abs(chi.matrix(1) - delta.matrix(1)).max()
        assert gap == pytest.approx(p / (4 * r), rel=1e-12)


class TestStochasticity:
    @pytest.mark.parametrize("t_jumps,r", GENERIC_CASES)
    def test_generic_ratios_close_the_balance(self, t_jumps, r):
        grid = make_grid(t_jumps, r)
        tensor = build_delta_tensor_generic(grid, GridRatio(r), 0.85)
        report = verify_stochasticity(tensor)
        assert report.passed and report.max_deviation <= 1e-12

    def test_injected_fault_is_located(self):
        grid = VelocityGrid(n_cells=4, v_max=1.0)
        tensor = build_delta_tensor_integer(grid, GridRatio(Fraction(1)), 0.4)
        dense = tensor.to_dense().copy()
        dense[1, 2, 3] += 1e-6
        report = verify_stochasticity(dense)
        assert not report.passed
        assert report.worst_pair == (3, 4)
        assert report.max_deviation == pytest.approx(1e-6, rel=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(
        t_jumps=st.integers(1, 4),
        r=st.integers(1, 5),
        p=st.floats(0.0, 1.0),
    )
    def test_random_lattice_properties(self, t_jumps, r, p):
        grid = VelocityGrid(n_cells=r * t_jumps + 1, v_max=1.0)
        for builder in (build_delta_tensor_integer, build_chi_tensor):
            tensor = builder(grid, GridRatio(Fraction(r)), p)
            assert tensor.to_dense().min() >= 0.0
            assert verify_stochasticity(tensor).max_deviation <= 1e-12


class TestDump:
    def test_csv_shape_and_determinism(self):
        grid = VelocityGrid(n_cells=4, v_max=1.0)
        tensor = build_delta_tensor_integer(grid, GridRatio(Fraction(1)), 0.4)
        buf_a, buf_b = io.StringIO(), io.StringIO()
        dump_tensor(tensor, buf_a)
        dump_tensor(tensor, buf_b)
        assert buf_a.getvalue() == buf_b.getvalue()
        lines = buf_a.getvalue().strip().splitlines()
        assert lines[0] == "j,h,k,value"
        assert lines[1].startswith("1,1,1,")

    def test_threshold_filters_small_entries(self):
        grid = VelocityGrid(n_cells=4, v_max=1.0)
        tensor = build_delta_tensor_integer(grid, GridRatio(Fraction(1)), 0.4)
        buf = io.StringIO()
        dump_tensor(tensor, buf, threshold=0.5)
        body = buf.getvalue().strip().splitlines()[1:]
        values = [float(line.split(",")[3]) for line in body]
        assert values and min(values) > 0.5
