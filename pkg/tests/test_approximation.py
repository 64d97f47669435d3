import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppde.approximation import (
    BackendError,
    ConvergenceReport,
    LadderTable,
    approximate_solution,
    classical_consistency,
    grid_independence,
    halving_ratios,
    level_value,
    modulus_check,
    stability_experiment,
    write_csv,
)
from ppde.generators import heat, semilinear, terminal_power, terminal_semilinear
from ppde.slab_pde import SolverConfig
from ppde.timegrid import AtomicMeasure, GridSequence, Path, TimeGrid

CFG = SolverConfig(dx=0.05, radius=5.0)


def synthetic(limit, c, p, levels=(1, 2, 3, 4, 5)):
    meshes = [2.0**-n for n in levels]
    return ConvergenceReport(list(levels), meshes, [limit + c * h**p for h in meshes])


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 10), st.floats(0.3, 3))
def test_rate_and_limit_recovered(limit, c, p):
    rep = synthetic(limit, c, p)
    assert rep.rate.slope == pytest.approx(p, abs=1e-6)
    assert rep.rate.residual < 1e-8
    assert rep.limit == pytest.approx(limit, abs=1e-8 * (1 + c))


def test_linear_gaps_unit_slope():
    assert synthetic(0.0, 1.0, 1.0).rate.slope == pytest.approx(1.0, abs=1e-6)


def test_zero_gaps_flag_infinite_rate():
    rep = ConvergenceReport([1, 2, 3], [0.5, 0.25, 0.125], [2.0, 2.0, 2.0])
    assert rep.rate.infinite and rep.path_free and rep.rate_ok
    assert rep.limit == 2.0 and rep.gap_bound == 0.0


def test_rate_needs_three_levels():
    rep = ConvergenceReport([1, 2], [0.5, 0.25], [1.0, 1.1])
    assert rep.rate is None and rep.limit == 1.1
    with pytest.raises(ValueError):
        ConvergenceReport([2, 1], [0.25, 0.5], [1.0, 1.0])


def test_rows_schema():
    rows = synthetic(1.0, 1.0, 1.0, (1, 2, 3)).rows()
    assert list(rows[0]) == ["n", "mesh", "t", "path_id", "value", "gap_prev", "se_if_mc"]
    assert rows[0]["gap_prev"] == "" and rows[1]["gap_prev"] == pytest.approx(0.25)


def test_path_free_instance_has_identical_levels():
    rep = approximate_solution(heat(), terminal_power(2), GridSequence.dyadic(), (0.0, Path.constant(0.0)),
                               [1, 2, 3], cfg=CFG)
    assert max(rep.gaps) < 1e-9
    assert rep.path_free


def test_exact_backend_limits():
    g = GridSequence.dyadic()
    with pytest.raises(BackendError):
        level_value(heat(), terminal_power(2), g.level(3), (0.0, Path.constant(0.0)), "exact", CFG)
    with pytest.raises(BackendError):
        level_value(heat(), terminal_power(2), g.level(1), (0.0, Path.constant(0.0)), "nope", CFG)


def test_identical_sequences_no_discrepancy():
    lam = AtomicMeasure.atoms([0.5, 1.0], [0.5, 0.5])
    F, g = semilinear(lam), terminal_semilinear(lam)
    res = grid_independence(F, g, GridSequence.dyadic(), GridSequence.dyadic(), [(0.5, Path.constant(0.2))],
                            [1, 2, 3], [1, 2, 3], cfg=SolverConfig(dx=0.05, s_nodes=101))
    assert res.discrepancy == 0.0 and res.passed


def test_ladder_skips_zero_denominator():
    t = LadderTable([1, 2, 3], [0.0, 1.0, 2.0], [0.0, 1.0, 1.0])
    assert math.isnan(t.ratios[0])
    assert t.variation == 2.0 and t.bound == 2.0


def test_modulus_of_linear_functional():
    # u(t, x) = x(t): space ratio is exactly 1, time ratio 0
    rep = modulus_check(lambda t, x: float(x.at(t)[0]), 0.5, Path.constant(0.3), Path.constant(1.0),
                        [0.4, 0.2, 0.1], [0.2, 0.1])
    np.testing.assert_allclose(rep.space.ratios, 1.0)
    np.testing.assert_allclose(rep.time.numerators, 0.0)
    assert rep.bounded()
    end = modulus_check(lambda t, x: t, 1.0, Path.constant(0.0), Path.constant(1.0), [0.1], [0.25, 0.5],
                        anchor="end")
    np.testing.assert_allclose(end.time.ratios, [0.5, math.sqrt(0.5)])


def test_shift_family_gap_is_exact():
    F, g = heat(), terminal_power(2)
    rows = stability_experiment(lambda k: (F, g.shifted(1.0 / k)), [2, 4, 8], (F, g), (0.0, Path.constant(0.0)),
                                TimeGrid.uniform(1.0, 2), CFG)
    assert math.isinf(rows[0].k)
    for r in rows[1:]:
        assert r.gap == pytest.approx(1.0 / r.k, abs=1e-12)
    np.testing.assert_allclose(halving_ratios(rows), 2.0)


def test_classical_heat_square():
    rep = classical_consistency(heat(), terminal_power(2), lambda t, x: float(x.at(t)[0]) ** 2 + 1 - t,
                                [(0.0, Path.constant(0.0)), (0.5, Path.constant(0.4))], GridSequence.dyadic(),
                                [1, 2], CFG)
    assert rep.finest_gap < 1e-6


def test_csv_repr_floats(tmp_path):
    fn = tmp_path / "out.csv"
    write_csv([{"a": 0.1, "b": "x"}, {"a": 1 / 3, "b": ""}], fn)
    rows = list(csv.DictReader(open(fn)))
    assert float(rows[1]["a"]) == 1 / 3
