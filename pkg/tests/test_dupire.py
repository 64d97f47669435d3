import math

import numpy as np
import pytest

from ppde.dupire import (
    DerivativeEstimate,
    Ladder,
    atom_jump,
    bump,
    derivative_certificates,
    generator_form,
    lift_gradient,
    regularity_certificates,
    smooth_terminal,
    structure_condition_probe,
    vertical_derivative,
)
from ppde.generators import black_box, bsb, controlled_drift, heat, semilinear, terminal_from_callable, terminal_integral, terminal_logcosh, terminal_power
from ppde.slab_pde import SolverConfig, solve_vn_lift
from ppde.timegrid import PL, AtomicMeasure, GridSequence, Path, TimeGrid

ATOMS = AtomicMeasure.atoms([0.5, 1.0], [0.5, 0.5])


def test_bump_variants():
    x = Path.from_function(lambda s: s, [0.0, 1.0], PL)
    a = bump(x, 0.5, 0.1, "interval")
    b = bump(x, 0.5, 0.1, "shift")
    assert float(a.at(0.5)[0]) == pytest.approx(0.6) and float(b.at(0.5)[0]) == pytest.approx(0.6)
    assert float(a.at(0.9)[0]) == pytest.approx(0.6)
    assert float(b.at(0.9)[0]) == pytest.approx(1.0)
    assert float(a.at(0.3)[0]) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        bump(x, 0.5, 0.1, "sideways")


def test_derivative_of_current_value():
    est = vertical_derivative(lambda t, x: float(x.at(t)[0]), 0.4, Path.constant(0.7))
    assert est.value == pytest.approx(1.0, abs=1e-12)
    assert est.proxy == pytest.approx(0.0, abs=1e-10)
    assert est.accepted


def test_derivative_of_running_integral_vanishes():
    lam = AtomicMeasure.lebesgue(1.0)

    def u(t, x):
        return float(lam.integrate(x, 0.0, t)[0])

    est = vertical_derivative(u, 0.6, Path.constant(0.2))
    assert est.value == pytest.approx(0.0, abs=1e-10)


def test_derivative_of_heat_square():
    grid = TimeGrid.uniform(1.0, 2)

    def u(t, x):
        return solve_vn_lift(heat(), terminal_power(2), grid, (t, x), SolverConfig(dx=0.02)).value

    est = vertical_derivative(u, 0.25, Path.constant(1.0))
    assert est.value == pytest.approx(2.0, abs=1e-2)
    assert est.accepted


def test_estimate_rejects_negative_proxy():
    with pytest.raises(ValueError):
        DerivativeEstimate(1.0, 0.1, proxy=-1.0)
    assert not DerivativeEstimate(1.0, 0.1, proxy=0.5).accepted


def test_smoothing_keeps_summary_and_is_close():
    g = terminal_logcosh(ATOMS)
    gn = smooth_terminal(g, 1e-3)
    assert gn.summary is not None and gn.measure is g.measure
    x = Path.constant(0.4)
    assert gn.evaluate(x) == pytest.approx(g.evaluate(x), abs=1e-6)
    with pytest.raises(ValueError):
        smooth_terminal(terminal_power(2))


def test_smoothed_logcosh_certificates():
    grid = GridSequence.dyadic().level(2)
    gn = smooth_terminal(terminal_logcosh(ATOMS))
    rep = derivative_certificates(gn, grid, samples=32, lipschitz=1.0, curvature=1.0)
    assert rep.passed, rep.failures()
    ids = {r.check_id for r in rep.rows}
    assert any(i.startswith("d1_slot") for i in ids) and any(i.startswith("d2_slot") for i in ids)


def test_structure_probe_examples():
    grid = TimeGrid.uniform(1.0, 4)
    ok = structure_condition_probe(terminal_logcosh(), grid)
    assert ok.status == "ok"
    assert ok.pairs[(1, 2)] == pytest.approx(0.5)
    assert ok.pairs[(1, 3)] == pytest.approx(1.0)
    assert ok.pairs[(2, 3)] == pytest.approx(1.0)
    assert structure_condition_probe(terminal_power(1), grid).status == "degenerate"
    mixed = terminal_from_callable(lambda x: float(x.at(0.25)[0] * x.at(1.0)[0]), "x_quarter_times_xT")
    bad = structure_condition_probe(mixed, grid, samples=16)
    assert bad.status == "fails" and bad.witness


def test_ladder_helpers():
    lad = Ladder([0.4, 0.2, 0.1], [1.0, 2.0, 0.0])
    assert lad.bound == 2.0
    assert lad.variation() == 2.0 and lad.stable(2.0)
    assert lad.constant([0.2, 0.1]) == 2.0
    assert Ladder([0.1], [math.nan]).variation() == math.inf


def test_constant_gradient_has_zero_ratios():
    rep, ladders = regularity_certificates(lambda t, x: 1.0, ATOMS, [Path.constant(0.0)], 0.25, uniform_bound=2.0)
    assert rep.passed
    for lad in ladders.values():
        np.testing.assert_allclose(lad.ratios, 0.0)
    assert any(r.check_id == "uniform" for r in rep.rows)


def test_refinement_flags_blowup():
    # gradient blowing up right after t: constants more than double when the ladder is halved
    def grad(t, x):
        return 0.0 if t == 0.25 else 1.0 / (t - 0.25)

    rep, _ = regularity_certificates(grad, ATOMS, [Path.constant(0.0)], 0.25, space_steps=(0.1,), time_steps=(0.1, 0.05))
    fails = [r.check_id for r in rep.failures()]
    assert fails == ["time/0/refinement"]


def test_atom_jump_on_closed_form():
    lam = AtomicMeasure.lebesgue(1.0) + AtomicMeasure.atoms([0.5], [0.5])

    def grad(t, x):
        return lam.mass(t, 1.0, closed_left=True, closed_right=True)

    assert atom_jump(grad, Path.constant(0.0), 0.5, 1e-3) == pytest.approx(0.5 + 1e-3)


def test_atom_jump_from_lift():
    grid = GridSequence.dyadic().level(2)
    grad = lift_gradient(heat(), terminal_integral(ATOMS), grid, SolverConfig(dx=0.05, s_nodes=201))
    assert grad(0.5, Path.constant(0.0)) == pytest.approx(1.0, abs=1e-6)
    jump = atom_jump(grad, Path.constant(0.0), 0.5, grid.mesh / 2)
    assert jump == pytest.approx(0.5, abs=1e-6)


def test_generator_form_labels():
    assert generator_form(heat()) == "linear"
    assert generator_form(bsb()) == "linear"
    # path dependence in the driver or a max over drifts leaves both admissible forms
    assert generator_form(semilinear(ATOMS)) == "beyond-hypothesis"
    assert generator_form(controlled_drift()) == "beyond-hypothesis"
    nonlinear_y = black_box(lambda t, x, y, z, g: 0.5 * g + abs(y) + 0.3 * z)
    assert generator_form(nonlinear_y, alpha=1.0) == "z_linear"
    assert generator_form(nonlinear_y, alpha=0.5) == "beyond-hypothesis"
