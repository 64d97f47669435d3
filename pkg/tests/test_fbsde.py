import numpy as np
import pytest

from ppde.fbsde import (
    BudgetError,
    McConfig,
    Projector,
    RankError,
    bsde_value,
    bump_derivative,
    design,
    hjb_value_mc,
    moment_estimates,
    simulate_frozen_sde,
    tangent_fbsde,
    time_lattice,
)
from ppde.generators import bsb, controlled_drift, heat, semilinear, terminal_power, terminal_semilinear
from ppde.timegrid import AtomicMeasure, Path, TimeGrid

ATOMS = AtomicMeasure.atoms([0.5, 1.0], [0.5, 0.5])
GRID = TimeGrid.uniform(1.0, 2)


def test_config_validation():
    with pytest.raises(ValueError):
        McConfig(samples=101)
    with pytest.raises(ValueError):
        McConfig(degree=0)
    assert McConfig(samples=101, antithetic=False).samples == 101


def test_lattice_hits_grid_points():
    times, slabs = time_lattice(TimeGrid.uniform(1.0, 4), 0.3, 4)
    assert times[0] == pytest.approx(0.3) and times[-1] == pytest.approx(1.0)
    for p in (0.5, 0.75):
        assert np.min(np.abs(times - p)) < 1e-12


def test_same_seed_same_value():
    F, g = semilinear(ATOMS), terminal_semilinear(ATOMS)
    cfg = McConfig(samples=2000, seed=7)
    a = bsde_value(F, g, GRID, (0.0, Path.constant(0.1)), cfg)
    b = bsde_value(F, g, GRID, (0.0, Path.constant(0.1)), cfg)
    assert a.y0 == b.y0 and a.se == b.se
    c = bsde_value(F, g, GRID, (0.0, Path.constant(0.1)), cfg.replace(seed=8))
    assert c.y0 != a.y0


def test_heat_square_mc():
    r = bsde_value(heat(), terminal_power(2), GRID, (0.0, Path.constant(0.5)), McConfig(samples=20000, seed=1))
    assert abs(r.y0 - 1.25) <= 3 * r.se + 1e-2


def test_bsb_mc_matches_closed_form():
    r = hjb_value_mc(bsb(), terminal_power(2), GRID, (0.0, Path.constant(1.0)), McConfig(samples=20000, seed=1))
    assert r.method == "exhaustive"
    assert abs(r.value - 1.04) <= 3 * r.se + 1e-2
    assert r.control == (0.2, 0.2)


def test_driver_sup_on_linear_terminal():
    F, g = controlled_drift(), terminal_power(1)
    x = Path.constant(0.2)
    ex = hjb_value_mc(F, g, GRID, (0.0, x), McConfig(samples=4000, seed=1), method="exhaustive")
    ds = hjb_value_mc(F, g, GRID, (0.0, x), McConfig(samples=4000, seed=1), method="driver_sup")
    assert ex.value == pytest.approx(1.2, abs=1e-9)
    assert ds.value == pytest.approx(1.2, abs=3e-2)


def test_budget_and_sigma_control():
    with pytest.raises(BudgetError):
        hjb_value_mc(controlled_drift(), terminal_power(1), GRID, (0.0, Path.constant(0.0)),
                     McConfig(samples=200, budget=2), method="exhaustive")
    with pytest.raises(BudgetError):
        hjb_value_mc(bsb(), terminal_power(2), TimeGrid.uniform(1.0, 16), (0.0, Path.constant(0.0)),
                     McConfig(samples=200, budget=4))


def test_projector_rank():
    rng = np.random.default_rng(0)
    x = rng.normal(size=50)
    A = np.column_stack([np.ones(50), x, x])  # duplicate column
    P = Projector(A)
    assert P.rank == 2
    np.testing.assert_allclose(P(3 * x + 1), 3 * x + 1, atol=1e-10)
    with pytest.raises(RankError):
        Projector(np.ones((3, 5)))


def test_design_columns():
    x = np.linspace(-1, 1, 10)
    assert design(x, np.zeros_like(x), 3).shape[1] == 4
    assert design(x, x**2, 2).shape[1] == 6


def test_simulate_shapes():
    batch = simulate_frozen_sde(heat(), GRID, (0.25, Path.constant(0.0)), McConfig(samples=100, substeps=4))
    assert batch.samples == 100
    assert batch.X.shape[1] == len(batch.times)
    np.testing.assert_allclose(batch.X[:, 0], 0.0)


def test_tangent_matches_bump():
    F, g = semilinear(ATOMS), terminal_semilinear(ATOMS)
    cfg = McConfig(samples=20000, seed=2, degree=3)
    start = (0.0, Path.constant(0.3))
    t = tangent_fbsde(F, g, GRID, start, cfg)
    gaps = [abs(bump_derivative(F, g, GRID, start, cfg, d, base=t) - t.grad) for d in (1e-2, 5e-3)]
    assert gaps[1] <= 0.05 * abs(t.grad)
    assert gaps[0] / gaps[1] == pytest.approx(2.0, rel=0.3)
    m = moment_estimates(t)
    assert np.isfinite(m["X2"]) and m["dX2"] >= 1.0


def test_heat_tangent_is_terminal_slope():
    t = tangent_fbsde(heat(), terminal_power(2), GRID, (0.5, Path.constant(0.4)), McConfig(samples=4000, seed=0))
    assert t.grad == pytest.approx(0.8, abs=2e-2)
