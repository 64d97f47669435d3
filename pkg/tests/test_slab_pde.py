import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppde.generators import (
    FrozenKey,
    bsb,
    freeze,
    heat,
    linear,
    semilinear,
    terminal_integral,
    terminal_power,
    terminal_semilinear,
)
from ppde.slab_pde import (
    CFLError,
    DepthError,
    LiftError,
    SlabMesh,
    SolverConfig,
    ValueField,
    check_premise,
    comparison_check,
    dump_field,
    explicit_step,
    implicit_step,
    solve_markov_2d,
    solve_slab,
    solve_vn_exact,
    solve_vn_lift,
)
from ppde.timegrid import AtomicMeasure, GridSequence, Path, TimeGrid

ATOMS = AtomicMeasure.atoms([0.5, 1.0], [0.5, 0.5])


def test_heat_square_every_level():
    for n in (1, 2, 3):
        v = solve_vn_lift(heat(), terminal_power(2), GridSequence.dyadic().level(n), (0.0, Path.constant(0.0)),
                          SolverConfig(dx=0.05, radius=6.0)).value
        assert v == pytest.approx(1.0, abs=5e-3)


def test_heat_square_implicit():
    v = solve_vn_lift(heat(), terminal_power(2), TimeGrid.uniform(1.0, 2), (0.25, Path.constant(0.5)),
                      SolverConfig(dx=0.05, radius=6.0, scheme="implicit")).value
    assert v == pytest.approx(0.25 + 0.75, abs=5e-3)


def test_bsb_lift_both_schemes():
    x = Path.constant(1.0)
    for scheme in ("explicit", "implicit"):
        v = solve_vn_lift(bsb(), terminal_power(2), TimeGrid.uniform(1.0, 2), (0.0, x),
                          SolverConfig(dx=0.02, scheme=scheme)).value
        assert v == pytest.approx(1.04, abs=1e-2)


def test_cfl_violation_raises():
    cfg = SolverConfig(dx=0.01, radius=2.0, dt=1e-3)
    with pytest.raises(CFLError):
        solve_vn_lift(heat(), terminal_power(2), TimeGrid.uniform(1.0, 1), (0.0, Path.constant(0.0)), cfg)


def test_mesh_validation():
    with pytest.raises(ValueError):
        SlabMesh(1.05, 0.1)
    assert SlabMesh.around(0.0, 1.01, 0.1).radius == pytest.approx(1.1)


def test_single_slab_heat():
    grid = TimeGrid.uniform(1.0, 2)
    key = FrozenKey.of(grid, Path.constant(0.0), 1)
    Fn = freeze(heat(), grid, key)
    mesh = SlabMesh.around(0.0, 6.0, 0.05)
    term = ValueField(mesh, 1.0, mesh.nodes**2)
    out = solve_slab(Fn, term, (0.5, 1.0), mesh)
    assert out.time == 0.5
    assert out.at(0.3) == pytest.approx(0.09 + 0.5, abs=1e-3)


def test_dump_field(tmp_path):
    mesh = SlabMesh.around(0.0, 0.2, 0.1)
    fn = tmp_path / "f.csv"
    dump_field(ValueField(mesh, 0.5, mesh.nodes), fn)
    text = fn.read_text().splitlines()
    assert text[0] == "# time 0.5" and text[1] == "x,v0" and len(text) == 2 + mesh.size


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=21, max_size=21), st.lists(st.floats(0, 1), min_size=21, max_size=21))
def test_explicit_step_monotone(base, bump):
    F = semilinear(ATOMS)
    v = np.array(base)[:, None]
    u = v + np.array(bump)[:, None]
    s = np.array([0.2])
    dx = 0.1
    dt = 0.9 / (F.sig(0, s, None).max() ** 2 / dx**2 + 0.3 / dx + 0.5)
    assert np.all(explicit_step(F, 0.5, s, u, dx, dt) >= explicit_step(F, 0.5, s, v, dx, dt) - 1e-12)
    # central drift where the cell Peclet condition holds; |f_w| <= beta = 0.3
    assert np.all(explicit_step(F, 0.5, s, u, dx, dt, 0.3) >= explicit_step(F, 0.5, s, v, dx, dt, 0.3) - 1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=21, max_size=21), st.lists(st.floats(0, 1), min_size=21, max_size=21))
def test_implicit_step_monotone(base, bump):
    F = bsb()
    v = np.array(base)[:, None]
    u = v + np.array(bump)[:, None]
    s = np.array([0.0])
    a, _ = implicit_step(F, 0.5, s, u, 0.1, 0.05)
    b, _ = implicit_step(F, 0.5, s, v, 0.1, 0.05)
    assert np.all(a >= b - 1e-10)
    G = semilinear(ATOMS)
    s = np.array([0.4])
    a, _ = implicit_step(G, 0.5, s, u, 0.1, 0.05, central=True)
    b, _ = implicit_step(G, 0.5, s, v, 0.1, 0.05, central=True)
    assert np.all(a >= b - 1e-10)


def test_hybrid_drift_is_second_order():
    # v = x + mu (T - t) for a constant drift: the upwind error is O(dx), central is exact up to the boundary
    from ppde.generators import GeneratorSpec

    F = GeneratorSpec(name="drift", sigma=lambda t, s, a: 0.5 + 0.0 * s, mu=lambda t, s, a: 0.3 + 0.0 * s,
                      driver=lambda t, s, y, w, a: 0.0 * y)
    g = terminal_power(2)
    grid = TimeGrid.uniform(1.0, 1)
    exact = 0.3**2 + 0.25  # E (x + 0.3 + 0.5 W)^2 at x = 0
    errs = {}
    for mode in ("upwind", "hybrid"):
        errs[mode] = [abs(solve_vn_lift(F, g, grid, (0.0, Path.constant(0.0)),
                                        SolverConfig(dx=dx, radius=5.0, drift=mode)).value - exact) for dx in (0.1, 0.05)]
    assert errs["upwind"][0] / errs["upwind"][1] == pytest.approx(2.0, rel=0.2)
    assert errs["hybrid"][1] < 0.1 * errs["upwind"][1]


def test_lift_matches_exact_on_random_queries():
    F, g = semilinear(ATOMS), terminal_semilinear(ATOMS)
    grid = GridSequence.dyadic().level(2)
    cfg = SolverConfig(dx=0.05, s_nodes=401, key_nodes=17)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        t = float(rng.uniform(0.25, 0.95))
        x = Path.step([float(rng.uniform(0.05, t))], [rng.normal(), rng.normal()])
        a = solve_vn_exact(F, g, grid, (t, x), cfg)
        b = solve_vn_lift(F, g, grid, (t, x), cfg).value
        worst = max(worst, abs(a - b))
    assert worst <= 5e-3


def test_exact_gaussian_two_slabs():
    v = solve_vn_exact(heat(), terminal_integral(power=2), TimeGrid.uniform(1.0, 2), (0.0, Path.constant(0.0)),
                       SolverConfig(dx=0.05, key_nodes=65))
    assert v == pytest.approx(0.125, abs=2e-3)


def test_exact_depth_cap():
    with pytest.raises(DepthError):
        solve_vn_exact(heat(), terminal_power(2), GridSequence.dyadic().level(3), (0.0, Path.constant(0.0)))


def test_lift_rejects_mismatched_summary():
    F = semilinear(AtomicMeasure.lebesgue(1.0))
    with pytest.raises(LiftError):
        solve_vn_lift(F, terminal_power(2), TimeGrid.uniform(1.0, 2), (0.0, Path.constant(0.0)))


def test_recorded_field_lookup():
    grid = TimeGrid.uniform(1.0, 2)
    sol = solve_vn_lift(heat(), terminal_power(2), grid, (0.0, Path.constant(0.0)), SolverConfig(dx=0.05), record=(0.5,))
    assert float(sol.evaluate(0.5, 0.0, 0.3)[0]) == pytest.approx(0.09 + 0.5, abs=2e-3)
    assert float(sol.gradient(0.5, 0.0, 0.3)[0]) == pytest.approx(0.6, abs=1e-2)
    with pytest.raises(KeyError):
        sol.snapshot_at(0.3)


def test_markov_2d_heat():
    v = solve_markov_2d(heat(dim=2), lambda x1, x2: x1**2 + x2**2, 0.0, (0.5, -0.5), 1.0,
                        SolverConfig(dx=0.1, radius=4.0))
    assert v == pytest.approx(0.5 + 2.0, abs=1e-2)


def test_comparison_on_shifted_data():
    grid = TimeGrid.uniform(1.0, 2)
    x = Path.constant(0.2)
    F2, g2 = linear(ATOMS), terminal_semilinear(ATOMS)
    F1, g1 = F2.shifted(0.1), g2.shifted(0.05)
    assert check_premise(F1, F2, g1, g2, samples=30)
    cfg = SolverConfig(dx=0.05, radius=4.0)
    u = solve_vn_lift(F1, g1, grid, (0.0, x), cfg)
    v = solve_vn_lift(F2, g2, grid, (0.0, x), cfg)
    res = comparison_check(u, v)
    assert res.ok and not res.inconclusive
    flipped = comparison_check(v, u, premise_ok=check_premise(F2, F1, g2, g1, samples=30))
    assert flipped.inconclusive
