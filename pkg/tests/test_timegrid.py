import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppde.timegrid import (
    PC,
    PL,
    AtomicMeasure,
    DomainError,
    GridSequence,
    ModeError,
    Path,
    TimeGrid,
    concat,
    dist_skorokhod,
    dist_uniform,
    eta,
    eta_plus,
    format_path,
    parse_path,
    path_from_key,
    project,
    skorokhod_parts,
)


def step_paths(max_jumps=4):
    times = st.lists(st.floats(0.01, 0.99), min_size=0, max_size=max_jumps, unique=True).map(sorted)
    return times.flatmap(
        lambda ts: st.lists(st.floats(-3, 3), min_size=len(ts) + 1, max_size=len(ts) + 1).map(
            lambda vs: Path(np.array([0.0] + list(ts)), np.array(vs), PC, 1.0)
        )
    )


def pl_paths(max_nodes=6):
    times = st.lists(st.floats(0.01, 0.99), min_size=0, max_size=max_nodes, unique=True).map(sorted)
    return times.flatmap(
        lambda ts: st.lists(st.floats(-3, 3), min_size=len(ts) + 2, max_size=len(ts) + 2).map(
            lambda vs: Path(np.array([0.0] + list(ts) + [1.0]), np.array(vs), PL, 1.0)
        )
    )


# grids


def test_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.1, 1.0]))
    g = TimeGrid.uniform(1.0, 4)
    assert g.n == 4 and g.mesh == pytest.approx(0.25)


def test_eta_maps():
    g = TimeGrid.uniform(1.0, 4)
    assert eta(g, 0.3) == pytest.approx(0.25)
    assert eta(g, 0.25) == pytest.approx(0.25)
    assert eta_plus(g, 0.25) == pytest.approx(0.25)
    assert eta_plus(g, 0.3) == pytest.approx(0.5)
    assert eta_plus(g, 0.0) == 0.0
    assert eta_plus(g, 1.0) == pytest.approx(1.0)
    with pytest.raises(DomainError):
        eta(g, 1.5)


def test_sequences_nested():
    for name in ("dyadic", "triadic"):
        seq = GridSequence.by_name(name)
        for n in range(1, 5):
            assert seq.level(n).is_subgrid_of(seq.level(n + 1))
    assert GridSequence.triadic().level(2).n == 9


def test_sequence_rejects_non_nested():
    with pytest.raises(ValueError):
        GridSequence.from_grids([TimeGrid.uniform(1.0, 2), TimeGrid.uniform(1.0, 3)]).level(2)


# paths and projections


def test_pc_path_values_and_left_limits():
    x = Path.step([0.5], [0.0, 1.0])
    assert x.at(0.5)[0] == 1.0
    assert x.left_limit(0.5)[0] == 0.0
    assert x.at(0.49)[0] == 0.0


def test_projection_freezes_at_grid_points():
    g = TimeGrid.uniform(1.0, 4)
    x = Path.from_function(lambda s: s, np.linspace(0, 1, 11), PL)
    pc = project(g, x, 0.6, PC)
    assert pc.at(0.3)[0] == pytest.approx(0.25)
    assert pc.at(0.55)[0] == pytest.approx(0.5)
    pl = project(g, x, 0.6, PL)
    assert pl.at(0.3)[0] == pytest.approx(0.3)


def test_concat_pc_and_pl():
    x = Path.constant(0.0)
    y = concat(x, 0.5, 1.0)
    assert y.mode == PC and y.at(0.5)[0] == 1.0 and y.at(0.4)[0] == 0.0
    z = concat(x.with_mode(PL), 0.5, 1.0)
    assert z.mode == PL
    assert z.left_limit(0.5)[0] == pytest.approx(0.0)
    assert z.at(0.5)[0] == pytest.approx(1.0)


def test_mode_mismatch_skorokhod():
    with pytest.raises(ModeError):
        dist_skorokhod(Path.constant(0.0, mode=PL), Path.constant(0.0, mode=PL))


@settings(max_examples=60, deadline=None)
@given(step_paths(), st.integers(1, 4))
def test_projection_idempotent(x, level):
    g = GridSequence.dyadic().level(level)
    p = project(g, x)
    assert dist_uniform(project(g, p), p) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(pl_paths(), st.integers(1, 4))
def test_pl_projection_key_roundtrip(x, level):
    g = GridSequence.dyadic().level(level)
    key = x.key(g)
    y = path_from_key(g, key, PL)
    np.testing.assert_allclose(y.key(g), key)


# metrics


@settings(max_examples=60, deadline=None)
@given(step_paths(), step_paths())
def test_uniform_metric_axioms(x, y):
    assert dist_uniform(x, x) == 0.0
    assert dist_uniform(x, y) == pytest.approx(dist_uniform(y, x))
    assert dist_uniform(x, y) >= 0


@settings(max_examples=40, deadline=None)
@given(step_paths(3), step_paths(3), step_paths(3))
def test_uniform_triangle(x, y, z):
    assert dist_uniform(x, z) <= dist_uniform(x, y) + dist_uniform(y, z) + 1e-12


@settings(max_examples=40, deadline=None)
@given(step_paths(3), step_paths(3))
def test_skorokhod_below_uniform_and_symmetric(x, y):
    d = dist_skorokhod(x, y)
    assert 0 <= d <= dist_uniform(x, y) + 1e-12
    assert d == pytest.approx(dist_skorokhod(y, x), abs=1e-12)


def test_skorokhod_shifted_jump():
    x = Path.step([0.5], [0.0, 1.0])
    y = Path.step([0.52], [0.0, 1.0])
    total, tc, sc = skorokhod_parts(x, y)
    assert total == pytest.approx(0.02)
    assert dist_uniform(x, y) == pytest.approx(1.0)


def test_skorokhod_with_measure_term():
    x = Path.constant(0.0)
    y = Path.constant(1.0)
    lam = AtomicMeasure.lebesgue(1.0)
    assert dist_skorokhod(x, y, mu=lam) == pytest.approx(2.0)


# measures


def test_node_weights_pc_pl():
    g = TimeGrid.uniform(1.0, 4)
    lam = AtomicMeasure.lebesgue(1.0) + AtomicMeasure.atoms([0.5, 1.0], [0.5, 0.25])
    wpc = lam.node_weights(g, PC)
    np.testing.assert_allclose(wpc, [0.25, 0.25, 0.75, 0.25, 0.25])
    wpl = lam.node_weights(g, PL)
    np.testing.assert_allclose(wpl, [0.125, 0.25, 0.75, 0.25, 0.375])
    assert wpc.sum() == pytest.approx(lam.total)


@settings(max_examples=40, deadline=None)
@given(step_paths(), st.integers(1, 4))
def test_node_weights_integrate_projection(x, level):
    g = GridSequence.dyadic().level(level)
    lam = AtomicMeasure.lebesgue(1.0) + AtomicMeasure.atoms([0.5], [0.3])
    w = lam.node_weights(g, PC)
    p = project(g, x, mode=PC)
    assert float(lam.integrate(p)[0]) == pytest.approx(float(w @ x.key(g)[:, 0]), abs=1e-10)


def test_integral_of_ramp():
    x = Path.from_function(lambda s: s, [0.0, 1.0], PL)
    assert float(AtomicMeasure.lebesgue(1.0).integrate(x)[0]) == pytest.approx(0.5)


# text format


@settings(max_examples=40, deadline=None)
@given(st.one_of(step_paths(), pl_paths()))
def test_path_text_roundtrip(x):
    y = parse_path(format_path(x))
    assert y.mode == x.mode
    np.testing.assert_array_equal(y.breakpoints, x.breakpoints)
    np.testing.assert_array_equal(y.values, x.values)


def test_parse_rejects_garbage():
    with pytest.raises(ValueError):
        parse_path("# mode: pc\n# horizon: 1.0\n0.0 abc\n")
