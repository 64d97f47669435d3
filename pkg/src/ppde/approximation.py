"""Level sweeps, rate fits and the diagnostics built on them."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .fbsde import McConfig, hjb_value_mc
from .generators import GeneratorSpec, Modulus, TerminalSpec
from .slab_pde import SolverConfig, solve_vn_exact, solve_vn_lift
from .timegrid import GridSequence, Path, TimeGrid, dist_uniform

BACKENDS = ("lift", "exact", "mc")


class BackendError(ValueError):
    """The backend cannot handle the instance or the requested levels."""


@dataclass
class RateFit:
    slope: float
    intercept: float
    residual: float
    infinite: bool = False

    def ok(self, floor: float = 0.25, slack: float = 0.0) -> bool:
        return self.infinite or self.slope >= floor - slack


@dataclass
class ConvergenceReport:
    """Values ``v^n(t, x)`` per level with gaps, fitted rate and extrapolated limit."""

    levels: list
    meshes: list
    values: list
    se: list = field(default_factory=list)
    backend: str = "lift"
    t: float = 0.0
    path_id: str = "query"
    grid_name: str = ""
    elapsed: float = 0.0
    rate: RateFit | None = None
    limit: float = float("nan")
    cauchy_tol: float = 1e-2

    def __post_init__(self):
        if list(self.levels) != sorted(set(self.levels)):
            raise ValueError("levels must be strictly increasing")
        if not self.se:
            self.se = [0.0] * len(self.values)
        if self.rate is None:
            self.rate = rate_diagnostic(self) if len(self.values) >= 3 else None
        if math.isnan(self.limit):
            self.limit = richardson(self)

    @property
    def gaps(self) -> list:
        v = self.values
        return [abs(b - a) for a, b in zip(v[:-1], v[1:])]

    @property
    def finest(self) -> float:
        return self.values[-1]

    @property
    def gap_bound(self) -> float:
        """Distance between the extrapolated limit and the finest value."""
        return abs(self.limit - self.finest)

    @property
    def cauchy(self) -> bool:
        g = self.gaps
        return bool(g) and g[-1] <= self.cauchy_tol

    @property
    def rate_ok(self) -> bool:
        return self.rate is not None and self.rate.ok()

    @property
    def path_free(self) -> bool:
        return bool(self.rate and self.rate.infinite)

    def rows(self) -> list[dict]:
        out = []
        for k, (n, h, v, se) in enumerate(zip(self.levels, self.meshes, self.values, self.se)):
            out.append({
                "n": n,
                "mesh": h,
                "t": self.t,
                "path_id": self.path_id,
                "value": v,
                "gap_prev": "" if k == 0 else abs(v - self.values[k - 1]),
                "se_if_mc": se if self.backend == "mc" else "",
            })
        return out


def rate_diagnostic(report: ConvergenceReport) -> RateFit:
    """Least-squares slope of ``log |v^{n+1} - v^n|`` against ``log |pi^n|``."""
    gaps = np.array(report.gaps, dtype=float)
    if gaps.size < 2:
        raise ValueError("a rate fit needs at least three levels")
    meshes = np.array(report.meshes[:-1], dtype=float)
    scale = max(1.0, max(abs(v) for v in report.values))
    nz = gaps > 1e-9 * scale  # solver roundoff, not a convergence signal
    if nz.sum() < 2:
        return RateFit(math.inf, 0.0, 0.0, True)
    lx, ly = np.log(meshes[nz]), np.log(gaps[nz])
    A = np.column_stack([lx, np.ones_like(lx)])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - ly) ** 2)))
    return RateFit(float(coef[0]), float(coef[1]), resid)


def richardson(report: ConvergenceReport) -> float:
    """Extrapolate the two finest levels with the fitted rate (finest value when no rate)."""
    v = report.values
    if len(v) < 2 or report.rate is None or report.rate.infinite or report.rate.slope <= 0:
        return float(v[-1])
    r = report.meshes[-2] / report.meshes[-1]
    factor = r ** report.rate.slope - 1
    if factor <= 0:
        return float(v[-1])
    return float(v[-1] + (v[-1] - v[-2]) / factor)


def level_value(
    F: GeneratorSpec,
    g: TerminalSpec,
    grid: TimeGrid,
    query: tuple[float, Path],
    backend: str = "lift",
    cfg: SolverConfig | None = None,
    mc: McConfig | None = None,
) -> tuple[float, float]:
    """``(v^n(t, x), standard error)`` on one grid."""
    if backend == "lift":
        return solve_vn_lift(F, g, grid, query, cfg).value, 0.0
    if backend == "exact":
        cfg = cfg or SolverConfig()
        if grid.n > cfg.max_exact_slabs:
            raise BackendError(f"exact backend handles at most {cfg.max_exact_slabs} slabs, grid has {grid.n}")
        return solve_vn_exact(F, g, grid, query, cfg), 0.0
    if backend == "mc":
        res = hjb_value_mc(F, g, grid, query, mc or McConfig())
        return res.value, res.se
    raise BackendError(f"unknown backend {backend!r}; choose from {BACKENDS}")


def approximate_solution(
    F: GeneratorSpec,
    g: TerminalSpec,
    grids: GridSequence,
    query: tuple[float, Path],
    levels: Sequence[int],
    backend: str = "lift",
    cfg: SolverConfig | None = None,
    mc: McConfig | None = None,
    path_id: str = "query",
    cauchy_tol: float = 1e-2,
) -> ConvergenceReport:
    levels = list(levels)
    if not levels:
        raise ValueError("levels must not be empty")
    start = time.perf_counter()
    values, ses, meshes = [], [], []
    for n in levels:
        grid = grids.level(n)
        v, se = level_value(F, g, grid, query, backend, cfg, mc)
        values.append(v)
        ses.append(se)
        meshes.append(grid.mesh)
    return ConvergenceReport(levels, meshes, values, ses, backend, float(query[0]), path_id, grids.name,
                             time.perf_counter() - start, cauchy_tol=cauchy_tol)


# --------------------------------------------------------------------------
# grid independence


@dataclass
class GridIndependence:
    reports_a: list
    reports_b: list
    discrepancy: float
    tol_grid: float

    @property
    def passed(self) -> bool:
        return self.discrepancy <= self.tol_grid


def grid_independence(
    F: GeneratorSpec,
    g: TerminalSpec,
    grids_a: GridSequence,
    grids_b: GridSequence,
    queries: Sequence[tuple[float, Path]],
    levels_a: Sequence[int],
    levels_b: Sequence[int],
    backend: str = "lift",
    cfg: SolverConfig | None = None,
    mc: McConfig | None = None,
) -> GridIndependence:
    """Max ``|limit_a - limit_b|`` over queries and ``tol_grid = 2 (gap_a + gap_b)``."""
    ra, rb, disc, tol = [], [], 0.0, 0.0
    for k, q in enumerate(queries):
        a = approximate_solution(F, g, grids_a, q, levels_a, backend, cfg, mc, f"q{k}")
        b = approximate_solution(F, g, grids_b, q, levels_b, backend, cfg, mc, f"q{k}")
        ra.append(a)
        rb.append(b)
        disc = max(disc, abs(a.limit - b.limit))
        tol = max(tol, 2 * (a.gap_bound + b.gap_bound))
    return GridIndependence(ra, rb, disc, tol)


# --------------------------------------------------------------------------
# moduli


@dataclass
class LadderTable:
    steps: list
    numerators: list
    denominators: list

    @property
    def ratios(self) -> list:
        return [n / d if d > 0 else float("nan") for n, d in zip(self.numerators, self.denominators)]

    @property
    def variation(self) -> float:
        r = [x for x in self.ratios if np.isfinite(x) and x > 0]
        if not r:
            return 1.0
        return max(r) / min(r)

    @property
    def bound(self) -> float:
        r = [x for x in self.ratios if np.isfinite(x)]
        return max(r) if r else 0.0


@dataclass
class ModulusReport:
    space: LadderTable
    time: LadderTable

    def bounded(self, max_variation: float = 2.0) -> bool:
        return self.space.variation <= max_variation and self.time.variation <= max_variation


def modulus_check(
    evaluator: Callable[[float, Path], float],
    t: float,
    x: Path,
    direction: Path,
    space_steps: Sequence[float],
    time_steps: Sequence[float],
    mesh: float = 0.0,
    modulus: Modulus | None = None,
    include_mesh: bool = False,
    anchor: str = "start",
) -> ModulusReport:
    """Ratio tables for the space and time moduli of ``evaluator``.

    Space: ``|u(t, x) - u(t, x + eps y)| / w'(rho_t(x, x + eps y))``.
    Time: ``|u(t + h, x stopped at t) - u(t, x)| / w'(h^(1/2) [+ |pi|^(1/4)])``.
    With ``anchor="end"`` the later time is held at ``t`` and the ladder
    steps back to ``t - h``. ``x' = x`` entries (zero distance) are skipped.
    """
    modulus = modulus or Modulus()
    base = evaluator(t, x)
    sp = LadderTable([], [], [])
    for eps in space_steps:
        xp = _add(x, direction, eps)
        d = dist_uniform(x, xp, t)
        if d == 0:
            continue
        sp.steps.append(eps)
        sp.numerators.append(abs(evaluator(t, xp) - base))
        sp.denominators.append(float(modulus.prime(d)))
    if anchor not in ("start", "end"):
        raise ValueError("anchor must be 'start' or 'end'")
    tm = LadderTable([], [], [])
    for h in time_steps:
        t0, t1 = (t, t + h) if anchor == "start" else (t - h, t)
        if t0 < -1e-12 or t1 > x.horizon + 1e-12:
            continue
        early = base if anchor == "start" else evaluator(t0, x)
        scale = math.sqrt(h) + (mesh**0.25 if include_mesh else 0.0)
        tm.steps.append(h)
        tm.numerators.append(abs(evaluator(t1, x.stopped(t0)) - early))
        tm.denominators.append(float(modulus.prime(scale)))
    return ModulusReport(sp, tm)


def _add(x: Path, y: Path, eps: float) -> Path:
    pts = np.union1d(x.breakpoints, y.breakpoints)
    if x.mode == "pl" or y.mode == "pl":
        xx, yy = x.with_mode("pl"), y.with_mode("pl")
        pts = np.union1d(xx.breakpoints, yy.breakpoints)
        return Path(pts, xx(pts) + eps * yy(pts), "pl", x.horizon)
    return Path(pts, x(pts) + eps * y(pts), "pc", x.horizon)


# --------------------------------------------------------------------------
# stability and consistency


@dataclass
class StabilityRow:
    k: float
    value: float
    gap: float


def stability_experiment(
    family: Callable[[float], tuple[GeneratorSpec, TerminalSpec]],
    ks: Sequence[float],
    limit: tuple[GeneratorSpec, TerminalSpec],
    query: tuple[float, Path],
    grid: TimeGrid,
    cfg: SolverConfig | None = None,
) -> list[StabilityRow]:
    """``theta_k(query)`` for each ``k`` and its gap to the limit instance."""
    F0, g0 = limit
    v0 = solve_vn_lift(F0, g0, grid, query, cfg).value
    rows = [StabilityRow(math.inf, v0, 0.0)]
    for k in ks:
        Fk, gk = family(k)
        v = solve_vn_lift(Fk, gk, grid, query, cfg).value
        rows.append(StabilityRow(k, v, abs(v - v0)))
    return rows


def halving_ratios(rows: Sequence[StabilityRow]) -> list[float]:
    """``gap_k / gap_{2k}`` for consecutive ``k`` in a doubling family."""
    fin = [r for r in rows if np.isfinite(r.k)]
    out = []
    for a, b in zip(fin[:-1], fin[1:]):
        if abs(b.k - 2 * a.k) < 1e-12 and b.gap > 0:
            out.append(a.gap / b.gap)
    return out


@dataclass
class ConsistencyReport:
    levels: list
    gaps: list  # max over queries, per level

    @property
    def finest_gap(self) -> float:
        return self.gaps[-1]


def classical_consistency(
    F: GeneratorSpec,
    g: TerminalSpec,
    w: Callable[[float, Path], float],
    queries: Sequence[tuple[float, Path]],
    grids: GridSequence,
    levels: Sequence[int],
    cfg: SolverConfig | None = None,
) -> ConsistencyReport:
    """Max ``|v^n - w|`` over queries per level against a known classical solution ``w``."""
    gaps = []
    for n in levels:
        grid = grids.level(n)
        gaps.append(max(abs(solve_vn_lift(F, g, grid, q, cfg).value - w(q[0], q[1])) for q in queries))
    return ConsistencyReport(list(levels), gaps)


def write_csv(rows: Sequence[dict], filename, columns: Sequence[str] | None = None) -> None:
    import csv

    rows = list(rows)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(filename, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({c: _fmt(r.get(c, "")) for c in columns})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
