"""Monotone finite differences for the frozen slab equations and their gluing.

The work horse is :func:`march_columns`, which marches ``-d_t v - F = 0``
backward on a one-dimensional mesh for a batch of independent columns. Each
column carries its own summary value ``s`` so the same code serves a single
frozen key, the nested key recursion (:func:`solve_vn_exact`) and the
Markovian lift in ``(s, x)`` (:func:`solve_vn_lift`).

Boundary closure: the second difference vanishes on the two end nodes (linear
extrapolation) and first-order terms keep only their inward one-sided part,
which keeps every scheme monotone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_banded

from .generators import (
    FrozenGenerator,
    GeneratorSpec,
    StructureError,
    TerminalSpec,
    prefix_weights,
)
from .timegrid import PC, Path, TimeGrid

TOL_MONOTONE = 1e-9


class CFLError(ValueError):
    """The explicit time step violates the monotonicity bound."""


class PolicyIterationError(RuntimeError):
    """Howard iteration did not converge within the sweep budget."""


class LiftError(ValueError):
    """The instance does not factor through the lift summary."""


class DepthError(ValueError):
    """The nested key recursion is too deep for the exact solver."""


# --------------------------------------------------------------------------
# configuration and meshes


@dataclass(frozen=True)
class SolverConfig:
    """Discretization knobs shared by the slab solvers.

    ``radius=None`` picks ``max(6 sigma_max sqrt(T - t), 4 |x| + 4)``.
    ``dt=None`` picks ``cfl`` times the explicit stability bound (explicit)
    or ``implicit_dt`` (implicit). ``drift="hybrid"`` differences the drift
    centrally wherever the cell Peclet condition keeps the step monotone and
    upwinds elsewhere; ``"upwind"`` always upwinds.
    """

    dx: float = 0.05
    radius: float | None = None
    scheme: str = "explicit"
    dt: float | None = None
    cfl: float = 0.9
    implicit_dt: float = 0.01
    s_nodes: int = 401
    key_nodes: int = 17
    key_sd: float = 5.0
    mode: str = PC
    max_sweeps: int = 50
    policy_tol: float = 1e-10
    max_exact_slabs: int = 4
    drift: str = "hybrid"

    def __post_init__(self):
        if self.drift not in ("hybrid", "upwind"):
            raise ValueError(f"unknown drift differencing {self.drift!r}")
        if self.dx <= 0:
            raise ValueError("dx must be positive")
        if self.scheme not in ("explicit", "implicit"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not 0 < self.cfl <= 1:
            raise ValueError("cfl factor must lie in (0, 1]")
        if self.s_nodes < 2 or self.key_nodes < 2:
            raise ValueError("need at least two s and key nodes")

    def replace(self, **kw) -> "SolverConfig":
        from dataclasses import replace

        return replace(self, **kw)


@dataclass(frozen=True)
class SlabMesh:
    """Uniform mesh ``center + dx * k`` for ``|k| <= radius / dx``."""

    radius: float
    dx: float
    dt: float | None = None
    center: float | np.ndarray = 0.0
    dim: int = 1

    def __post_init__(self):
        if self.dx <= 0 or self.radius <= 0:
            raise ValueError("radius and dx must be positive")
        k = self.radius / self.dx
        if abs(k - round(k)) > 1e-9 * max(1.0, k):
            raise ValueError(f"radius {self.radius} is not a multiple of dx {self.dx}")

    @classmethod
    def around(cls, center, radius: float, dx: float, dim: int = 1) -> "SlabMesh":
        k = math.ceil(radius / dx - 1e-9)
        return cls(k * dx, dx, None, center, dim)

    @property
    def half_nodes(self) -> int:
        return int(round(self.radius / self.dx))

    @property
    def nodes(self) -> np.ndarray:
        k = self.half_nodes
        c = np.atleast_1d(np.asarray(self.center, float))
        return c[0] + self.dx * np.arange(-k, k + 1)

    @property
    def size(self) -> int:
        return 2 * self.half_nodes + 1

    def cfl_bound(self, sig_max: float, drift_max: float, lip_y: float = 0.0) -> float:
        rate = sig_max**2 / self.dx**2 + drift_max / self.dx + max(lip_y, 0.0)
        return np.inf if rate == 0 else 1.0 / rate

    def check_cfl(self, dt: float, sig_max: float, drift_max: float, lip_y: float = 0.0) -> None:
        bound = self.cfl_bound(sig_max, drift_max, lip_y)
        if dt > bound * (1 + 1e-12):
            raise CFLError(f"dt = {dt:.3g} exceeds the monotonicity bound {bound:.3g} (dx = {self.dx:g})")


@dataclass(frozen=True)
class ValueField:
    """Values of one slab solution on a mesh at one time (columns = keys or s-nodes)."""

    mesh: SlabMesh
    time: float
    values: np.ndarray
    s: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError("value field contains non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def x(self) -> np.ndarray:
        return self.mesh.nodes

    def at(self, x: float, col: int = 0) -> float:
        vals = self.values if self.values.ndim == 1 else self.values[:, col]
        return float(np.interp(x, self.x, vals))

    def growth_constant(self, key_norm: float = 0.0) -> float:
        """Smallest ``C`` with ``|v| <= C (1 + |key| + |x|)`` on the mesh."""
        vals = self.values if self.values.ndim == 1 else np.max(np.abs(self.values), axis=1)
        return float(np.max(np.abs(vals) / (1 + key_norm + np.abs(self.x))))

    def dump(self, filename) -> None:
        dump_field(self, filename)


def dump_field(field: ValueField, filename) -> None:
    x = field.x
    vals = field.values if field.values.ndim == 2 else field.values[:, None]
    with open(filename, "w") as fh:
        fh.write(f"# time {field.time!r}\n")
        if field.s is not None:
            fh.write("# s " + " ".join(repr(float(s)) for s in np.atleast_1d(field.s)) + "\n")
        fh.write("x," + ",".join(f"v{j}" for j in range(vals.shape[1])) + "\n")
        for xi, row in zip(x, vals):
            fh.write(repr(float(xi)) + "," + ",".join(repr(float(v)) for v in row) + "\n")


# --------------------------------------------------------------------------
# coefficient bounds


def _sample_s(s_fn, t0, t1):
    return np.concatenate([np.atleast_1d(s_fn(t)) for t in (t0, 0.5 * (t0 + t1), t1)])


def coefficient_bounds(F: GeneratorSpec, t0: float, t1: float, s_values) -> tuple[float, float, float, float]:
    """Max ``|sigma|``, ``|mu|``, ``|f_y|`` and ``|f_w|`` over controls and sample points."""
    s = np.asarray(s_values, dtype=float)
    sig = mu = fy = fw = 0.0
    ys = np.array([-1.0, 0.0, 1.0])[:, None] * np.ones_like(s)
    for t in (t0, 0.5 * (t0 + t1), t1):
        for a in F.controls:
            sg = np.abs(F.sig(t, s, a))
            sig = max(sig, float(np.max(sg)))
            mu = max(mu, float(np.max(np.abs(F.drift(t, s, a)))))
            ws = ys * np.max(sg)
            fy = max(fy, float(np.max(np.abs(F.partial("f_y", t, s, ys, ws, a)))))
            fw = max(fw, float(np.max(np.abs(F.partial("f_w", t, s, ys, ws, a)))))
    return sig, mu, fy, fw


def _driver_uses_w(F: GeneratorSpec, t: float, s: np.ndarray) -> bool:
    y = np.array([0.3, -0.7])
    for a in F.controls:
        for w in (0.5, -1.3):
            if np.any(np.abs(F.f(t, s[:1], y[:, None], w, a) - F.f(t, s[:1], y[:, None], 0.0, a)) > 0):
                return True
    return False


# --------------------------------------------------------------------------
# one-dimensional column marcher


def _diffs(v: np.ndarray, dx: float):
    d2 = np.zeros_like(v)
    d2[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / dx**2
    fwd = np.zeros_like(v)
    fwd[:-1] = (v[1:] - v[:-1]) / dx
    bwd = np.zeros_like(v)
    bwd[1:] = (v[1:] - v[:-1]) / dx
    ctr = np.zeros_like(v)
    ctr[1:-1] = (v[2:] - v[:-2]) / (2 * dx)
    return d2, fwd, bwd, ctr


def _central_rows(cond: np.ndarray, shape) -> np.ndarray:
    out = np.array(np.broadcast_to(cond, shape))
    out[0] = False
    out[-1] = False
    return out


def explicit_step(
    F: GeneratorSpec, t: float, s: np.ndarray, v: np.ndarray, dx: float, dt: float, fw_bound: float = math.inf
) -> np.ndarray:
    """One backward explicit step; ``v`` has shape ``(Nx, Ns)``.

    ``fw_bound`` bounds ``|f_w|``. Where ``sigma^2 >= (|mu| + fw_bound |sigma|) dx``
    the drift is differenced centrally (still monotone); elsewhere it is upwinded.
    The default ``inf`` always upwinds.
    """
    d2, fwd, bwd, ctr = _diffs(v, dx)
    best = None
    for a in F.controls:
        sg = F.sig(t, s, a)
        mu = F.drift(t, s, a)
        up = np.maximum(mu, 0) * fwd + np.minimum(mu, 0) * bwd
        if np.isfinite(fw_bound):
            cent = _central_rows(sg**2 >= (np.abs(mu) + fw_bound * np.abs(sg)) * dx, v.shape)
            up = np.where(cent, mu * ctr, up)
        h = F.f(t, s, v, sg * ctr, a) + up + 0.5 * sg**2 * d2
        best = h if best is None else np.maximum(best, h)
    return v + dt * best


def _tridiag_solve(lo, di, up, rhs):
    """Solve column-wise tridiagonal systems; all arrays ``(N, M)``."""
    n, m = rhs.shape
    if m <= 8:
        out = np.empty_like(rhs)
        for j in range(m):
            ab = np.zeros((3, n))
            ab[0, 1:] = up[:-1, j]
            ab[1] = di[:, j]
            ab[2, :-1] = lo[1:, j]
            out[:, j] = solve_banded((1, 1), ab, rhs[:, j])
        return out
    c = np.empty_like(rhs)
    d = np.empty_like(rhs)
    c[0] = up[0] / di[0]
    d[0] = rhs[0] / di[0]
    for i in range(1, n):
        piv = di[i] - lo[i] * c[i - 1]
        c[i] = up[i] / piv
        d[i] = (rhs[i] - lo[i] * d[i - 1]) / piv
    x = np.empty_like(rhs)
    x[-1] = d[-1]
    for i in range(n - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x


def _secant_slope(F, t, s, y, w, a):
    f0 = F.f(t, s, y, 0.0 * w, a)
    f1 = F.f(t, s, y, w, a)
    small = np.abs(w) < 1e-8
    safe = np.where(small, 1.0, w)
    slope = (f1 - f0) / safe
    if np.any(small):
        slope = np.where(small, F.partial("f_w", t, s, y, 0.0 * w, a), slope)
    return f0, slope


def implicit_step(
    F: GeneratorSpec,
    t: float,
    s: np.ndarray,
    v: np.ndarray,
    dx: float,
    dt: float,
    max_sweeps: int = 50,
    tol: float = 1e-10,
    uses_w: bool = True,
    central: bool = False,
) -> tuple[np.ndarray, int]:
    """One backward implicit step solved by Howard policy iteration.

    The driver enters with ``y`` taken from the previous time level and its
    ``w``-dependence folded into the drift through the secant slope. The
    drift is upwinded, or with ``central=True`` differenced centrally where
    ``sigma^2 >= |drift| dx``, so every linear solve involves an M-matrix.
    """
    u = v.copy()
    controls = F.controls
    sigs = [np.broadcast_to(F.sig(t, s, a), v.shape[1:]) for a in controls]
    mus = [np.broadcast_to(F.drift(t, s, a), v.shape[1:]) for a in controls]
    single = len(controls) == 1 and not uses_w
    prev_policy = None
    for sweep in range(1, max_sweeps + 1):
        d2, fwd, bwd, ctr = _diffs(u, dx)
        vals, betas, srcs = [], [], []
        for a, sg, mu in zip(controls, sigs, mus):
            if uses_w:
                f0, slope = _secant_slope(F, t, s, v, sg * ctr, a)
                beta = mu + slope * sg
            else:
                f0 = F.f(t, s, v, 0.0 * u, a)
                beta = np.broadcast_to(mu, u.shape)
            f0 = np.broadcast_to(f0, u.shape)
            drift = np.maximum(beta, 0) * fwd + np.minimum(beta, 0) * bwd
            if central:
                drift = np.where(_central_rows(sg**2 >= np.abs(beta) * dx, u.shape), beta * ctr, drift)
            lu = 0.5 * sg**2 * d2 + drift
            vals.append(lu + f0)
            betas.append(beta)
            srcs.append(f0)
        if len(controls) == 1:
            pol = np.zeros(u.shape, dtype=int)
        else:
            pol = np.argmax(np.stack(vals), axis=0)
        sg = np.choose(pol, [np.broadcast_to(x, u.shape) for x in sigs])
        beta = np.choose(pol, [np.broadcast_to(b, u.shape) for b in betas])
        src = np.choose(pol, srcs)
        a2 = 0.5 * sg**2 / dx**2
        bp = np.maximum(beta, 0) / dx
        bm = np.maximum(-beta, 0) / dx
        if central:
            cent = _central_rows(sg**2 >= np.abs(beta) * dx, u.shape)
            bp = np.where(cent, beta / (2 * dx), bp)
            bm = np.where(cent, -beta / (2 * dx), bm)
        a2 = a2.copy()
        a2[0] = 0.0
        a2[-1] = 0.0
        bp = bp.copy()
        bm = bm.copy()
        bp[-1] = 0.0
        bm[0] = 0.0
        lo = -dt * (a2 + bm)
        up = -dt * (a2 + bp)
        di = 1 + dt * (2 * a2 + bp + bm)
        new = _tridiag_solve(lo, di, up, v + dt * src)
        change = float(np.max(np.abs(new - u)))
        u = new
        if single:
            return u, sweep
        if change <= tol * (1 + float(np.max(np.abs(u)))) and (prev_policy is None or np.array_equal(pol, prev_policy)):
            if sweep > 1:
                return u, sweep
        prev_policy = pol
    raise PolicyIterationError(f"policy iteration did not converge in {max_sweeps} sweeps (last change {change:.2e})")


def _step_size(F, cfg: SolverConfig, mesh: SlabMesh, t0, t1, s_fn) -> tuple[float, float]:
    """``(dt, fw)``: the time step and the sampled bound on ``|f_w|``."""
    if cfg.scheme == "implicit":
        return (cfg.dt if cfg.dt is not None else cfg.implicit_dt), math.inf
    s = _sample_s(s_fn, t0, t1)
    sig, mu, fy, fw = coefficient_bounds(F, t0, t1, s)
    if fw > 0 and sig > 0 and fw * sig * mesh.dx > sig**2 * (1 + 1e-12):
        raise CFLError(f"cell Peclet condition fails: |f_w| sigma dx = {fw * sig * mesh.dx:.3g} > sigma^2 = {sig**2:.3g}")
    bound = mesh.cfl_bound(sig, mu, fy)
    if cfg.dt is not None:
        mesh.check_cfl(cfg.dt, sig, mu, fy)
        return cfg.dt, fw
    return cfg.cfl * bound, fw


def march_columns(
    F: GeneratorSpec,
    t0: float,
    t1: float,
    s_fn: Callable[[float], np.ndarray],
    terminal: np.ndarray,
    mesh: SlabMesh,
    cfg: SolverConfig,
    stops: Sequence[float] = (),
    on_stop: Callable[[float, np.ndarray], None] | None = None,
) -> np.ndarray:
    """March ``terminal`` (shape ``(Nx, Ns)``) from ``t1`` back to ``t0``.

    ``s_fn(t)`` gives the summary value of every column at time ``t``.
    ``on_stop(t, v)`` is called at each time in ``stops`` that lies in
    ``[t0, t1]``; steps are aligned to those times.
    """
    F.require_coefficients()
    if F.dim != 1:
        raise StructureError("the column marcher is one-dimensional")
    v = np.array(terminal, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if t1 - t0 <= 0:
        if on_stop is not None:
            for t in stops:
                if abs(t - t0) < 1e-14:
                    on_stop(t0, v)
        return v
    dt_target, fw = _step_size(F, cfg, mesh, t0, t1, s_fn)
    hybrid = cfg.drift == "hybrid"
    uses_w = _driver_uses_w(F, t1, np.atleast_1d(s_fn(t1)))
    eps = 1e-12 * max(1.0, t1)
    cuts = sorted({t0, t1} | {float(t) for t in stops if t0 - eps <= t <= t1 + eps})
    cuts = [c for k, c in enumerate(cuts) if k == 0 or c - cuts[k - 1] > eps]
    stop_set = [float(t) for t in stops]

    def notify(t, v):
        if on_stop is not None and any(abs(t - st) <= eps for st in stop_set):
            on_stop(t, v)

    notify(cuts[-1], v)
    for hi, lo in zip(cuts[::-1][:-1], cuts[::-1][1:]):
        m = max(1, math.ceil((hi - lo) / dt_target - 1e-9))
        dt = (hi - lo) / m
        for k in range(m):
            t = hi - k * dt
            s = np.atleast_1d(s_fn(t))
            if cfg.scheme == "explicit":
                v = explicit_step(F, t, s, v, mesh.dx, dt, fw if hybrid else math.inf)
            else:
                v, _ = implicit_step(F, t - dt, np.atleast_1d(s_fn(t - dt)), v, mesh.dx, dt,
                                     cfg.max_sweeps, cfg.policy_tol, uses_w, hybrid)
        notify(lo, v)
    return v


# --------------------------------------------------------------------------
# single slab


def solve_slab(
    frozen: FrozenGenerator,
    terminal: ValueField,
    slab: tuple[float, float],
    mesh: SlabMesh | None = None,
    scheme: str = "explicit",
    cfg: SolverConfig | None = None,
    t_stop: float | None = None,
) -> ValueField:
    """Solve one frozen slab equation from ``slab[1]`` back to ``slab[0]`` (or ``t_stop``)."""
    mesh = terminal.mesh if mesh is None else mesh
    cfg = (cfg or SolverConfig(dx=mesh.dx)).replace(scheme=scheme, dx=mesh.dx)
    if mesh.dt is not None:
        cfg = cfg.replace(dt=mesh.dt)
    t0, t1 = slab
    t_stop = t0 if t_stop is None else t_stop
    s_fn = lambda t: np.array([frozen.summary(min(t, t1 - 1e-15) if t1 > t0 else t)])  # noqa: E731
    vals = march_columns(frozen.generator, t_stop, t1, s_fn, terminal.values, mesh, cfg)
    return ValueField(mesh, t_stop, vals[:, 0] if terminal.values.ndim == 1 else vals)


# --------------------------------------------------------------------------
# lift


def _interp_clamped(grid: np.ndarray, values: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Row-wise linear interpolation: ``values`` (Nx, Ns) on ``grid`` (Ns,), ``query`` (Nx, Q)."""
    if grid.size == 1:
        return np.repeat(values[:, :1], query.shape[1], axis=1)
    q = np.clip(query, grid[0], grid[-1])
    h = grid[1] - grid[0]
    pos = (q - grid[0]) / h
    k = np.clip(np.floor(pos).astype(int), 0, grid.size - 2)
    w = pos - k
    rows = np.arange(values.shape[0])[:, None]
    return (1 - w) * values[rows, k] + w * values[rows, k + 1]


def sigma_max(F: GeneratorSpec, t0: float, t1: float, s_values=(0.0,)) -> float:
    if not F.has_coefficients:
        return 1.0
    return coefficient_bounds(F, t0, t1, np.atleast_1d(np.asarray(s_values, float)))[0]


def _auto_radius(F, t, T, x_norm, cfg, s_hint=(0.0,)):
    if cfg.radius is not None:
        return cfg.radius
    sig = sigma_max(F, t, T, s_hint)
    return max(6 * sig * math.sqrt(max(T - t, 0.0)), 4 * x_norm + 4)


@dataclass
class Snapshot:
    time: float
    s: np.ndarray
    values: np.ndarray  # (Nx, Ns)


@dataclass
class LiftSolution:
    """Result of a lift solve: the query value plus optional recorded fields."""

    value: float
    t: float
    x0: float
    s0: float
    mesh: SlabMesh
    grid: TimeGrid
    weights: np.ndarray
    field: ValueField
    snapshots: list = field(default_factory=list)
    growth: float = 0.0

    def snapshot_at(self, t: float) -> Snapshot:
        best = min(self.snapshots, key=lambda sn: abs(sn.time - t))
        if abs(best.time - t) > 1e-9:
            raise KeyError(f"no recorded field at t = {t}")
        return best

    def evaluate(self, t: float, s, x) -> np.ndarray:
        """Bilinear lookup of the recorded field at ``t`` for states ``(s, x)``."""
        sn = self.snapshot_at(t)
        s = np.atleast_1d(np.asarray(s, float))
        x = np.atleast_1d(np.asarray(x, float))
        xs = self.mesh.nodes
        xq = np.clip(x, xs[0], xs[-1])
        h = self.mesh.dx
        pos = (xq - xs[0]) / h
        k = np.clip(np.floor(pos).astype(int), 0, xs.size - 2)
        w = pos - k
        lo = self._interp_s(sn, k, s)
        hi = self._interp_s(sn, k + 1, s)
        return (1 - w) * lo + w * hi

    def gradient(self, t: float, s, x) -> np.ndarray:
        """Central difference in ``x`` of the recorded field."""
        h = self.mesh.dx
        return (self.evaluate(t, s, np.asarray(x) + h) - self.evaluate(t, s, np.asarray(x) - h)) / (2 * h)

    @staticmethod
    def _interp_s(sn, rows, s):
        vals = sn.values[rows]
        if sn.s.size == 1:
            return vals[:, 0]
        q = np.clip(s, sn.s[0], sn.s[-1])
        h = sn.s[1] - sn.s[0]
        pos = (q - sn.s[0]) / h
        k = np.clip(np.floor(pos).astype(int), 0, sn.s.size - 2)
        w = pos - k
        idx = np.arange(rows.size)
        return (1 - w) * vals[idx, k] + w * vals[idx, k + 1]


def lift_weights(F: GeneratorSpec, g: TerminalSpec, grid: TimeGrid, mode: str) -> np.ndarray:
    """Node weights of the lift summary; checks that ``F`` reads the same summary."""
    if g.summary is None:
        raise LiftError(f"terminal {g.name!r} declares no summary form")
    measure = g.measure if g.measure is not None and not g.measure.is_zero else F.measure
    if measure is None or measure.is_zero:
        w = np.zeros(len(grid))
    else:
        w = measure.node_weights(grid, mode)
    if not F.path_free:
        for i in range(grid.n):
            for t in (grid[i], 0.5 * (grid[i] + grid[i + 1])):
                c = prefix_weights(F.measure, grid, i, t, mode)
                if not np.allclose(c, w[: i + 1], atol=1e-12):
                    raise LiftError(
                        "the generator's path summary is not the lift summary on this grid "
                        "(a path-dependent generator needs an atomic measure supported on grid points "
                        "shared with the terminal)"
                    )
    return w


def solve_vn_lift(
    F: GeneratorSpec,
    g: TerminalSpec,
    grid: TimeGrid,
    query: tuple[float, Path],
    cfg: SolverConfig | None = None,
    record: Sequence[float] = (),
) -> LiftSolution:
    """``v^n(t, x)`` through the Markovian lift in ``(s, x)``.

    ``s`` is the running weighted key sum ``sum_{j<=i} w_j x_{t_j}`` of the
    summary measure; at each grid time the boundary condition becomes the
    shift ``s -> s + w_i x``. ``record`` lists times at which the full field
    is kept (for trajectory lookups).
    """
    cfg = cfg or SolverConfig()
    F.require_coefficients()
    if F.dim != 1:
        raise StructureError("the lift solver is one-dimensional; use solve_markov_2d for d = 2")
    t, x = query
    t = float(t)
    mode = cfg.mode
    w = lift_weights(F, g, grid, mode)
    T = grid.horizon
    i0 = grid.slab_index(t)
    key = x.key(grid, min(i0, grid.n))[:, 0]
    x0 = float(x.at(t)[0])
    if i0 == grid.n:
        val = float(g.on_keys(grid, key[None, :], mode)[0])
        mesh = SlabMesh.around(x0, cfg.dx, cfg.dx)
        return LiftSolution(val, t, x0, float(w @ key), mesh, grid, w,
                            ValueField(mesh, t, np.full(mesh.size, val)))
    s0 = float(w[: i0 + 1] @ key)
    R = _auto_radius(F, t, T, x.norm, cfg, (s0,))
    mesh = SlabMesh.around(x0, R, cfg.dx)
    xs = mesh.nodes
    n = grid.n

    def s_grid(k):
        W = float(np.sum(w[i0 + 1 : k + 1]))
        if W <= 1e-15:
            return np.array([s0])
        lo, hi = s0 + W * xs[0], s0 + W * xs[-1]
        return np.linspace(lo, hi, cfg.s_nodes)

    snaps: list[Snapshot] = []
    record = sorted(float(r) for r in record)

    # terminal of the last slab
    S = s_grid(n - 1)
    V = np.asarray(g.summary.g0(S[None, :] + w[n] * xs[:, None], xs[:, None] * np.ones_like(S)[None, :]), float)
    V = np.broadcast_to(V, (xs.size, S.size)).copy()
    if record and abs(record[-1] - T) < 1e-12:
        snaps.append(Snapshot(T, S.copy(), V.copy()))
    for k in range(n - 1, i0 - 1, -1):
        lo_t = t if k == i0 else grid[k]
        S_k = S

        def keep(tt, vv, S_k=S_k, k=k):
            if abs(tt - grid[k + 1]) < 1e-12 and k + 1 <= n - 1:
                return  # recorded with the next slab's key convention
            if abs(tt - T) < 1e-12:
                return
            snaps.append(Snapshot(tt, S_k.copy(), vv.copy()))

        stops = [r for r in record if lo_t - 1e-12 <= r < grid[k + 1] - 1e-12]
        V = march_columns(F, lo_t, grid[k + 1], lambda tt, S_k=S_k: S_k, V, mesh, cfg, stops, keep)
        if k > i0:
            S_prev = s_grid(k - 1)
            V = _interp_clamped(S_k, V, S_prev[None, :] + w[k] * xs[:, None])
            S = S_prev
    val = float(np.interp(x0, xs, V[:, 0]))
    fld = ValueField(mesh, t, V[:, 0], np.array([s0]))
    sol = LiftSolution(val, t, x0, s0, mesh, grid, w, fld, sorted(snaps, key=lambda sn: sn.time))
    sol.growth = fld.growth_constant(float(np.max(np.abs(key))))
    return sol


def lift_value(F, g, grid, query, cfg=None) -> float:
    return solve_vn_lift(F, g, grid, query, cfg).value


# --------------------------------------------------------------------------
# exact nested recursion


def solve_vn_exact(
    F: GeneratorSpec,
    g: TerminalSpec,
    grid: TimeGrid,
    query: tuple[float, Path],
    cfg: SolverConfig | None = None,
) -> float:
    """``v^n(t, x)`` by the full nested key recursion (oracle, few slabs only).

    Every key extension ``x_{t_j}`` after the query time is sampled on a
    ``key_nodes`` mesh of half-width ``key_sd * sigma_max * sqrt(t_j - t)``;
    terminal fields of a slab are interpolated linearly in the new key entry.
    """
    cfg = cfg or SolverConfig()
    F.require_coefficients()
    if F.dim != 1:
        raise StructureError("the exact solver is one-dimensional")
    t, x = query
    t = float(t)
    mode = cfg.mode
    n = grid.n
    i0 = grid.slab_index(t)
    key = x.key(grid, min(i0, n))[:, 0]
    if i0 == n:
        return float(g.on_keys(grid, key[None, :], mode)[0])
    if n - i0 > cfg.max_exact_slabs:
        raise DepthError(f"{n - i0} slabs remain; the exact recursion is capped at {cfg.max_exact_slabs}")
    x0 = float(x.at(t)[0])
    T = grid.horizon
    R = _auto_radius(F, t, T, x.norm, cfg)
    mesh = SlabMesh.around(x0, R, cfg.dx)
    xs = mesh.nodes
    sig = sigma_max(F, t, T)
    ext = []  # key meshes for x_{t_j}, j = i0+1 .. n-1
    for j in range(i0 + 1, n):
        half = min(R, max(cfg.key_sd * sig * math.sqrt(grid[j] - t), cfg.dx))
        ext.append(np.linspace(x0 - half, x0 + half, cfg.key_nodes))

    def keys_at(depth):
        """All keys (count, i0+1+depth) with ``depth`` extension entries."""
        if depth == 0:
            return key[None, :]
        mesh_prod = np.stack(np.meshgrid(*ext[:depth], indexing="ij"), axis=-1).reshape(-1, depth)
        return np.hstack([np.repeat(key[None, :], mesh_prod.shape[0], axis=0), mesh_prod])

    def s_fn_for(keys, k):
        if F.path_free:
            return lambda tt: np.zeros(keys.shape[0])

        def fn(tt):
            c = prefix_weights(F.measure, grid, k, min(tt, grid[k + 1] - 1e-12 * T), mode)
            return keys @ c

        return fn

    # last slab: terminal from g on full keys
    depth = n - 1 - i0
    K = keys_at(depth)
    full = np.concatenate([np.repeat(K[:, None, :], xs.size, axis=1), xs[None, :, None] * np.ones((K.shape[0], 1, 1))], axis=2)
    V = g.on_keys(grid, full, mode).T  # (Nx, count)
    for k in range(n - 1, i0 - 1, -1):
        lo_t = t if k == i0 else grid[k]
        K = keys_at(k - i0)
        V = march_columns(F, lo_t, grid[k + 1], s_fn_for(K, k), V, mesh, cfg)
        if k > i0:
            m = ext[k - i0 - 1]
            count = V.shape[1] // m.size
            V3 = V.reshape(xs.size, count, m.size)
            # glue: terminal of slab k-1 at node x is the slab-k field for key entry x, at x
            V = np.stack([_interp_clamped(m, V3[:, c, :], xs[:, None])[:, 0] for c in range(count)], axis=1)
    return float(np.interp(x0, xs, V[:, 0]))


# --------------------------------------------------------------------------
# two-dimensional Markovian solver


def solve_markov_2d(
    F: GeneratorSpec,
    g0: Callable[[np.ndarray, np.ndarray], np.ndarray],
    t: float,
    x0: Sequence[float],
    horizon: float,
    cfg: SolverConfig | None = None,
) -> float:
    """Explicit monotone scheme for path-free ``F`` with ``d = 2`` and ``g = g0(x_T)``.

    Cross derivatives use the seven-point stencil, which is monotone when the
    diffusion matrix ``a = sigma sigma^T / 2`` satisfies ``|a12| <= min(a11, a22)``.
    """
    cfg = cfg or SolverConfig()
    F.require_coefficients()
    if F.dim != 2 or not F.path_free:
        raise StructureError("the 2-d solver needs a path-free generator with d = 2")
    x0 = np.asarray(x0, float)
    R = _auto_radius_2d(F, t, horizon, float(np.max(np.abs(x0))), cfg)
    k = math.ceil(R / cfg.dx - 1e-9)
    dx = cfg.dx
    ax = dx * np.arange(-k, k + 1)
    X1, X2 = np.meshgrid(x0[0] + ax, x0[1] + ax, indexing="ij")
    v = np.asarray(g0(X1, X2), float)
    s = np.zeros(1)
    amax = mmax = 0.0
    for a in F.controls:
        for tt in (t, horizon):
            sg = np.asarray(F.sig(tt, s, a), float).reshape(2, 2)
            am = 0.5 * sg @ sg.T
            if abs(am[0, 1]) > min(am[0, 0], am[1, 1]) + 1e-15:
                raise StructureError("diffusion violates |a12| <= min(a11, a22); the stencil would not be monotone")
            amax = max(amax, am[0, 0] + am[1, 1] - abs(am[0, 1]))
            mmax = max(mmax, float(np.sum(np.abs(F.drift(tt, s, a)))))
    bound = 1.0 / (2 * amax / dx**2 + mmax / dx + F.lipschitz)
    dt_target = cfg.dt if cfg.dt is not None else cfg.cfl * bound
    if dt_target > bound * (1 + 1e-12):
        raise CFLError(f"dt = {dt_target:.3g} exceeds the bound {bound:.3g}")
    m = max(1, math.ceil((horizon - t) / dt_target - 1e-9))
    dt = (horizon - t) / m
    for step in range(m):
        tt = horizon - step * dt
        v = v + dt * _hamiltonian_2d(F, tt, v, dx)
    from scipy.interpolate import RegularGridInterpolator

    return float(RegularGridInterpolator((x0[0] + ax, x0[1] + ax), v)(x0[None, :])[0])


def _auto_radius_2d(F, t, T, xn, cfg):
    if cfg.radius is not None:
        return cfg.radius
    sig = max(float(np.max(np.abs(np.asarray(F.sig(T, np.zeros(1), a), float)))) for a in F.controls)
    return max(6 * sig * math.sqrt(max(T - t, 0)), 4 * xn + 4)


def _hamiltonian_2d(F, t, v, dx):
    z = np.zeros_like(v)
    d11, d22, d12p, d12m = z.copy(), z.copy(), z.copy(), z.copy()
    d11[1:-1, :] = (v[2:, :] - 2 * v[1:-1, :] + v[:-2, :]) / dx**2
    d22[:, 1:-1] = (v[:, 2:] - 2 * v[:, 1:-1] + v[:, :-2]) / dx**2
    c = v[1:-1, 1:-1]
    # seven-point stencils for a12 > 0 and a12 < 0
    d12p[1:-1, 1:-1] = (2 * c + v[2:, 2:] + v[:-2, :-2] - v[2:, 1:-1] - v[:-2, 1:-1] - v[1:-1, 2:] - v[1:-1, :-2]) / (2 * dx**2)
    d12m[1:-1, 1:-1] = -(2 * c + v[2:, :-2] + v[:-2, 2:] - v[2:, 1:-1] - v[:-2, 1:-1] - v[1:-1, 2:] - v[1:-1, :-2]) / (2 * dx**2)
    f1, b1, f2, b2 = z.copy(), z.copy(), z.copy(), z.copy()
    f1[:-1, :] = (v[1:, :] - v[:-1, :]) / dx
    b1[1:, :] = (v[1:, :] - v[:-1, :]) / dx
    f2[:, :-1] = (v[:, 1:] - v[:, :-1]) / dx
    b2[:, 1:] = (v[:, 1:] - v[:, :-1]) / dx
    c1, c2 = z.copy(), z.copy()
    c1[1:-1, :] = (v[2:, :] - v[:-2, :]) / (2 * dx)
    c2[:, 1:-1] = (v[:, 2:] - v[:, :-2]) / (2 * dx)
    s = np.zeros(1)
    best = None
    for a in F.controls:
        sg = np.asarray(F.sig(t, s, a), float).reshape(2, 2)
        am = 0.5 * sg @ sg.T
        mu = np.asarray(F.drift(t, s, a), float).reshape(2)
        cross = d12p if am[0, 1] >= 0 else d12m
        w1 = sg[0, 0] * c1 + sg[1, 0] * c2
        w2 = sg[0, 1] * c1 + sg[1, 1] * c2
        fv = np.asarray(F.driver(t, 0.0, v, np.stack([w1, w2], -1), a), float) * np.ones_like(v)
        h = (
            fv
            + max(mu[0], 0) * f1 + min(mu[0], 0) * b1
            + max(mu[1], 0) * f2 + min(mu[1], 0) * b2
            + am[0, 0] * d11 + am[1, 1] * d22 + 2 * am[0, 1] * cross
        )
        best = h if best is None else np.maximum(best, h)
    return best


# --------------------------------------------------------------------------
# comparison


@dataclass
class ComparisonResult:
    ok: bool
    max_violation: float
    inconclusive: bool = False
    note: str = ""


def comparison_check(u, v, tol: float = TOL_MONOTONE, premise_ok: bool | None = True) -> ComparisonResult:
    """Check ``u >= v - tol`` on shared mesh nodes and query values.

    ``u`` and ``v`` are arrays, :class:`ValueField`, :class:`LiftSolution`
    or plain numbers with matching shapes. ``premise_ok=False`` marks the
    result inconclusive (data not ordered).
    """

    def arr(obj):
        if isinstance(obj, LiftSolution):
            return np.concatenate([[obj.value], obj.field.values.ravel()])
        if isinstance(obj, ValueField):
            return obj.values.ravel()
        return np.atleast_1d(np.asarray(obj, dtype=float)).ravel()

    a, b = arr(u), arr(v)
    if a.shape != b.shape:
        raise ValueError("reports do not share a mesh")
    viol = float(np.max(np.maximum(b - a, 0.0))) if a.size else 0.0
    if premise_ok is False:
        return ComparisonResult(False, viol, True, "premise F1 >= F2, g1 >= g2 not met")
    return ComparisonResult(viol <= tol, viol)


def check_premise(F1: GeneratorSpec, F2: GeneratorSpec, g1: TerminalSpec, g2: TerminalSpec,
                  samples: int = 100, seed: int = 0, horizon: float = 1.0) -> bool:
    """Sampled check of ``F1 >= F2`` and ``g1 >= g2``."""
    from .generators import random_step_path

    rng = np.random.default_rng(seed)
    for _ in range(samples):
        x = random_step_path(rng, horizon)
        t = float(rng.uniform(0, horizon))
        y, z, gam = rng.standard_normal(3)
        if F1.evaluate(t, x, y, z, gam) < F2.evaluate(t, x, y, z, gam) - 1e-12:
            return False
        if g1(x) < g2(x) - 1e-12:
            return False
    return True
