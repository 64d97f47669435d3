"""Time grids, piecewise paths, projections and path metrics.

Paths are finite piecewise objects: ``"pc"`` paths are right-continuous step
functions and ``"pl"`` paths are piecewise linear, where a jump is encoded by
two consecutive nodes sharing the same time (left limit first, then the value).
Everything here is immutable and pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np

PC = "pc"
PL = "pl"
_MODES = (PC, PL)

TIME_RTOL = 1e-12


class DomainError(ValueError):
    """A time or argument outside the domain of an operation."""


class ModeError(ValueError):
    """An operation was called with a path of the wrong mode."""


def _tol(horizon: float) -> float:
    return TIME_RTOL * horizon


# --------------------------------------------------------------------------
# grids


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """A discrete grid ``0 = t_0 < ... < t_n = T``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).copy()
        if pts.ndim != 1 or pts.size < 2:
            raise ValueError("a grid needs at least the two points 0 and T")
        if pts[0] != 0.0:
            raise ValueError(f"grid must start at 0, got {pts[0]}")
        if not np.all(np.diff(pts) > 0):
            raise ValueError("grid points must be strictly increasing")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, horizon: float, n: int) -> "TimeGrid":
        return cls(np.linspace(0.0, horizon, n + 1))

    @property
    def horizon(self) -> float:
        return float(self.points[-1])

    @property
    def n(self) -> int:
        """Number of slabs."""
        return self.points.size - 1

    @property
    def mesh(self) -> float:
        return float(np.max(np.diff(self.points)))

    def __len__(self):
        return self.points.size

    def __getitem__(self, i):
        return float(self.points[i])

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())

    def __repr__(self):
        return f"TimeGrid(n={self.n}, T={self.horizon:g})"

    def contains(self, t: float) -> bool:
        return bool(np.min(np.abs(self.points - t)) <= _tol(self.horizon))

    def is_subgrid_of(self, other: "TimeGrid") -> bool:
        return all(other.contains(t) for t in self.points)

    def _check(self, t: float) -> float:
        tol = _tol(self.horizon)
        if t < -tol or t > self.horizon + tol:
            raise DomainError(f"time {t} outside [0, {self.horizon}]")
        return min(max(float(t), 0.0), self.horizon)

    def slab_index(self, t: float) -> int:
        """Index ``i`` with ``t in [t_i, t_{i+1})``; ``n`` at ``t = T``."""
        t = self._check(t)
        tol = _tol(self.horizon)
        if t >= self.horizon - tol:
            return self.n
        i = int(np.searchsorted(self.points, t + tol, side="right")) - 1
        return min(max(i, 0), self.n - 1)

    def node_index(self, t: float) -> int:
        """Index of the grid point equal to ``t`` (within tolerance)."""
        k = int(np.argmin(np.abs(self.points - t)))
        if abs(self.points[k] - t) > _tol(self.horizon):
            raise DomainError(f"{t} is not a grid point")
        return k

    def refine(self, factor: int = 2) -> "TimeGrid":
        pts = [self.points[:1]]
        for a, b in zip(self.points[:-1], self.points[1:]):
            pts.append(np.linspace(a, b, factor + 1)[1:])
        return TimeGrid(np.concatenate(pts))

    def union(self, other: "TimeGrid") -> "TimeGrid":
        pts = np.union1d(self.points, other.points)
        keep = np.concatenate([[True], np.diff(pts) > _tol(self.horizon)])
        return TimeGrid(pts[keep])


def eta(grid: TimeGrid, t: float) -> float:
    """Last grid point at or before ``t`` (``T`` at ``t = T``)."""
    return grid[grid.slab_index(t)]


def eta_plus(grid: TimeGrid, t: float) -> float:
    """First grid point at or after ``t`` on ``(t_i, t_{i+1}]``; 0 at ``t = 0``."""
    t = grid._check(t)
    tol = _tol(grid.horizon)
    if t <= tol:
        return 0.0
    i = int(np.searchsorted(grid.points, t - tol, side="left"))
    return grid[min(i, grid.n)]


@dataclass(frozen=True)
class GridSequence:
    """A nested refining sequence of grids, one per level ``n >= 1``."""

    rule: Callable[[int], TimeGrid]
    name: str = "custom"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __call__(self, n: int) -> TimeGrid:
        return self.level(n)

    def level(self, n: int) -> TimeGrid:
        if n < 1:
            raise ValueError("levels start at 1")
        if n not in self._cache:
            grid = self.rule(n)
            if n > 1 and not self.level(n - 1).is_subgrid_of(grid):
                raise ValueError(f"grid sequence {self.name!r} is not nested at level {n}")
            self._cache[n] = grid
        return self._cache[n]

    @property
    def horizon(self) -> float:
        return self.level(1).horizon

    @classmethod
    def dyadic(cls, horizon: float = 1.0) -> "GridSequence":
        return cls(lambda n: TimeGrid.uniform(horizon, 2**n), name="dyadic")

    @classmethod
    def geometric(cls, horizon: float = 1.0, base: int = 3) -> "GridSequence":
        names = {2: "dyadic", 3: "triadic"}
        return cls(lambda n: TimeGrid.uniform(horizon, base**n), name=names.get(base, f"base{base}"))

    @classmethod
    def triadic(cls, horizon: float = 1.0) -> "GridSequence":
        return cls.geometric(horizon, 3)

    @classmethod
    def from_grids(cls, grids: Sequence[TimeGrid], name: str = "explicit") -> "GridSequence":
        grids = list(grids)
        for a, b in zip(grids[:-1], grids[1:]):
            if not a.is_subgrid_of(b):
                raise ValueError("grids must be nested")
        if any(g.horizon != grids[0].horizon for g in grids):
            raise ValueError("grids must share the horizon")

        def rule(n):
            if n > len(grids):
                raise ValueError(f"sequence {name!r} only has {len(grids)} levels")
            return grids[n - 1]

        return cls(rule, name=name)

    @classmethod
    def by_name(cls, name: str, horizon: float = 1.0) -> "GridSequence":
        if name == "dyadic":
            return cls.dyadic(horizon)
        if name == "triadic":
            return cls.triadic(horizon)
        if name.startswith("base"):
            return cls.geometric(horizon, int(name[4:]))
        raise ValueError(f"unknown grid sequence {name!r}")


# --------------------------------------------------------------------------
# paths


@dataclass(frozen=True, eq=False)
class Path:
    """A piecewise path on ``[0, T]``.

    ``values[k]`` is the value from ``breakpoints[k]`` on (``pc``) or the node
    value at ``breakpoints[k]`` (``pl``). Past the last breakpoint the path is
    constant.
    """

    breakpoints: np.ndarray
    values: np.ndarray
    mode: str = PC
    horizon: float = 1.0

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ModeError(f"unknown mode {self.mode!r}")
        bp = np.asarray(self.breakpoints, dtype=float).copy()
        vals = np.asarray(self.values, dtype=float).copy()
        if vals.ndim == 1:
            vals = vals[:, None]
        if bp.ndim != 1 or bp.size == 0 or vals.shape[0] != bp.size:
            raise ValueError("need one value per breakpoint")
        tol = _tol(self.horizon)
        if abs(bp[0]) > tol:
            raise ValueError("first breakpoint must be 0")
        bp[0] = 0.0
        if bp[-1] > self.horizon + tol:
            raise DomainError("breakpoints must lie in [0, T]")
        bp = np.minimum(bp, self.horizon)
        if np.any(np.diff(bp) < 0):
            raise ValueError("breakpoints must be non-decreasing")
        if self.mode == PC:
            # collapse repeated times, keeping the right value
            keep = np.concatenate([np.diff(bp) > tol, [True]])
            bp, vals = bp[keep], vals[keep]
        else:
            # at most two nodes per time (left limit, value)
            same = np.diff(bp) <= tol
            if np.any(same[1:] & same[:-1]):
                raise ValueError("at most two PL nodes may share a time")
        if not np.all(np.isfinite(vals)):
            raise ValueError("path values must be finite")
        bp.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "horizon", float(self.horizon))

    # construction helpers
    @classmethod
    def constant(cls, c, horizon: float = 1.0, mode: str = PC) -> "Path":
        c = np.atleast_1d(np.asarray(c, dtype=float))
        return cls(np.array([0.0]), c[None, :], mode, horizon)

    @classmethod
    def from_function(cls, fn: Callable, times: Iterable[float], mode: str = PL, horizon: float = 1.0) -> "Path":
        times = np.asarray(list(times), dtype=float)
        vals = np.array([np.atleast_1d(fn(s)) for s in times], dtype=float)
        return cls(times, vals, mode, horizon)

    @classmethod
    def step(cls, times, values, horizon: float = 1.0) -> "Path":
        """Step path; ``times`` may omit the initial 0 when ``values`` has one more entry."""
        times = np.asarray(times, dtype=float)
        if len(values) == times.size + 1:
            times = np.concatenate([[0.0], times])
        return cls(times, values, PC, horizon)

    # basic properties
    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def norm(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=1)))

    @cached_property
    def _jump_free(self) -> bool:
        if self.mode == PC:
            return self.breakpoints.size == 1 or bool(
                np.all(np.abs(np.diff(self.values, axis=0)) == 0)
            )
        return not np.any(np.diff(self.breakpoints) <= _tol(self.horizon))

    @property
    def is_continuous(self) -> bool:
        return self._jump_free

    @property
    def is_constant(self) -> bool:
        return bool(np.all(self.values == self.values[0]))

    def __repr__(self):
        return f"Path(mode={self.mode}, d={self.dim}, nodes={self.breakpoints.size}, T={self.horizon:g})"

    # evaluation
    def _eval(self, s: np.ndarray, left: bool) -> np.ndarray:
        bp, vals, tol = self.breakpoints, self.values, _tol(self.horizon)
        if left:
            idx = np.searchsorted(bp, s - tol, side="left") - 1
        else:
            idx = np.searchsorted(bp, s + tol, side="right") - 1
        idx = np.clip(idx, 0, bp.size - 1)
        out = vals[idx].copy()
        if self.mode == PL:
            nxt = np.minimum(idx + 1, bp.size - 1)
            span = bp[nxt] - bp[idx]
            inner = (nxt > idx) & (span > tol)
            if np.any(inner):
                w = np.clip((s[inner] - bp[idx[inner]]) / span[inner], 0.0, 1.0)[:, None]
                out[inner] = (1 - w) * vals[idx[inner]] + w * vals[nxt[inner]]
        return out

    def __call__(self, s):
        """Right-continuous evaluation; returns shape ``(d,)`` or ``(k, d)``."""
        arr = np.asarray(s, dtype=float)
        out = self._eval(np.atleast_1d(arr), left=False)
        return out[0] if arr.ndim == 0 else out

    def left_limit(self, s):
        arr = np.asarray(s, dtype=float)
        out = self._eval(np.atleast_1d(arr), left=True)
        out[np.atleast_1d(arr) <= _tol(self.horizon)] = self.values[0]
        return out[0] if arr.ndim == 0 else out

    def at(self, s: float) -> np.ndarray:
        return self(float(s))

    def sample(self, times) -> np.ndarray:
        return self(np.asarray(times, dtype=float))

    def stopped(self, t: float) -> "Path":
        """The stopped path ``x_{t ^ .}``."""
        t = float(t)
        tol = _tol(self.horizon)
        if self.mode == PC:
            keep = self.breakpoints <= t + tol
            return Path(self.breakpoints[keep], self.values[keep], PC, self.horizon)
        keep = self.breakpoints < t - tol
        bp = np.concatenate([self.breakpoints[keep], [t]])
        vals = np.vstack([self.values[keep], self.at(t)[None, :]])
        # keep a jump sitting exactly at t
        if np.any(np.abs(self.breakpoints - t) <= tol):
            lim = self.left_limit(t)
            if not np.allclose(lim, self.at(t)) and t > tol:
                bp = np.concatenate([self.breakpoints[keep], [t, t]])
                vals = np.vstack([self.values[keep], lim[None, :], self.at(t)[None, :]])
        if t <= tol:
            return Path.constant(self.at(0.0), self.horizon, PL)
        return Path(bp, vals, PL, self.horizon)

    def with_mode(self, mode: str) -> "Path":
        """Lossless conversion ``pc -> pl`` (jumps become duplicate nodes)."""
        if mode == self.mode:
            return self
        if mode == PL:
            bp, vals = [self.breakpoints[0]], [self.values[0]]
            for k in range(1, self.breakpoints.size):
                bp += [self.breakpoints[k], self.breakpoints[k]]
                vals += [self.values[k - 1], self.values[k]]
            return Path(np.array(bp), np.array(vals), PL, self.horizon)
        if self.breakpoints.size == 1:
            return Path(self.breakpoints, self.values, PC, self.horizon)
        raise ModeError("a piecewise-linear path cannot be represented as piecewise constant")

    def shifted(self, delta) -> "Path":
        return Path(self.breakpoints, self.values + np.atleast_1d(delta), self.mode, self.horizon)

    def key(self, grid: TimeGrid, i: int | None = None) -> np.ndarray:
        """The frozen key ``(x_{t_0}, ..., x_{t_i})`` of shape ``(i+1, d)``."""
        i = grid.n if i is None else i
        return self.sample(grid.points[: i + 1])


def _bracket(grid: TimeGrid, t: float) -> int:
    """``k`` with ``t in (t_k, t_{k+1}]``."""
    t = grid._check(t)
    tol = _tol(grid.horizon)
    k = int(np.searchsorted(grid.points, t - tol, side="left")) - 1
    return min(max(k, 0), grid.n - 1)


def project(grid: TimeGrid, x: Path, t: float | None = None, mode: str | None = None) -> Path:
    """The projection ``Pi^n_t[x]``; ``t`` defaults to ``T``.

    ``mode`` selects the branch (defaults to ``x.mode``): ``pc`` freezes the
    grid values, ``pl`` interpolates them linearly. At ``t = 0`` the result is
    the constant path ``x_0``.
    """
    mode = x.mode if mode is None else mode
    t = grid.horizon if t is None else grid._check(t)
    tol = _tol(grid.horizon)
    if t <= tol:
        return Path.constant(x.at(0.0), grid.horizon, mode)
    k = _bracket(grid, t)
    times = grid.points[: k + 1]
    vals = x.sample(times)
    xt = x.at(t)
    if t - times[-1] > tol:
        times = np.concatenate([times, [t]])
        vals = np.vstack([vals, xt[None, :]])
    return Path(times, vals, mode, grid.horizon)


def path_from_key(grid: TimeGrid, key, mode: str = PC, t: float | None = None, xt=None) -> Path:
    """Rebuild ``Pi^n_t`` from a key ``(x_{t_0}, ..., x_{t_i})``.

    ``t`` defaults to ``t_i``. ``xt`` (the value at ``t``) defaults to the last
    key entry.
    """
    key = np.asarray(key, dtype=float)
    if key.ndim == 1:
        key = key[:, None]
    i = key.shape[0] - 1
    if i > grid.n:
        raise ValueError("key longer than the grid")
    t = grid[i] if t is None else float(t)
    times = grid.points[: i + 1]
    vals = key
    if t - times[-1] > _tol(grid.horizon):
        xt = key[-1] if xt is None else np.atleast_1d(xt)
        times = np.concatenate([times, [t]])
        vals = np.vstack([vals, np.asarray(xt, dtype=float)[None, :]])
    return Path(times, vals, mode, grid.horizon)


def concat(x: Path, t: float, xp: Path | float | np.ndarray) -> Path:
    """``x`` on ``[0, t)`` followed by ``xp`` on ``[t, T]``.

    A scalar or vector ``xp`` is read as a constant path. Two ``pc`` inputs give
    a ``pc`` path; anything involving ``pl`` gives a ``pl`` path, with a
    duplicated node at ``t`` when there is a jump.
    """
    if not isinstance(xp, Path):
        xp = Path.constant(xp, x.horizon, x.mode)
    if xp.dim != x.dim or abs(xp.horizon - x.horizon) > _tol(x.horizon):
        raise ValueError("paths must share dimension and horizon")
    t = float(t)
    tol = _tol(x.horizon)
    if t <= tol:
        return xp
    if xp.is_constant and xp.mode != x.mode:
        xp = Path(xp.breakpoints[:1], xp.values[:1], x.mode, xp.horizon)
    if x.is_constant and x.breakpoints.size == 1 and x.mode != xp.mode:
        x = Path(x.breakpoints, x.values, xp.mode, x.horizon)
    if x.mode == PC and xp.mode == PC:
        keep_x = x.breakpoints < t - tol
        keep_p = xp.breakpoints > t + tol
        bp = np.concatenate([x.breakpoints[keep_x], [t], xp.breakpoints[keep_p]])
        vals = np.vstack([x.values[keep_x], xp.at(t)[None, :], xp.values[keep_p]])
        return Path(bp, vals, PC, x.horizon)
    x, xp = x.with_mode(PL), xp.with_mode(PL)
    keep_x = x.breakpoints < t - tol
    keep_p = xp.breakpoints > t + tol
    left, right = x.left_limit(t), xp.at(t)
    mid_t, mid_v = [t], [right]
    if not np.allclose(left, right, rtol=0, atol=1e-15):
        mid_t, mid_v = [t, t], [left, right]
    bp = np.concatenate([x.breakpoints[keep_x], mid_t, xp.breakpoints[keep_p]])
    vals = np.vstack([x.values[keep_x], np.array(mid_v), xp.values[keep_p]])
    return Path(bp, vals, PL, x.horizon)


# --------------------------------------------------------------------------
# measures


@dataclass(frozen=True, eq=False)
class AtomicMeasure:
    """Finite measure: atoms plus an optional piecewise-linear density."""

    atom_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    atom_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    density_grid: np.ndarray | None = None
    density_values: np.ndarray | None = None

    def __post_init__(self):
        at = np.atleast_1d(np.asarray(self.atom_times, dtype=float))
        aw = np.atleast_1d(np.asarray(self.atom_weights, dtype=float))
        if at.shape != aw.shape:
            raise ValueError("one weight per atom")
        if np.any(aw < 0):
            raise ValueError("atom weights must be nonnegative")
        order = np.argsort(at, kind="stable")
        object.__setattr__(self, "atom_times", at[order])
        object.__setattr__(self, "atom_weights", aw[order])
        if self.density_grid is not None:
            dg = np.asarray(self.density_grid, dtype=float)
            dv = np.asarray(self.density_values, dtype=float)
            if dg.shape != dv.shape or dg.size < 2 or np.any(np.diff(dg) <= 0):
                raise ValueError("density needs an increasing grid with one value per point")
            if np.any(dv < 0):
                raise ValueError("density must be nonnegative")
            object.__setattr__(self, "density_grid", dg)
            object.__setattr__(self, "density_values", dv)

    @classmethod
    def zero(cls) -> "AtomicMeasure":
        return cls()

    @classmethod
    def atoms(cls, times, weights) -> "AtomicMeasure":
        return cls(np.asarray(times, float), np.asarray(weights, float))

    @classmethod
    def lebesgue(cls, horizon: float = 1.0, scale: float = 1.0) -> "AtomicMeasure":
        return cls(density_grid=np.array([0.0, horizon]), density_values=np.array([scale, scale]))

    def __add__(self, other: "AtomicMeasure") -> "AtomicMeasure":
        dg = dv = None
        if self.density_grid is not None or other.density_grid is not None:
            grids = [m.density_grid for m in (self, other) if m.density_grid is not None]
            dg = np.unique(np.concatenate(grids))
            dv = self.density(dg) + other.density(dg)
        return AtomicMeasure(
            np.concatenate([self.atom_times, other.atom_times]),
            np.concatenate([self.atom_weights, other.atom_weights]),
            dg,
            dv,
        )

    def scaled(self, c: float) -> "AtomicMeasure":
        return AtomicMeasure(
            self.atom_times,
            c * self.atom_weights,
            self.density_grid,
            None if self.density_values is None else c * self.density_values,
        )

    @property
    def has_density(self) -> bool:
        return self.density_grid is not None and bool(np.any(self.density_values > 0))

    @property
    def is_zero(self) -> bool:
        return not self.has_density and not np.any(self.atom_weights > 0)

    def density(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if self.density_grid is None:
            return np.zeros_like(s)
        return np.interp(s, self.density_grid, self.density_values, left=0.0, right=0.0)

    @property
    def total(self) -> float:
        return self.mass(0.0, np.inf, True, True)

    def _density_integral(self, a: float, b: float, fn: Callable | None = None) -> float:
        """``int_a^b fn(s) density(s) ds``; exact when fn is piecewise linear between breaks."""
        if self.density_grid is None or b <= a:
            return 0.0
        lo, hi = max(a, self.density_grid[0]), min(b, self.density_grid[-1])
        if hi <= lo:
            return 0.0
        pts = self.density_grid[(self.density_grid > lo) & (self.density_grid < hi)]
        pts = np.concatenate([[lo], pts, [hi]])
        left, right = pts[:-1], pts[1:]
        mid = 0.5 * (left + right)
        eps = 1e-14 * max(1.0, hi)
        dl = self.density(left + eps * 0)
        dm = self.density(mid)
        dr = self.density(right)
        if fn is None:
            fl = fm = fr = 1.0
        else:
            fl, fm, fr = fn(left, False), fn(mid, False), fn(right, True)
        return float(np.sum((right - left) / 6.0 * (fl * dl + 4 * fm * dm + fr * dr)))

    def mass(self, a: float, b: float, closed_left: bool = True, closed_right: bool = False) -> float:
        """``lambda`` of the interval from ``a`` to ``b`` (default ``[a, b)``)."""
        at, aw = self.atom_times, self.atom_weights
        tol = 1e-12 * max(1.0, abs(b) if np.isfinite(b) else 1.0)
        lo = at >= a - tol if closed_left else at > a + tol
        hi = at <= b + tol if closed_right else at < b - tol
        out = float(np.sum(aw[lo & hi]))
        return out + self._density_integral(a, b)

    def integrate(self, x: Path, a: float = 0.0, b: float | None = None, absolute: bool = False) -> np.ndarray:
        """``int_{[a, b]} x_s lambda(ds)`` (closed interval, right values at atoms)."""
        b = x.horizon if b is None else b
        out = np.zeros(x.dim)
        tol = _tol(x.horizon)
        sel = (self.atom_times >= a - tol) & (self.atom_times <= b + tol)
        if np.any(sel):
            vals = x.sample(self.atom_times[sel])
            if absolute:
                vals = np.linalg.norm(vals, axis=1, keepdims=True)
            out = out + (self.atom_weights[sel][:, None] * vals).sum(axis=0)
        if self.density_grid is not None and b > a:
            breaks = x.breakpoints[(x.breakpoints > a) & (x.breakpoints < b)]
            pts = np.unique(np.concatenate([[a, b], breaks]))
            for k in range(x.dim if not absolute else 1):
                def fn(s, at_right_end, k=k):
                    v = x.left_limit(s) if at_right_end else x(s)
                    return np.linalg.norm(v, axis=1) if absolute else v[:, k]
                tot = 0.0
                for lo, hi in zip(pts[:-1], pts[1:]):
                    tot += self._density_integral(lo, hi, fn)
                out[k] += tot
        return out[:1] if absolute else out

    def node_weights(self, grid: TimeGrid, mode: str = PC) -> np.ndarray:
        """Weights ``w_j`` with ``int Pi^n[x] d lambda = sum_j w_j x_{t_j}``."""
        pts = grid.points
        w = np.zeros(pts.size)
        n = grid.n
        if mode == PC:
            for j in range(n):
                w[j] = self.mass(pts[j], pts[j + 1], True, False)
            w[n] = self.mass(pts[n], pts[n], True, True)
            return w
        for j in range(n):
            a, b = pts[j], pts[j + 1]
            h = b - a
            w[j] += self._density_integral(a, b, lambda s, _r: (b - s) / h)
            w[j + 1] += self._density_integral(a, b, lambda s, _r: (s - a) / h)
        tol = _tol(grid.horizon)
        for ta, wa in zip(self.atom_times, self.atom_weights):
            k = int(np.searchsorted(pts, ta + tol, side="right")) - 1
            k = min(max(k, 0), n)
            if abs(pts[k] - ta) <= tol or k == n:
                w[k] += wa
            else:
                h = pts[k + 1] - pts[k]
                w[k] += wa * (pts[k + 1] - ta) / h
                w[k + 1] += wa * (ta - pts[k]) / h
        return w

    def atoms_on(self, grids: GridSequence, max_level: int = 12) -> bool:
        """True when every atom lies in some level of ``grids``."""
        for ta, wa in zip(self.atom_times, self.atom_weights):
            if wa == 0:
                continue
            if not any(grids.level(n).contains(ta) for n in range(1, max_level + 1)):
                return False
        return True

    def require_atoms_on(self, grids: GridSequence, max_level: int = 12) -> "AtomicMeasure":
        if not self.atoms_on(grids, max_level):
            raise ValueError(f"measure atoms {self.atom_times} are not grid points of {grids.name!r}")
        return self


# --------------------------------------------------------------------------
# metrics


def _union_times(paths: Sequence[Path], t: float) -> np.ndarray:
    tol = _tol(paths[0].horizon)
    pts = np.concatenate([p.breakpoints for p in paths] + [[0.0, t]])
    pts = np.unique(pts[pts <= t + tol])
    return pts


def dist_uniform(x: Path, xp: Path, t: float | None = None) -> float:
    """``sup_s |x_{t^s} - x'_{t^s}|``, exact for piecewise paths."""
    if x.dim != xp.dim:
        raise ValueError("dimension mismatch")
    t = x.horizon if t is None else float(t)
    pts = _union_times([x, xp], t)
    right = np.linalg.norm(x(pts) - xp(pts), axis=1)
    left = np.linalg.norm(x.left_limit(pts) - xp.left_limit(pts), axis=1)
    return float(max(right.max(), left.max()))


def _jumps(x: Path, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Jump times in ``(0, t)`` and the value after each (index 0: initial value)."""
    tol = _tol(x.horizon)
    bp = x.breakpoints
    sel = (bp > tol) & (bp < t - tol)
    times = bp[sel]
    vals = np.vstack([x.values[:1], x.values[sel]])
    return times, vals


def skorokhod_parts(x: Path, xp: Path, t: float | None = None) -> tuple[float, float, float]:
    """Optimal ``(total, time_cost, space_cost)`` of the Skorokhod infimum on ``[0, t]``.

    Jumps of ``x'`` are placed relative to jumps of ``x`` by a monotone lattice
    path: each ``x'`` jump is either tied to an ``x`` jump or slotted between
    two consecutive ``x`` jumps. The time cost of a placement is the largest
    distance from an ``x'`` jump time to its slot (the infimum over
    reparametrizations realizing that order), the space cost is the largest
    value gap along the interleaving. The sum of the two maxima is minimized by
    sweeping the time budget over its finitely many candidate values and solving
    a bottleneck DP for each.
    """
    if x.mode != PC or xp.mode != PC:
        raise ModeError("Skorokhod distance needs piecewise-constant paths")
    if x.dim != xp.dim:
        raise ValueError("dimension mismatch")
    t = x.horizon if t is None else float(t)
    a, xv = _jumps(x, t)
    b, yv = _jumps(xp, t)
    p, q = a.size, b.size
    end_gap = float(np.linalg.norm(x.at(t) - xp.at(t)))
    gap = np.linalg.norm(xv[:, None, :] - yv[None, :, :], axis=2)  # (p+1, q+1)
    slots = np.concatenate([[0.0], a, [t]])
    # slot cost for the j-th x' jump placed after i x-jumps (strictly between)
    slot_cost = np.zeros((p + 1, q))
    for i in range(p + 1):
        lo, hi = slots[i], slots[i + 1]
        slot_cost[i] = np.maximum(0.0, np.maximum(lo - b, b - hi))
    tie_cost = np.abs(a[:, None] - b[None, :]) if p and q else np.zeros((p, q))
    cands = np.unique(np.concatenate([[0.0], slot_cost.ravel(), tie_cost.ravel()]))

    def bottleneck(c: float) -> float:
        inf = np.inf
        best = np.full((p + 1, q + 1), inf)
        best[0, 0] = gap[0, 0]
        for i in range(p + 1):
            for j in range(q + 1):
                if i == 0 and j == 0:
                    continue
                opts = []
                if i > 0:
                    opts.append(best[i - 1, j])
                if j > 0 and slot_cost[i, j - 1] <= c:
                    opts.append(best[i, j - 1])
                if i > 0 and j > 0 and tie_cost[i - 1, j - 1] <= c:
                    opts.append(best[i - 1, j - 1])
                m = min(opts) if opts else inf
                best[i, j] = max(m, gap[i, j])
        return best[p, q]

    total, tc, sc = np.inf, 0.0, 0.0
    for c in cands:
        s = max(bottleneck(c), end_gap)
        if c + s < total:
            total, tc, sc = c + s, float(c), float(s)
    return float(total), tc, sc


def dist_skorokhod(x: Path, xp: Path, t: float | None = None, mu: AtomicMeasure | None = None) -> float:
    """``rho_t`` on cadlag step paths: Skorokhod part plus ``int_0^t |x - x'| d mu``."""
    t = x.horizon if t is None else float(t)
    total, _, _ = skorokhod_parts(x, xp, t)
    if mu is not None and not mu.is_zero:
        diff = Path(
            *_diff_nodes(x, xp),
            mode=PC,
            horizon=x.horizon,
        )
        total += float(mu.integrate(diff, 0.0, t, absolute=True)[0])
    return total


def _diff_nodes(x: Path, xp: Path):
    pts = np.unique(np.concatenate([x.breakpoints, xp.breakpoints]))
    return pts, x(pts) - xp(pts)


# --------------------------------------------------------------------------
# text format


def format_path(x: Path) -> str:
    lines = [
        "# ppde path",
        f"# mode: {x.mode}",
        f"# horizon: {x.horizon!r}",
        f"# dim: {x.dim}",
    ]
    for s, v in zip(x.breakpoints, x.values):
        lines.append(" ".join([repr(float(s))] + [repr(float(c)) for c in v]))
    return "\n".join(lines) + "\n"


def parse_path(text: str) -> Path:
    header = {}
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if ":" in body:
                k, v = body.split(":", 1)
                header[k.strip().lower()] = v.strip()
            continue
        try:
            rows.append([float(tok) for tok in line.replace(",", " ").split()])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: cannot parse {raw!r}") from exc
    if not rows:
        raise ValueError("path file has no rows")
    mode = header.get("mode", PC).lower()
    mode = {"continuouspl": PL, "cadlagpc": PC}.get(mode, mode)
    horizon = float(header.get("horizon", rows[-1][0] or 1.0))
    width = {len(r) for r in rows}
    if len(width) != 1:
        raise ValueError("all rows need the same number of columns")
    arr = np.array(rows)
    if "dim" in header and int(header["dim"]) != arr.shape[1] - 1:
        raise ValueError("dim header disagrees with the column count")
    return Path(arr[:, 0], arr[:, 1:], mode, horizon)


def read_path(filename) -> Path:
    with open(filename) as fh:
        return parse_path(fh.read())


def write_path(filename, x: Path) -> None:
    with open(filename, "w") as fh:
        fh.write(format_path(x))
