"""Monte Carlo representations: frozen-coefficient Euler paths and regression BSDEs.

Coefficients at a lattice time ``u`` in slab ``[t_i, t_{i+1})`` only read the
frozen key ``(X_{t_0}, ..., X_{t_i})`` (through the summary ``s``), never the
current state, matching the slab equations solved by :mod:`ppde.slab_pde`.

Seeding: block ``b`` of the Brownian increments is drawn from
``SeedSequence(seed).spawn(blocks)[b]``; results are bit-reproducible for a
fixed ``(seed, blocks, samples)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .generators import GeneratorSpec, StructureError, TerminalSpec, prefix_weights
from .timegrid import PC, Path, TimeGrid


class RankError(np.linalg.LinAlgError):
    """The regression design matrix is rank deficient."""


class BudgetError(ValueError):
    """Exhaustive control enumeration exceeds the budget."""


@dataclass(frozen=True)
class McConfig:
    samples: int = 10_000
    substeps: int = 8
    seed: int = 0
    degree: int = 2
    antithetic: bool = True
    blocks: int = 1
    mode: str = PC
    budget: int = 256

    def __post_init__(self):
        if self.samples < 2:
            raise ValueError("need at least two samples")
        if self.degree < 1:
            raise ValueError("regression degree must be at least 1")
        if self.substeps < 1 or self.blocks < 1:
            raise ValueError("substeps and blocks must be positive")
        if self.antithetic and self.samples % (2 * self.blocks):
            raise ValueError("with antithetic variates samples must be a multiple of 2 * blocks")
        if self.samples % self.blocks:
            raise ValueError("samples must be a multiple of blocks")

    def replace(self, **kw) -> "McConfig":
        from dataclasses import replace

        return replace(self, **kw)


# --------------------------------------------------------------------------
# lattice and increments


def time_lattice(grid: TimeGrid, t: float, substeps: int) -> tuple[np.ndarray, np.ndarray]:
    """Lattice from ``t`` to ``T`` containing the grid points; also the slab index per step."""
    times = [t]
    slabs = []
    i0 = grid.slab_index(t)
    for i in range(i0, grid.n):
        a, b = max(grid[i], t), grid[i + 1]
        if b - a <= 1e-14:
            continue
        m = max(1, math.ceil(substeps * (b - a) / (grid[i + 1] - grid[i]) - 1e-9))
        pts = np.linspace(a, b, m + 1)[1:]
        times.extend(pts.tolist())
        slabs.extend([i] * m)
    return np.array(times), np.array(slabs, dtype=int)


def brownian_increments(cfg: McConfig, dts: np.ndarray) -> np.ndarray:
    """Shape ``(M, K)``; block-seeded, antithetic pairs in the two halves of each block."""
    blocks = np.random.SeedSequence(cfg.seed).spawn(cfg.blocks)
    per = cfg.samples // cfg.blocks
    out = []
    sq = np.sqrt(dts)[None, :]
    for ss in blocks:
        rng = np.random.default_rng(ss)
        if cfg.antithetic:
            z = rng.standard_normal((per // 2, dts.size))
            z = np.vstack([z, -z])
        else:
            z = rng.standard_normal((per, dts.size))
        out.append(z * sq)
    return np.vstack(out)


# --------------------------------------------------------------------------
# forward simulation


@dataclass
class FrozenState:
    """What coefficients may read at a lattice time: slab index, key and summary."""

    slab: int
    key: np.ndarray  # (M, slab+1)
    s: np.ndarray  # (M,)


@dataclass
class SamplePathBatch:
    grid: TimeGrid
    times: np.ndarray  # (K+1,)
    slabs: np.ndarray  # (K,)
    X: np.ndarray  # (M, K+1)
    dW: np.ndarray  # (M, K)
    keys: np.ndarray  # (M, n+1), grid values (NaN after T never happens)
    s: np.ndarray  # (M, K) generator summary used at each step
    key_index: np.ndarray  # lattice index of each grid point >= t (-1 before t)
    controls: tuple = ()

    @property
    def samples(self) -> int:
        return self.X.shape[0]

    @property
    def dts(self) -> np.ndarray:
        return np.diff(self.times)


def _key_lattice_index(grid: TimeGrid, times: np.ndarray, t: float) -> np.ndarray:
    idx = np.full(len(grid), -1, dtype=int)
    for j, tj in enumerate(grid.points):
        if tj >= t - 1e-12:
            k = int(np.argmin(np.abs(times - tj)))
            if abs(times[k] - tj) < 1e-12:
                idx[j] = k
    return idx


def simulate(
    grid: TimeGrid,
    start: tuple[float, Path],
    mu_fn: Callable[[float, FrozenState, int], np.ndarray],
    sigma_fn: Callable[[float, FrozenState, int], np.ndarray],
    cfg: McConfig,
    summary_weights: Callable[[int, float], np.ndarray] | None = None,
    increments: np.ndarray | None = None,
    x_shift: float = 0.0,
) -> SamplePathBatch:
    """Euler scheme with coefficients frozen on the grid key.

    ``mu_fn(u, state, step)`` and ``sigma_fn`` return arrays of shape ``(M,)``.
    ``summary_weights(i, u)`` gives the coefficients of ``s`` on the key (or
    ``None`` for ``s = 0``). ``x_shift`` adds ``delta 1_[t, T]`` to the start.
    """
    t, x = start
    t = float(t)
    times, slabs = time_lattice(grid, t, cfg.substeps)
    dts = np.diff(times)
    dW = brownian_increments(cfg, dts) if increments is None else np.asarray(increments, float)
    M, K = dW.shape
    if K != dts.size:
        raise ValueError("increments do not match the lattice")
    n = grid.n
    kidx = _key_lattice_index(grid, times, t)
    keys = np.zeros((M, n + 1))
    for j in range(n + 1):
        if kidx[j] < 0:
            keys[:, j] = float(x.at(grid[j])[0])
    X = np.empty((M, K + 1))
    X[:, 0] = float(x.at(t)[0]) + x_shift
    S = np.zeros((M, K))
    for j in np.nonzero(kidx == 0)[0]:
        keys[:, j] = X[:, 0]
    for r in range(K):
        i = int(slabs[r])
        u = times[r]
        if summary_weights is not None:
            c = summary_weights(i, u)
            S[:, r] = keys[:, : i + 1] @ c
        state = FrozenState(i, keys[:, : i + 1], S[:, r])
        drift = np.broadcast_to(mu_fn(u, state, r), (M,))
        vol = np.broadcast_to(sigma_fn(u, state, r), (M,))
        X[:, r + 1] = X[:, r] + drift * dts[r] + vol * dW[:, r]
        if not np.all(np.isfinite(X[:, r + 1])):
            raise FloatingPointError(f"Euler scheme overflowed at step {r}")
        j = np.nonzero(kidx == r + 1)[0]
        if j.size:
            keys[:, j[0]] = X[:, r + 1]
    return SamplePathBatch(grid, times, slabs, X, dW, keys, S, kidx)


def generator_weights(F: GeneratorSpec, grid: TimeGrid, mode: str = PC):
    if F.path_free:
        return None
    T = grid.horizon

    def fn(i, u):
        return prefix_weights(F.measure, grid, i, min(u, grid[i + 1] - 1e-12 * T), mode)

    return fn


def _slab_control(F: GeneratorSpec, control, i: int):
    if control is None:
        if len(F.controls) > 1:
            raise StructureError("a controlled generator needs a control assignment")
        return F.controls[0]
    return control[i]


def simulate_frozen_sde(
    F: GeneratorSpec,
    grid: TimeGrid,
    start: tuple[float, Path],
    cfg: McConfig,
    control: Sequence | None = None,
    increments: np.ndarray | None = None,
    x_shift: float = 0.0,
    drift: bool = True,
) -> SamplePathBatch:
    """Euler paths of ``dX = mu dt + sigma dW`` with coefficients of ``F`` frozen on the key.

    ``control`` is a per-slab list of controls (length ``n``) for controlled
    generators. ``drift=False`` drops ``mu`` (driver-sup form).
    """
    F.require_coefficients()
    if F.dim != 1:
        raise StructureError("Monte Carlo paths are one-dimensional here")

    def mu_fn(u, st, r):
        if not drift:
            return 0.0
        return F.drift(u, st.s, _slab_control(F, control, st.slab))

    def sigma_fn(u, st, r):
        return F.sig(u, st.s, _slab_control(F, control, st.slab))

    batch = simulate(grid, start, mu_fn, sigma_fn, cfg, generator_weights(F, grid, cfg.mode), increments, x_shift)
    batch.controls = tuple(control) if control is not None else ()
    return batch


# --------------------------------------------------------------------------
# regression


def lift_feature(batch: SamplePathBatch, weights: np.ndarray | None) -> np.ndarray:
    """Running weighted key sum ``sum_{t_j <= u} w_j X_{t_j}`` at each lattice time ``(M, K+1)``."""
    M, K1 = batch.X.shape
    if weights is None or not np.any(weights):
        return np.zeros((M, K1))
    out = np.zeros((M, K1))
    grid = batch.grid
    for k, u in enumerate(batch.times):
        i = grid.slab_index(u)
        out[:, k] = batch.keys[:, : i + 1] @ weights[: i + 1]
    return out


def design(x: np.ndarray, s: np.ndarray, degree: int) -> np.ndarray:
    """Total-degree polynomial basis in standardized ``(x, s)``; constant features dropped."""
    feats = []
    for v in (x, s):
        sd = float(np.std(v))
        if sd > 1e-12 * (1 + abs(float(np.mean(v)))):
            feats.append((v - np.mean(v)) / sd)
    cols = [np.ones_like(x)]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(len(feats)), deg):
            c = np.ones_like(x)
            for q in combo:
                c = c * feats[q]
            cols.append(c)
    return np.column_stack(cols)


class Projector:
    """Least-squares projection onto the span of a design matrix.

    Uses a column-pivoted QR and keeps the numerically independent columns
    (features can coincide, e.g. the lift summary right at a grid time).
    """

    def __init__(self, A: np.ndarray, rtol: float = 1e-9):
        M, p = A.shape
        if M <= p:
            raise RankError(f"{M} samples cannot fit {p} basis functions")
        q, r, _ = scipy.linalg.qr(A, mode="economic", pivoting=True)
        d = np.abs(np.diag(r))
        rank = int(np.sum(d > rtol * d[0]))
        self.q = q[:, :rank]
        self.rank = rank

    def __call__(self, y: np.ndarray) -> np.ndarray:
        return self.q @ (self.q.T @ y)


@dataclass
class BsdeResult:
    y0: float
    se: float
    Y: np.ndarray  # (M, K+1) regressed values (column 0 constant)
    Z: np.ndarray  # (M, K)
    terminal: np.ndarray
    features: Callable[[int], np.ndarray] | None = None


def _se_pairs(v: np.ndarray, antithetic: bool, blocks: int) -> float:
    if antithetic:
        per = v.size // blocks
        h = per // 2
        v = np.concatenate([0.5 * (b[:h] + b[h:]) for b in np.split(v, blocks)])
    return float(np.std(v, ddof=1) / math.sqrt(v.size))


def feature_maker(batch: SamplePathBatch, weights: np.ndarray | None, degree: int):
    S = lift_feature(batch, weights)

    def make(k):
        return design(batch.X[:, k], S[:, k], degree)

    return make


def solve_bsde_regression(
    driver: Callable[[float, np.ndarray, np.ndarray, np.ndarray, int], np.ndarray],
    terminal: np.ndarray,
    batch: SamplePathBatch,
    cfg: McConfig,
    features: Callable[[int], np.ndarray] | None = None,
    lift_weights: np.ndarray | None = None,
) -> BsdeResult:
    """Backward regression for ``Y_k = E_k[Y_{k+1} + f(u_k, s_k, Y_{k+1}, Z_k) dt]``.

    ``Z_k = E_k[Y_{k+1} dW_k] / dt``. ``driver(u, s, y, z, step)`` is
    vectorized over samples. Conditional expectations use the polynomial
    basis in ``(X_k, lift summary)``; at the start time all samples coincide
    and the expectation is the sample mean.
    """
    M, K = batch.dW.shape
    feats = features or feature_maker(batch, lift_weights, cfg.degree)
    dts = batch.dts
    Y = np.empty((M, K + 1))
    Z = np.zeros((M, K))
    y = np.asarray(terminal, float).copy()
    Y[:, K] = y
    target0 = None
    for k in range(K - 1, -1, -1):
        A = feats(k)
        proj = Projector(A) if A.shape[1] > 1 else None
        cond = proj if proj is not None else (lambda v: np.full_like(v, v.mean()))
        z = cond(y * batch.dW[:, k]) / dts[k]
        target = y + driver(batch.times[k], batch.s[:, k], y, z, k) * dts[k]
        Z[:, k] = z
        y = cond(target)
        Y[:, k] = y
        if k == 0:
            target0 = target
    se = _se_pairs(target0, cfg.antithetic, cfg.blocks)
    return BsdeResult(float(Y[0, 0]), se, Y, Z, np.asarray(terminal, float), feats)


def terminal_values(g: TerminalSpec, batch: SamplePathBatch, mode: str = PC) -> np.ndarray:
    keys = batch.keys.copy()
    keys[:, -1] = batch.X[:, -1]
    return g.on_keys(batch.grid, keys, mode)


def _generator_driver(F: GeneratorSpec, batch: SamplePathBatch, control):
    def drv(u, s, y, z, k):
        a = _slab_control(F, control, int(batch.slabs[k]))
        return F.f(u, s, y, z, a)

    return drv


def _lift_weights_for(F: GeneratorSpec, g: TerminalSpec, grid: TimeGrid, mode: str):
    if g.measure is not None and not g.measure.is_zero:
        return g.measure.node_weights(grid, mode)
    if not F.path_free:
        return F.measure.node_weights(grid, mode)
    return None


def bsde_value(
    F: GeneratorSpec,
    g: TerminalSpec,
    grid: TimeGrid,
    start: tuple[float, Path],
    cfg: McConfig,
    control: Sequence | None = None,
) -> BsdeResult:
    """``Y_t`` for one control assignment (or an uncontrolled generator)."""
    batch = simulate_frozen_sde(F, grid, start, cfg, control)
    w = _lift_weights_for(F, g, grid, cfg.mode)
    return solve_bsde_regression(_generator_driver(F, batch, control), terminal_values(g, batch, cfg.mode), batch, cfg, lift_weights=w)


@dataclass
class HjbResult:
    value: float
    se: float
    method: str
    control: tuple | None = None
    values: dict = field(default_factory=dict)


def _sigma_control_free(F: GeneratorSpec, grid: TimeGrid) -> bool:
    s = np.linspace(-3, 3, 7)
    ref = F.sig(0.0, s, F.controls[0])
    for a in F.controls[1:]:
        for t in (0.0, grid.horizon):
            if not np.allclose(F.sig(t, s, a), ref):
                return False
    return True


def hjb_value_mc(
    F: GeneratorSpec,
    g: TerminalSpec,
    grid: TimeGrid,
    query: tuple[float, Path],
    cfg: McConfig,
    method: str = "auto",
) -> HjbResult:
    """``sup_a Y^a_t`` over slab-constant controls, or the driver-sup BSDE.

    ``method='exhaustive'`` enumerates ``|A|^(remaining slabs)`` assignments on
    common random numbers; ``'driver_sup'`` (valid when controls do not touch
    the diffusion) solves one BSDE with driver ``max_a [f_a + mu_a z / sigma]``.
    """
    F.require_coefficients()
    t = float(query[0])
    i0 = grid.slab_index(t)
    remaining = grid.n - i0
    if len(F.controls) == 1:
        res = bsde_value(F, g, grid, query, cfg)
        return HjbResult(res.y0, res.se, "single")
    count = len(F.controls) ** remaining
    sigma_free = _sigma_control_free(F, grid)
    if method == "auto":
        method = "exhaustive" if count <= cfg.budget else "driver_sup"
    if method == "exhaustive":
        if count > cfg.budget:
            raise BudgetError(f"{count} control assignments exceed the budget {cfg.budget}")
        best = None
        values = {}
        for combo in itertools.product(F.controls, repeat=remaining):
            ctrl = (F.controls[0],) * i0 + tuple(combo)
            res = bsde_value(F, g, grid, query, cfg, ctrl)
            values[tuple(combo)] = (res.y0, res.se)
            if best is None or res.y0 > best[0]:
                best = (res.y0, res.se, tuple(combo))
        return HjbResult(best[0], best[1], "exhaustive", best[2], values)
    if method != "driver_sup":
        raise ValueError(f"unknown method {method!r}")
    if not sigma_free:
        raise BudgetError(
            f"{count} assignments exceed the budget and the diffusion depends on the control; use the slab PDE solver"
        )
    a0 = F.controls[0]
    batch = simulate_frozen_sde(F, grid, query, cfg, control=(a0,) * grid.n, drift=False)

    def drv(u, s, y, z, k):
        sg = F.sig(u, s, a0)
        safe = np.where(np.abs(sg) > 0, sg, 1.0)
        return np.max(np.stack([F.f(u, s, y, z, a) + F.drift(u, s, a) * z / safe for a in F.controls]), axis=0)

    w = _lift_weights_for(F, g, grid, cfg.mode)
    res = solve_bsde_regression(drv, terminal_values(g, batch, cfg.mode), batch, cfg, lift_weights=w)
    return HjbResult(res.y0, res.se, "driver_sup")


# --------------------------------------------------------------------------
# tangent process


@dataclass
class TangentResult:
    grad: float
    se: float
    y0: float
    batch: SamplePathBatch
    base: BsdeResult
    dX: np.ndarray  # (M, K+1)
    dY: np.ndarray  # (M, K+1)


def _tangent_forward(F: GeneratorSpec, batch: SamplePathBatch, weights_fn, control) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(dX, dkeys, ds)`` for the direction ``1_[t, T]``."""
    M, K = batch.dW.shape
    dts = batch.dts
    dX = np.empty((M, K + 1))
    dX[:, 0] = 1.0
    dkeys = np.zeros_like(batch.keys)
    kidx = batch.key_index
    j0 = np.nonzero(kidx == 0)[0]
    if j0.size:
        dkeys[:, j0[0]] = 1.0
    ds = np.zeros((M, K))
    for r in range(K):
        i = int(batch.slabs[r])
        u = batch.times[r]
        a = _slab_control(F, control, i)
        if weights_fn is not None:
            c = weights_fn(i, u)
            ds[:, r] = dkeys[:, : i + 1] @ c
            s = batch.s[:, r]
            dX[:, r + 1] = dX[:, r] + F.partial("mu_s", u, s, a) * ds[:, r] * dts[r] + F.partial("sigma_s", u, s, a) * ds[:, r] * batch.dW[:, r]
        else:
            dX[:, r + 1] = dX[:, r]
        j = np.nonzero(kidx == r + 1)[0]
        if j.size:
            dkeys[:, j[0]] = dX[:, r + 1]
    return dX, dkeys, ds


def _terminal_tangent(g: TerminalSpec, batch: SamplePathBatch, dX, dkeys, mode) -> np.ndarray:
    if g.summary is None:
        raise StructureError("tangent needs a terminal in summary form (its derivative measure)")
    grid = batch.grid
    keys = batch.keys.copy()
    keys[:, -1] = batch.X[:, -1]
    dk = dkeys.copy()
    dk[:, -1] = dX[:, -1]
    w = g.node_weights(grid, mode)
    S = keys @ w
    gS, gx = g.summary.gradient(S, keys[:, -1])
    return gS * (dk @ w) + gx * dk[:, -1]


def tangent_fbsde(
    F: GeneratorSpec,
    g: TerminalSpec,
    grid: TimeGrid,
    start: tuple[float, Path],
    cfg: McConfig,
    control: Sequence | None = None,
) -> TangentResult:
    """Vertical derivative ``grad Y_t`` along ``1_[t, T]`` from the tangent FBSDE.

    The tangent pair is the exact derivative of the Euler and regression
    recursion: it uses the same conditional-expectation projections as the
    base solve, so a bump of the start on common random numbers and the same
    regression features converges to it at rate ``delta``.
    """
    F.require_coefficients()
    if g.summary is None:
        raise StructureError("tangent needs the terminal's derivative measure (summary form)")
    batch = simulate_frozen_sde(F, grid, start, cfg, control)
    w = _lift_weights_for(F, g, grid, cfg.mode)
    feats = feature_maker(batch, w, cfg.degree)
    term = terminal_values(g, batch, cfg.mode)
    drv = _generator_driver(F, batch, control)
    base = solve_bsde_regression(drv, term, batch, cfg, features=feats)
    wfn = generator_weights(F, grid, cfg.mode)
    dX, dkeys, ds = _tangent_forward(F, batch, wfn, control)
    dy = _terminal_tangent(g, batch, dX, dkeys, cfg.mode)
    M, K = batch.dW.shape
    dts = batch.dts
    dY = np.empty((M, K + 1))
    dY[:, K] = dy
    target0 = None
    for k in range(K - 1, -1, -1):
        A = feats(k)
        cond = Projector(A) if A.shape[1] > 1 else (lambda v: np.full_like(v, v.mean()))
        y_next = base.Y[:, k + 1]
        z = base.Z[:, k]
        a = _slab_control(F, control, int(batch.slabs[k]))
        u = batch.times[k]
        s = batch.s[:, k]
        dz = cond(dy * batch.dW[:, k]) / dts[k]
        fy = F.partial("f_y", u, s, y_next, z, a)
        fw = F.partial("f_w", u, s, y_next, z, a)
        fs = F.partial("f_s", u, s, y_next, z, a) if wfn is not None else 0.0
        target = dy + (fy * dy + fw * dz + fs * ds[:, k]) * dts[k]
        dy = cond(target)
        dY[:, k] = dy
        if k == 0:
            target0 = target
    return TangentResult(float(dY[0, 0]), _se_pairs(target0, cfg.antithetic, cfg.blocks), base.y0, batch, base, dX, dY)


def bump_derivative(
    F: GeneratorSpec,
    g: TerminalSpec,
    grid: TimeGrid,
    start: tuple[float, Path],
    cfg: McConfig,
    delta: float,
    base: TangentResult | None = None,
    control: Sequence | None = None,
) -> float:
    """``(Y^{x + delta 1_[t,T]} - Y^x) / delta`` on common random numbers and base features."""
    base = base or tangent_fbsde(F, g, grid, start, cfg, control)
    b0 = base.batch
    bumped = simulate_frozen_sde(F, grid, start, cfg, control, increments=b0.dW, x_shift=delta)
    w = _lift_weights_for(F, g, grid, cfg.mode)
    feats = feature_maker(b0, w, cfg.degree)
    res = solve_bsde_regression(_generator_driver(F, bumped, control), terminal_values(g, bumped, cfg.mode), bumped, cfg, features=feats)
    return (res.y0 - base.y0) / delta


def moment_estimates(result: TangentResult) -> dict:
    """Sampled ``E sup |X|^2`` and ``E sup |grad X|^2``."""
    return {
        "X2": float(np.mean(np.max(result.batch.X**2, axis=1))),
        "dX2": float(np.mean(np.max(result.dX**2, axis=1))),
    }


# --------------------------------------------------------------------------
# martingale residual


@dataclass
class ResidualReport:
    """Terminal residual ``R_T`` of the semimartingale identity along simulated paths.

    ``covariation`` is the sample mean of ``[R, W]_T`` and ``scale`` the mean of
    ``int |grad v sigma| du``, the covariation the stochastic integral removes.
    """

    mean: float
    se: float
    covariation: float
    scale: float
    samples: int

    @property
    def mean_ok(self) -> bool:
        return abs(self.mean) <= 3 * self.se

    @property
    def covariation_ratio(self) -> float:
        return abs(self.covariation) / self.scale if self.scale > 0 else math.inf

    def ok(self, tol: float = 5e-2) -> bool:
        return self.mean_ok and self.covariation_ratio <= tol


def martingale_residual(
    F: GeneratorSpec,
    g: TerminalSpec,
    grid: TimeGrid,
    start: tuple[float, Path],
    cfg: McConfig,
    value: Callable[[float, np.ndarray, np.ndarray], np.ndarray],
    gradient: Callable[[float, np.ndarray, np.ndarray], np.ndarray],
) -> ResidualReport:
    """``v(T, X) - v(t, X) - int grad v sigma dW + int f du`` on Euler paths.

    ``value(u, s, x)`` and ``gradient(u, s, x)`` give the candidate solution
    and its vertical derivative in lift coordinates at every lattice time of
    ``time_lattice(grid, t, cfg.substeps)`` before ``T``; the terminal value
    is ``g`` itself. Uncontrolled generators only.
    """
    F.require_coefficients()
    if len(F.controls) != 1:
        raise StructureError("the residual identity is for uncontrolled generators")
    batch = simulate_frozen_sde(F, grid, start, cfg)
    S = lift_feature(batch, _lift_weights_for(F, g, grid, cfg.mode))
    a = F.controls[0]
    M, K = batch.dW.shape
    times = batch.times
    R = np.zeros(M)
    qc = np.zeros(M)
    scale = np.zeros(M)
    v = value(times[0], S[:, 0], batch.X[:, 0])
    for k in range(K):
        u, dt = times[k], times[k + 1] - times[k]
        s = batch.s[:, k]
        w = gradient(u, S[:, k], batch.X[:, k]) * F.sig(u, s, a)
        v_next = value(times[k + 1], S[:, k + 1], batch.X[:, k + 1]) if k + 1 < K else terminal_values(g, batch, cfg.mode)
        dR = v_next - v - w * batch.dW[:, k] + F.f(u, s, v, w, a) * dt
        R += dR
        qc += dR * batch.dW[:, k]
        scale += np.abs(w) * dt
        v = v_next
    se = _se_pairs(R, cfg.antithetic, cfg.blocks)
    return ResidualReport(float(R.mean()), se, float(qc.mean()), float(scale.mean()), M)
