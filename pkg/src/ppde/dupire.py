"""Vertical derivatives, terminal smoothing and derivative-regularity certificates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .generators import Summary, TerminalSpec
from .timegrid import PC, AtomicMeasure, Path, TimeGrid, concat

DELTA_LADDER = (1e-2, 5e-3, 2.5e-3)

Evaluator = Callable[[float, Path], float]


@dataclass
class DerivativeEstimate:
    """Central-bump (or tangent) estimate of the vertical derivative at ``(t, x)``."""

    value: float
    delta: float
    method: str = "central_bump"
    proxy: float = 0.0
    one_sided: float = float("nan")
    variant: str = "interval"

    def __post_init__(self):
        if self.proxy < 0:
            raise ValueError("error proxy must be nonnegative")

    @property
    def accepted(self) -> bool:
        return abs(self.value) < 1e-8 or self.proxy < 0.1 * abs(self.value)


def bump(x: Path, t: float, delta: float, variant: str = "interval") -> Path:
    """``x`` moved by ``delta`` from time ``t`` on.

    ``interval`` replaces the future by the constant ``x_t + delta``;
    ``shift`` keeps the future shape and adds ``delta`` on ``[t, T]``.
    Both agree for non-anticipative functionals evaluated at ``t``.
    """
    xt = x.at(t)
    if variant == "interval":
        return concat(x, t, xt + delta)
    if variant == "shift":
        return concat(x, t, x.shifted(delta))
    raise ValueError(f"unknown bump variant {variant!r}")


def vertical_derivative(
    evaluator: Evaluator,
    t: float,
    x: Path,
    delta: float = DELTA_LADDER[0],
    variant: str = "interval",
) -> DerivativeEstimate:
    """Central difference in the bump size, with a Richardson proxy from ``delta / 2``."""
    if not delta > 0:
        raise ValueError("bump size must be positive")
    if x.dim != 1:
        raise ValueError("vertical_derivative handles d = 1; bump coordinates separately")

    def u(d):
        try:
            return float(evaluator(t, bump(x, t, d, variant)))
        except Exception as exc:  # surface with context
            raise RuntimeError(f"evaluator failed on bumped path (delta={d:g}): {exc}") from exc

    up, dn = u(delta), u(-delta)
    up2, dn2 = u(delta / 2), u(-delta / 2)
    base = u(0.0)
    d1 = (up - dn) / (2 * delta)
    d2 = (up2 - dn2) / delta
    return DerivativeEstimate(d2, delta, "central_bump", abs(d2 - d1), (up2 - base) / (delta / 2), variant)


# --------------------------------------------------------------------------
# smoothing


@lru_cache(maxsize=8)
def _bump_rule(nodes: int = 48) -> tuple[np.ndarray, np.ndarray]:
    u, w = np.polynomial.legendre.leggauss(nodes)
    rho = np.exp(-1.0 / (1.0 - u**2))
    w = w * rho
    return u, w / w.sum()


def _mollify(fn: Callable, h: float, nodes: int, both: bool) -> Callable:
    u, w = _bump_rule(nodes)

    def out(S, x):
        S, x = np.asarray(S, float), np.asarray(x, float)
        S, x = np.broadcast_arrays(S, x)
        acc = np.zeros(S.shape)
        for uq, wq in zip(u, w):
            if both:
                for ur, wr in zip(u, w):
                    acc += wq * wr * fn(S - h * uq, x - h * ur)
            else:
                acc += wq * np.asarray(fn(S - h * uq, x), float)
        return acc

    return out


def _depends_on_x(g0: Callable, seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    S, x = rng.normal(size=16), rng.normal(size=16)
    return bool(np.max(np.abs(np.asarray(g0(S, x + 0.7), float) - np.asarray(g0(S, x), float))) > 1e-12)


def smooth_terminal(g: TerminalSpec, bandwidth: float = 1e-3, nodes: int = 48) -> TerminalSpec:
    """Mollify the summary function of ``g`` with a compact bump kernel.

    Only the summary form is smoothed, so the result keeps the summary form
    and every slot derivative factors through the measure weights.
    """
    if g.summary is None or g.measure is None:
        raise ValueError("smoothing needs a summary-form terminal with its measure")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    g0 = g.summary.g0
    both = _depends_on_x(g0)
    g0n = _mollify(g0, bandwidth, nodes, both)
    grad = None
    if g.summary.grad is not None:
        gs = _mollify(lambda S, x: g.summary.grad(S, x)[0] * np.ones_like(S), bandwidth, nodes, both)
        gx = _mollify(lambda S, x: g.summary.grad(S, x)[1] * np.ones_like(S), bandwidth, nodes, both)
        grad = lambda S, x: (gs(S, x), gx(S, x))  # noqa: E731
    summ = Summary(g0n, g.measure, grad, g.summary.lipschitz_S)
    params = dict(g.params, bandwidth=bandwidth)
    return TerminalSpec(f"{g.name}~{bandwidth:g}", None, g.growth, summ, g.alpha, None, params)


@dataclass
class Certificate:
    check_id: str
    ladder_step: float
    ratio: float
    bound: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.ratio) and self.ratio <= self.bound)

    def row(self) -> dict:
        return {"check_id": self.check_id, "ladder_step": self.ladder_step, "ratio": self.ratio,
                "bound": self.bound, "pass": int(self.passed)}


@dataclass
class CertificateReport:
    rows: list = field(default_factory=list)
    labels: dict = field(default_factory=dict)

    def add(self, check_id, step, ratio, bound):
        self.rows.append(Certificate(check_id, float(step), float(ratio), float(bound)))

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.rows)

    def failures(self) -> list:
        return [c for c in self.rows if not c.passed]

    def csv_rows(self) -> list[dict]:
        return [c.row() for c in self.rows]


def _slot_gradients(g: TerminalSpec, grid: TimeGrid, keys: np.ndarray, mode: str, h: float) -> np.ndarray:
    n1 = keys.shape[1]
    out = np.empty_like(keys)
    for i in range(n1):
        e = np.zeros(n1)
        e[i] = h
        out[:, i] = (g.on_keys(grid, keys + e, mode) - g.on_keys(grid, keys - e, mode)) / (2 * h)
    return out


def derivative_certificates(
    gn: TerminalSpec,
    grid: TimeGrid,
    samples: int = 64,
    seed: int = 0,
    mode: str = PC,
    lipschitz: float = 1.0,
    curvature: float | None = None,
    scale: float = 1.0,
) -> CertificateReport:
    """Sampled slot-derivative bounds for a smoothed summary terminal.

    ``|d g / d x_i| <= L w_i`` with ``w`` the node weights of the measure.
    With ``curvature`` set, ``|d2 g / dx_i dx_j| <= curvature w_i w_j`` as well.
    Ratios are reported normalized, so every bound is 1.
    """
    rng = np.random.default_rng(seed)
    w = gn.node_weights(grid, mode)
    keys = scale * rng.normal(size=(samples, len(grid)))
    h = 1e-5
    grads = _slot_gradients(gn, grid, keys, mode, h)
    rep = CertificateReport(labels={"lipschitz": lipschitz})
    tiny = 1e-9
    for i in range(len(grid)):
        bound = lipschitz * w[i]
        worst = np.max(np.abs(grads[:, i]))
        ratio = worst / bound if bound > 0 else (0.0 if worst < tiny else math.inf)
        rep.add(f"d1_slot{i}", grid[i], ratio, 1.0 + 1e-6)
    if curvature is not None:
        h2 = 1e-3
        n1 = len(grid)
        for i in range(n1):
            for j in range(i, n1):
                ei = np.zeros(n1)
                ej = np.zeros(n1)
                ei[i] = h2
                ej[j] = h2
                d2 = (gn.on_keys(grid, keys + ei + ej, mode) - gn.on_keys(grid, keys + ei - ej, mode)
                      - gn.on_keys(grid, keys - ei + ej, mode) + gn.on_keys(grid, keys - ei - ej, mode)) / (4 * h2 * h2)
                bound = curvature * w[i] * w[j]
                worst = np.max(np.abs(d2))
                ratio = worst / bound if bound > 0 else (0.0 if worst < 1e-6 else math.inf)
                rep.add(f"d2_slot{i}_{j}", grid[j], ratio, 1.0 + 1e-3)
    return rep


# --------------------------------------------------------------------------
# structure condition


@dataclass
class StructureProbe:
    """Per-pair transfer coefficients ``p[i, j]`` with identity residuals."""

    pairs: dict
    residuals: dict
    status: str  # ok | degenerate | fails
    witness: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _structure_residual(g, grid, keys, deltas, i, j, p, mode):
    # bump slot i by delta, versus bump of every slot from j on by p * delta
    n1 = len(grid)
    ei = np.zeros(n1)
    ei[i] = 1.0
    tail = np.zeros(n1)
    tail[j:] = 1.0
    lhs = g.on_keys(grid, keys + deltas[:, None] * ei, mode)
    rhs = g.on_keys(grid, keys + p * deltas[:, None] * tail, mode)
    return lhs - rhs, lhs


def structure_condition_probe(
    g: TerminalSpec,
    grid: TimeGrid,
    samples: int = 32,
    seed: int = 0,
    mode: str = PC,
    tol: float = 1e-8,
) -> StructureProbe:
    """Transfer coefficients between an early slot bump and a later tail bump.

    For each ``1 <= i < j < n`` look for ``p`` with
    ``g(key + delta e_i) = g(key + p delta (e_j + ... + e_n))`` on sampled
    keys and bump sizes. Summary terminals get the closed-form coefficient
    ``w_i / (w_j + ... + w_n)``; others get a scalar least-squares fit.
    """
    rng = np.random.default_rng(seed)
    n = grid.n
    keys = rng.normal(size=(samples, n + 1))
    deltas = rng.uniform(-1.0, 1.0, size=samples)
    pairs, resid, witness = {}, {}, {}
    degenerate = False
    w = g.node_weights(grid, mode) if g.summary is not None and g.measure is not None else None
    analytic = w is not None and not _depends_on_x(g.summary.g0)
    for i in range(1, n):
        for j in range(i + 1, n):
            if analytic:
                tail = w[j:].sum()
                p = w[i] / tail if tail > 0 else 0.0
            else:
                _, lhs = _structure_residual(g, grid, keys, deltas, i, j, 0.0, mode)
                if np.max(np.abs(lhs - g.on_keys(grid, keys, mode))) <= tol:
                    p = 0.0
                else:
                    obj = lambda q: float(np.sum(_structure_residual(g, grid, keys, deltas, i, j, q, mode)[0] ** 2))  # noqa: E731
                    p = float(minimize_scalar(obj, bounds=(-20.0, 20.0), method="bounded",
                                              options={"xatol": 1e-12}).x)
            r, _ = _structure_residual(g, grid, keys, deltas, i, j, p, mode)
            pairs[(i, j)] = p
            resid[(i, j)] = float(np.max(np.abs(r)))
            if abs(p) <= tol:
                degenerate = True
            if resid[(i, j)] > tol:
                k = int(np.argmax(np.abs(r)))
                witness[(i, j)] = (keys[k].copy(), float(deltas[k]))
    if not pairs:
        return StructureProbe({}, {}, "degenerate")
    if any(v > tol for v in resid.values()):
        status = "fails"
    elif degenerate:
        status = "degenerate"
    else:
        status = "ok"
    return StructureProbe(pairs, resid, status, witness)


BEYOND = "beyond-hypothesis"


def generator_form(F, alpha: float = 1.0, horizon: float = 1.0, samples: int = 16, seed: int = 0,
                   tol: float = 1e-8) -> str:
    """Classify ``F`` against the two generator forms the certificates assume.

    ``"linear"``: ``F = F1(t) y + F2(t) z + F3(t, gamma)``.
    ``"z_linear"`` (only when ``alpha == 1``): ``F = F1(t, y, gamma) + F2(t) z``.
    Anything else, including any dependence on the path, is labelled
    ``"beyond-hypothesis"``. All checks are sampled identities.
    """
    rng = np.random.default_rng(seed)
    d = F.dim

    def vec():
        return float(rng.normal()) if d == 1 else rng.normal(size=d)

    def mat():
        if d == 1:
            return float(rng.normal())
        a = rng.normal(size=(d, d))
        return 0.5 * (a + a.T)

    def ev(t, x, y, z, gam):
        return F.evaluate(t, x, y, z, gam)

    linear = True
    zero = 0.0 if d == 1 else np.zeros(d)
    for _ in range(samples):
        t = float(rng.uniform(0.0, horizon))
        x1 = Path.from_function(lambda s: float(rng.normal()) * s, [0.0, t / 2, t, horizon], PC)
        x0 = Path.constant(0.0)
        y1, y2, z1, z2, g1, g2 = float(rng.normal()), float(rng.normal()), vec(), vec(), mat(), mat()
        if abs(ev(t, x1, y1, z1, g1) - ev(t, x0, y1, z1, g1)) > tol:
            return BEYOND
        base = ev(t, x0, 0.0, zero, g1)
        # z part: F(y, z, g) - F(y, 0, g) linear in z and free of (y, g)
        dz = ev(t, x0, y1, z1, g1) - ev(t, x0, y1, zero, g1)
        dz2 = ev(t, x0, y2, z1, g2) - ev(t, x0, y2, zero, g2)
        dzz = ev(t, x0, y1, z1 + z2, g1) - ev(t, x0, y1, zero, g1)
        dz_only = ev(t, x0, y1, z2, g1) - ev(t, x0, y1, zero, g1)
        if abs(dz - dz2) > tol or abs(dzz - dz - dz_only) > tol:
            return BEYOND
        # y part for the fully linear form: F(y, 0, g) - F(0, 0, g) linear in y and free of g
        dy = ev(t, x0, y1, zero, g1) - base
        dy2 = ev(t, x0, y1, zero, g2) - ev(t, x0, 0.0, zero, g2)
        dyy = ev(t, x0, y1 + y2, zero, g1) - base
        dy_only = ev(t, x0, y2, zero, g1) - base
        if abs(dy - dy2) > tol or abs(dyy - dy - dy_only) > tol:
            linear = False
    if linear:
        return "linear"
    return "z_linear" if alpha == 1 else BEYOND


# --------------------------------------------------------------------------
# regularity certificates


def _lambda_distance(measure: AtomicMeasure, x: Path, xp: Path, t: float) -> float:
    """``int_0^t |x - x'| d lambda``."""
    pts = np.union1d(x.breakpoints, xp.breakpoints)
    if x.mode == "pl" or xp.mode == "pl":
        xx, yy = x.with_mode("pl"), xp.with_mode("pl")
        pts = np.union1d(xx.breakpoints, yy.breakpoints)
        diff = Path(pts, xx(pts) - yy(pts), "pl", x.horizon)
    else:
        diff = Path(pts, x(pts) - xp(pts), "pc", x.horizon)
    return float(measure.integrate(diff, 0.0, t, absolute=True)[0])


@dataclass
class Ladder:
    """Normalized differences along a shrinking perturbation ladder."""

    steps: list
    ratios: list

    @property
    def bound(self) -> float:
        r = [v for v in self.ratios if np.isfinite(v)]
        return max(r) if r else 0.0

    def variation(self, floor: float = 1e-8) -> float:
        """Spread ``max / min`` of the fitted constants (1 when at most one is nonzero)."""
        if not all(np.isfinite(v) for v in self.ratios):
            return math.inf
        big = [v for v in self.ratios if v > floor]
        if len(big) < 2:
            return 1.0
        return max(big) / min(big)

    def constant(self, steps: Sequence[float]) -> float:
        """Largest ratio over the ladder points in ``steps``."""
        sel = [r for s, r in zip(self.steps, self.ratios) if any(abs(s - q) <= 1e-12 for q in steps)]
        return max(sel) if sel else 0.0

    def stable(self, factor: float = 2.0) -> bool:
        """Fitted constants agree within ``factor`` across the ladder."""
        return self.variation() <= factor


def regularity_certificates(
    gradient: Callable[[float, Path], float],
    measure: AtomicMeasure,
    fixtures: Sequence[Path],
    t: float,
    alpha: float = 1.0,
    direction: Path | None = None,
    space_steps: Sequence[float] = (0.4, 0.2, 0.1, 0.05),
    time_steps: Sequence[float] = (0.2, 0.1, 0.05, 0.025),
    uniform_bound: float | None = None,
    constant_bound: float = math.inf,
    max_growth: float = 2.0,
    floor: float = 1e-8,
) -> tuple[CertificateReport, dict]:
    """Space and time Hoelder ratios of the vertical derivative ``gradient``.

    Each ladder is also run at half its steps. The fitted constant of a
    ladder is its largest ratio; the ``refinement`` row reports
    ``C(steps / 2) / C(steps)``, which must stay below ``max_growth``
    (constants below ``floor`` count as zero). Per-step ratios are checked
    against ``constant_bound``. Returns the report and the raw ladders keyed
    by ``space/<k>`` and ``time/<k>``.
    """
    rep = CertificateReport(labels={"alpha": alpha})
    ladders, values = {}, []
    space_all = sorted(set(space_steps) | {e / 2 for e in space_steps}, reverse=True)
    time_all = sorted(set(time_steps) | {h / 2 for h in time_steps}, reverse=True)
    for k, x in enumerate(fixtures):
        base = gradient(t, x)
        values.append(abs(base))
        y = direction or Path.constant(1.0, x.horizon, x.mode)
        sp = Ladder([], [])
        for eps in space_all:
            xp = _perturb(x, y, eps)
            den = _lambda_distance(measure, x, xp, t) ** alpha + float(abs(xp.at(t)[0] - x.at(t)[0])) ** alpha
            if den <= 0:
                continue
            sp.steps.append(eps)
            sp.ratios.append(abs(gradient(t, xp) - base) / den)
        ladders[f"space/{k}"] = (sp, list(space_steps))
        tm = Ladder([], [])
        stopped = x.stopped(t)
        for h in time_all:
            tp = t + h
            if tp > x.horizon + 1e-12:
                continue
            den = h ** (alpha / (2 + 2 * alpha)) + measure.mass(t, tp, closed_left=True, closed_right=False)
            tm.steps.append(h)
            tm.ratios.append(abs(gradient(tp, stopped) - base) / den)
        ladders[f"time/{k}"] = (tm, list(time_steps))
    if uniform_bound is not None:
        rep.add("uniform", 0.0, max(values + [0.0]), uniform_bound)
    for key, (lad, steps) in ladders.items():
        full = lad.constant(steps)
        half = lad.constant([s_ / 2 for s_ in steps])
        for s_, r in zip(lad.steps, lad.ratios):
            rep.add(f"{key}/ratio", s_, r, constant_bound)
        growth = 1.0 if max(full, half) <= floor else (half / full if full > floor else math.inf)
        rep.add(f"{key}/refinement", min(lad.steps, default=0.0), growth, max_growth)
    return rep, {k: v[0] for k, v in ladders.items()}


def _perturb(x: Path, y: Path, eps: float) -> Path:
    if x.mode == "pl" or y.mode == "pl":
        xx, yy = x.with_mode("pl"), y.with_mode("pl")
        pts = np.union1d(xx.breakpoints, yy.breakpoints)
        return Path(pts, xx(pts) + eps * yy(pts), "pl", x.horizon)
    pts = np.union1d(x.breakpoints, y.breakpoints)
    return Path(pts, x(pts) + eps * y(pts), "pc", x.horizon)


def atom_jump(gradient: Callable[[float, Path], float], x: Path, t_star: float, eps: float) -> float:
    """``grad(t*, x) - grad(t* + eps, x stopped at t*)``: the derivative drop across ``t*``."""
    return float(gradient(t_star, x) - gradient(t_star + eps, x.stopped(t_star)))


def lift_gradient(F, g, grid: TimeGrid, cfg=None, delta: float = 1e-2) -> Callable[[float, Path], float]:
    """Vertical derivative of the lifted ``v^n`` by a central bump."""
    from .slab_pde import solve_vn_lift

    def u(t, x):
        return solve_vn_lift(F, g, grid, (t, x), cfg).value

    return lambda t, x: vertical_derivative(u, t, x, delta).value
