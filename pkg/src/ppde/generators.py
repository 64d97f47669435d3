"""Nonlinearities, terminal functionals and their frozen (grid) versions.

A generator is stored in controlled semilinear form

    F(t, x, y, z, g) = max_a [ f_a(t, s, y, sigma_a^T z) + mu_a . z + 1/2 Tr(sigma_a sigma_a^T g) ]

where the path enters only through ``s = int_[0,t] x d lambda`` for a summary
measure ``lambda`` (``s = 0`` for path-free generators). All coefficient
callables are vectorized over ``s``. Black-box generators (a plain callable of
``(t, path, y, z, gamma)``) are accepted for validation only.

A terminal functional optionally declares the summary form
``g(x) = g0(int x d lambda, x_T)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Callable, Sequence

import numpy as np

from .timegrid import PC, AtomicMeasure, Path, TimeGrid, path_from_key

FD_STEP = 1e-6


# --------------------------------------------------------------------------
# small helpers


def _as_float_array(v, like):
    return np.broadcast_to(np.asarray(v, dtype=float), np.shape(like)).astype(float)


def _fd(fn: Callable, x, h: float = FD_STEP):
    return (fn(x + h) - fn(x - h)) / (2 * h)


@lru_cache(maxsize=4096)
def _prefix_weights_cached(measure: AtomicMeasure, grid: TimeGrid, i: int, t: float, mode: str) -> tuple:
    out = []
    for j in range(i + 1):
        e = np.zeros(i + 1)
        e[j] = 1.0
        basis = path_from_key(grid, e, mode)
        out.append(float(measure.integrate(basis, 0.0, t)[0]))
    return tuple(out)


def prefix_weights(measure: AtomicMeasure | None, grid: TimeGrid, i: int, t: float, mode: str = PC) -> np.ndarray:
    """Coefficients ``c_j`` with ``int_[0,t] Pi_{t_i}[x] d lambda = sum_{j<=i} c_j x_{t_j}``."""
    if measure is None or measure.is_zero:
        return np.zeros(i + 1)
    return np.array(_prefix_weights_cached(measure, grid, int(i), float(t), mode))


# --------------------------------------------------------------------------
# metadata types


@dataclass(frozen=True)
class Structure:
    """Decomposition ``F = H + r y + mu . z + 1/2 Tr(sigma sigma^T gamma)``.

    All callables take ``(t, s)``; ``H`` additionally takes ``(y, z, gamma)``.
    """

    H: Callable
    r: Callable
    mu: Callable
    sigma: Callable


@dataclass(frozen=True)
class Envelope:
    """Bounds ``F_lo + inf_a 1/2 Tr(s_lo s_lo^T g) <= F <= F_hi + sup_a 1/2 Tr(s_hi s_hi^T g)``."""

    controls: tuple
    sigma_lo: Callable  # (t, s, a) -> sigma
    sigma_hi: Callable
    F_lo: Callable = lambda t, s, y, z: 0.0 * y  # noqa: E731
    F_hi: Callable = lambda t, s, y, z: 0.0 * y  # noqa: E731


@dataclass(frozen=True)
class Modulus:
    """Continuity modulus ``w(u) = u`` (Lipschitz) or ``u**beta``; ``w'(u) = sqrt(w(u**2))``."""

    beta: float = 1.0

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ValueError("modulus exponent must lie in (0, 1]")

    def __call__(self, u):
        return np.asarray(u, dtype=float) ** self.beta

    def prime(self, u):
        return np.sqrt(self(np.asarray(u, dtype=float) ** 2))


class StructureError(ValueError):
    """A solver needs coefficient structure the generator does not declare."""


# --------------------------------------------------------------------------
# generator


def _zero(*args):
    return 0.0


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    """A nonlinearity ``F`` in controlled semilinear form.

    Parameters
    ----------
    name : str
    dim : int
        Spatial dimension ``d``.
    controls : tuple
        Finite control list; ``(None,)`` for uncontrolled generators.
    sigma, mu : callable ``(t, s, a)``
        Diffusion and drift. For ``d = 1`` they return arrays shaped like ``s``;
        for ``d = 2`` they return ``(..., 2, 2)`` and ``(..., 2)``.
    driver : callable ``(t, s, y, w, a)``
        The ``f`` part, with ``w = sigma^T z``.
    measure : AtomicMeasure or None
        Summary measure; ``None`` means path-free.
    lipschitz : float
        Constant ``L`` for ``(y, z, gamma)``.
    partials : dict
        Optional analytic derivatives ``mu_s``, ``sigma_s``, ``f_y``, ``f_w``,
        ``f_s`` (same signatures as the coefficient they differentiate).
    evaluate_fn : callable, optional
        Black-box ``(t, path, y, z, gamma)``; when given the coefficient form is
        absent and only validation is available.
    """

    name: str
    dim: int = 1
    controls: tuple = (None,)
    sigma: Callable | None = None
    mu: Callable | None = None
    driver: Callable | None = None
    measure: AtomicMeasure | None = None
    lipschitz: float = 1.0
    structure: Structure | None = None
    envelope: Envelope | None = None
    modulus: Modulus = field(default_factory=Modulus)
    partials: dict = field(default_factory=dict)
    evaluate_fn: Callable | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.evaluate_fn is None and self.sigma is None:
            raise ValueError("a generator needs either coefficients or an evaluate callable")
        if self.dim not in (1, 2) and self.evaluate_fn is None:
            raise ValueError("coefficient generators support d = 1 or 2")
        if len(self.controls) == 0:
            raise ValueError("control list must not be empty")
        object.__setattr__(self, "controls", tuple(self.controls))
        if self.mu is None:
            object.__setattr__(self, "mu", self._zero_drift)
        if self.driver is None:
            object.__setattr__(self, "driver", lambda t, s, y, w, a: 0.0 * y)

    def _zero_drift(self, t, s, a):
        s = np.asarray(s, dtype=float)
        return np.zeros(s.shape + ((self.dim,) if self.dim > 1 else ()))

    def __repr__(self):
        return f"GeneratorSpec({self.name!r}, d={self.dim}, |A|={len(self.controls)})"

    # properties
    @property
    def has_coefficients(self) -> bool:
        return self.evaluate_fn is None

    @property
    def path_free(self) -> bool:
        return self.measure is None or self.measure.is_zero

    @property
    def is_controlled(self) -> bool:
        return len(self.controls) > 1

    def require_coefficients(self) -> "GeneratorSpec":
        if not self.has_coefficients:
            raise StructureError(f"generator {self.name!r} is a black box; solvers need the coefficient form")
        return self

    def summary(self, t: float, path: Path) -> float:
        if self.path_free:
            return 0.0
        return float(self.measure.integrate(path, 0.0, t)[0])

    # coefficient access, vectorized over s
    def sig(self, t, s, a):
        return _as_float_array(self.sigma(t, s, a), s) if self.dim == 1 else np.asarray(self.sigma(t, s, a), float)

    def drift(self, t, s, a):
        return _as_float_array(self.mu(t, s, a), s) if self.dim == 1 else np.asarray(self.mu(t, s, a), float)

    def f(self, t, s, y, w, a):
        return np.asarray(self.driver(t, s, y, w, a), dtype=float)

    def partial(self, name: str, *args):
        """Analytic partial if declared, else a central difference."""
        if name in self.partials:
            return np.asarray(self.partials[name](*args), dtype=float)
        if name == "mu_s":
            t, s, a = args
            return _fd(lambda u: self.drift(t, u, a), np.asarray(s, float))
        if name == "sigma_s":
            t, s, a = args
            return _fd(lambda u: self.sig(t, u, a), np.asarray(s, float))
        t, s, y, w, a = args
        if name == "f_y":
            return _fd(lambda u: self.f(t, s, u, w, a), np.asarray(y, float))
        if name == "f_w":
            return _fd(lambda u: self.f(t, s, y, u, a), np.asarray(w, float))
        if name == "f_s":
            return _fd(lambda u: self.f(t, u, y, w, a), np.asarray(s, float))
        raise KeyError(name)

    def hamiltonian(self, t, s, y, z, gamma, a):
        """The bracket for a single control (d = 1 or 2, scalar inputs)."""
        s = np.asarray(s, dtype=float)
        if self.dim == 1:
            sg = self.sig(t, s, a)
            return self.f(t, s, y, sg * z, a) + self.drift(t, s, a) * z + 0.5 * sg**2 * gamma
        sg = self.sig(t, s, a)
        z = np.asarray(z, float)
        w = sg.T @ z
        return float(self.f(t, s, y, w, a) + self.drift(t, s, a) @ z + 0.5 * np.trace(sg @ sg.T @ np.asarray(gamma)))

    def value_from_summary(self, t, s, y, z, gamma):
        return max(float(self.hamiltonian(t, s, y, z, gamma, a)) for a in self.controls)

    def evaluate(self, t: float, path: Path, y: float, z, gamma) -> float:
        """``F(t, x, y, z, gamma)``; only the past of ``path`` up to ``t`` matters."""
        if self.evaluate_fn is not None:
            return float(self.evaluate_fn(t, path, y, z, gamma))
        return self.value_from_summary(t, self.summary(t, path), y, z, gamma)

    def __call__(self, t, path, y, z, gamma):
        return self.evaluate(t, path, y, z, gamma)

    def with_controls(self, controls: Sequence) -> "GeneratorSpec":
        return _replace(self, controls=tuple(controls))

    def shifted(self, c: float) -> "GeneratorSpec":
        """``F + c`` (constant source)."""
        if self.evaluate_fn is not None:
            fn = self.evaluate_fn
            return _replace(self, name=f"{self.name}+{c:g}", evaluate_fn=lambda t, x, y, z, g: fn(t, x, y, z, g) + c)
        drv = self.driver
        parts = dict(self.partials)
        return _replace(self, name=f"{self.name}+{c:g}", driver=lambda t, s, y, w, a: drv(t, s, y, w, a) + c, partials=parts)


def _replace(obj, **changes):
    from dataclasses import replace

    return replace(obj, **changes)


# --------------------------------------------------------------------------
# terminal functionals


@dataclass(frozen=True)
class Summary:
    """``g(x) = g0(int x d lambda, x_T)`` with optional derivatives of ``g0``."""

    g0: Callable
    measure: AtomicMeasure | None = None
    grad: Callable | None = None  # (S, xT) -> (dS, dx)
    lipschitz_S: float | None = None

    def gradient(self, S, xT):
        if self.grad is not None:
            dS, dx = self.grad(S, xT)
            return np.asarray(dS, float) * np.ones_like(S), np.asarray(dx, float) * np.ones_like(xT)
        S, xT = np.asarray(S, float), np.asarray(xT, float)
        return _fd(lambda u: self.g0(u, xT), S), _fd(lambda u: self.g0(S, u), xT)


@dataclass(frozen=True, eq=False)
class TerminalSpec:
    """A terminal functional ``g`` on paths.

    ``summary`` enables vectorized evaluation on grid keys and the Markovian
    lift; ``alpha`` is the declared Hoelder exponent of the derivative.
    """

    name: str
    evaluate_fn: Callable | None = None
    growth: float = 1.0
    summary: Summary | None = None
    alpha: float = 1.0
    frechet: Callable | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.evaluate_fn is None and self.summary is None:
            raise ValueError("a terminal needs an evaluate callable or a summary form")

    def __repr__(self):
        return f"TerminalSpec({self.name!r})"

    @property
    def measure(self) -> AtomicMeasure | None:
        return None if self.summary is None else self.summary.measure

    def evaluate(self, x: Path) -> float:
        if self.evaluate_fn is not None:
            return float(self.evaluate_fn(x))
        S = 0.0 if self.measure is None else float(self.measure.integrate(x)[0])
        return float(self.summary.g0(S, float(x.at(x.horizon)[0])))

    def __call__(self, x: Path) -> float:
        return self.evaluate(x)

    def node_weights(self, grid: TimeGrid, mode: str = PC) -> np.ndarray:
        if self.measure is None or self.measure.is_zero:
            return np.zeros(len(grid))
        return self.measure.node_weights(grid, mode)

    def on_keys(self, grid: TimeGrid, keys, mode: str = PC) -> np.ndarray:
        """``g(Pi^n[x])`` for full keys of shape ``(..., n+1)`` (d = 1)."""
        keys = np.asarray(keys, dtype=float)
        if keys.shape[-1] != len(grid):
            raise ValueError("full keys need one entry per grid point")
        if self.summary is not None:
            S = keys @ self.node_weights(grid, mode)
            return np.asarray(self.summary.g0(S, keys[..., -1]), dtype=float) * np.ones(keys.shape[:-1])
        flat = keys.reshape(-1, keys.shape[-1])
        out = np.array([self.evaluate(path_from_key(grid, k, mode)) for k in flat])
        return out.reshape(keys.shape[:-1])

    def shifted(self, c: float) -> "TerminalSpec":
        if self.summary is not None:
            g0, grad = self.summary.g0, self.summary.grad
            summ = Summary(lambda S, xT: g0(S, xT) + c, self.summary.measure, grad, self.summary.lipschitz_S)
            return TerminalSpec(f"{self.name}+{c:g}", None, self.growth + abs(c), summ, self.alpha)
        fn = self.evaluate_fn
        return TerminalSpec(f"{self.name}+{c:g}", lambda x: fn(x) + c, self.growth + abs(c), None, self.alpha)

    def plus(self, other: "TerminalSpec") -> "TerminalSpec":
        """Pointwise sum; keeps the summary form when both share a measure."""
        a, b = self, other
        if a.summary is not None and b.summary is not None and (
            a.measure is b.measure or a.measure is None or b.measure is None
        ):
            m = a.measure if a.measure is not None else b.measure
            ga, gb = a.summary.g0, b.summary.g0
            return TerminalSpec(f"{a.name}+{b.name}", None, a.growth + b.growth, Summary(lambda S, x: ga(S, x) + gb(S, x), m))
        return TerminalSpec(f"{a.name}+{b.name}", lambda x: a(x) + b(x), a.growth + b.growth)


# --------------------------------------------------------------------------
# frozen objects


@dataclass(frozen=True)
class FrozenKey:
    """The key ``(x_{t_0}, ..., x_{t_i})`` of a path on a level-``n`` grid."""

    level: int
    index: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.index + 1:
            raise ValueError(f"key for slab {self.index} needs {self.index + 1} values, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise ValueError("key values must be finite")
        object.__setattr__(self, "values", v)

    @classmethod
    def of(cls, grid: TimeGrid, x: Path, i: int, level: int | None = None) -> "FrozenKey":
        return cls(grid.n if level is None else level, i, x.key(grid, i))

    def extended(self, value) -> "FrozenKey":
        return FrozenKey(self.level, self.index + 1, np.vstack([self.values, np.atleast_1d(value)[None, :]]))

    def path(self, grid: TimeGrid, mode: str = PC) -> Path:
        return path_from_key(grid, self.values, mode)


class KeyMismatch(ValueError):
    """A frozen key does not fit the grid."""


def _check_key(grid: TimeGrid, key: FrozenKey, full: bool = False):
    if key.level != grid.n:
        raise KeyMismatch(f"key for level {key.level} used on a grid with {grid.n} slabs")
    if key.index > grid.n or (not full and key.index >= grid.n):
        raise KeyMismatch(f"slab index {key.index} outside the grid")
    if full and key.index != grid.n:
        raise KeyMismatch("terminal evaluation needs the full key")


@dataclass(frozen=True)
class FrozenGenerator:
    """``F^n_i(t, [x]_i, .)`` on ``[t_i, t_{i+1})``; ignores the spatial variable."""

    generator: GeneratorSpec
    grid: TimeGrid
    key: FrozenKey
    mode: str = PC

    @property
    def slab(self) -> tuple[float, float]:
        i = self.key.index
        return self.grid[i], self.grid[i + 1]

    @property
    def frozen_path(self) -> Path:
        return self.key.path(self.grid, self.mode)

    def summary(self, t: float) -> float:
        if self.generator.path_free:
            return 0.0
        c = prefix_weights(self.generator.measure, self.grid, self.key.index, t, self.mode)
        return float(c @ self.key.values[:, 0])

    def __call__(self, t, x, y, z, gamma):
        g = self.generator
        if g.evaluate_fn is not None:
            return g.evaluate(t, self.frozen_path, y, z, gamma)
        return g.value_from_summary(t, self.summary(t), y, z, gamma)


def freeze(F: GeneratorSpec, grid: TimeGrid, key: FrozenKey, mode: str = PC) -> FrozenGenerator:
    _check_key(grid, key)
    return FrozenGenerator(F, grid, key, mode)


def terminal_on_key(g: TerminalSpec, grid: TimeGrid, key: FrozenKey, mode: str = PC) -> float:
    """``g(Pi^n[x])`` rebuilt from the full key."""
    _check_key(grid, key, full=True)
    return g.evaluate(key.path(grid, mode))


# --------------------------------------------------------------------------
# assumption probes


@dataclass
class ProbeResult:
    name: str
    passed: bool
    checked: int
    worst: float = 0.0
    witness: Any = None
    note: str = ""


@dataclass
class AssumptionReport:
    generator: str
    results: list = field(default_factory=list)
    unchecked: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def __getitem__(self, name):
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)

    def violations(self):
        return [r for r in self.results if not r.passed]


def random_step_path(rng: np.random.Generator, horizon: float = 1.0, jumps: int = 4, scale: float = 1.0) -> Path:
    times = np.sort(rng.uniform(0, horizon, jumps))
    vals = scale * rng.standard_normal(jumps + 1)
    return Path(np.concatenate([[0.0], times]), vals, PC, horizon)


def _rand_sym(rng, d, scale=1.0):
    m = scale * rng.standard_normal((d, d))
    return 0.5 * (m + m.T)


def validate_assumptions(F: GeneratorSpec, samples: int = 200, seed: int = 0, horizon: float = 1.0, tol: float = 1e-9) -> AssumptionReport:
    """Sampled checks of gamma-monotonicity, the Lipschitz bound and the envelope."""
    rng = np.random.default_rng(seed)
    d = F.dim
    rep = AssumptionReport(F.name)
    mono = ProbeResult("gamma_monotone", True, 0)
    lip = ProbeResult("lipschitz", True, 0)
    nonant = ProbeResult("non_anticipative", True, 0)
    env = ProbeResult("envelope", True, 0) if F.envelope is not None else None

    def vec(v):
        return float(np.ravel(v)[0]) if d == 1 else np.asarray(v)

    def mat(m):
        return float(m[0, 0]) if d == 1 else m

    for k in range(samples):
        x = random_step_path(rng, horizon)
        t = float(rng.uniform(0, horizon))
        y = float(rng.standard_normal())
        z = rng.standard_normal(d)
        gam = _rand_sym(rng, d)
        base = F.evaluate(t, x, y, vec(z), mat(gam))
        # monotonicity in gamma, including the identity direction
        b = rng.standard_normal((d, d))
        delta = b @ b.T if k else np.eye(d)
        up = F.evaluate(t, x, y, vec(z), mat(gam + delta))
        mono.checked += 1
        if up < base - tol * (1 + abs(base)):
            gap = base - up
            if mono.passed or gap > mono.worst:
                mono.worst, mono.witness = gap, {"t": t, "y": y, "z": z, "gamma": gam, "delta": delta}
            mono.passed = False
        # Lipschitz in (y, z, gamma)
        dy = float(rng.standard_normal())
        dz = rng.standard_normal(d)
        dg = _rand_sym(rng, d)
        moved = F.evaluate(t, x, y + dy, vec(z + dz), mat(gam + dg))
        bound = F.lipschitz * (abs(dy) + np.linalg.norm(dz) + np.linalg.norm(dg, 2))
        lip.checked += 1
        excess = abs(moved - base) - bound
        if excess > tol * (1 + abs(base)):
            if lip.passed or excess > lip.worst:
                lip.worst, lip.witness = excess, {"t": t, "dy": dy, "dz": dz, "dgamma": dg}
            lip.passed = False
        # non-anticipativity: change the path after t
        tail = concat_tail(x, t, rng)
        other = F.evaluate(t, tail, y, vec(z), mat(gam))
        nonant.checked += 1
        if abs(other - base) > tol * (1 + abs(base)):
            nonant.passed = False
            nonant.worst = max(nonant.worst, abs(other - base))
            nonant.witness = {"t": t}
        if env is not None:
            e = F.envelope
            s = F.summary(t, x)
            lo_terms, hi_terms = [], []
            for a in e.controls:
                slo = np.atleast_2d(e.sigma_lo(t, s, a))
                shi = np.atleast_2d(e.sigma_hi(t, s, a))
                pair = (0.5 * np.trace(slo @ slo.T @ np.atleast_2d(gam)), 0.5 * np.trace(shi @ shi.T @ np.atleast_2d(gam)))
                lo_terms.append(min(pair))
                hi_terms.append(max(pair))
            lo = float(e.F_lo(t, s, y, z)) + min(lo_terms)
            hi = float(e.F_hi(t, s, y, z)) + max(hi_terms)
            env.checked += 1
            slack = tol * (1 + abs(base))
            if base < lo - slack or base > hi + slack:
                env.passed = False
                env.worst = max(env.worst, lo - base, base - hi)
                env.witness = {"t": t, "gamma": gam, "value": base, "bounds": (lo, hi)}
    rep.results += [mono, lip, nonant] + ([env] if env is not None else [])
    rep.unchecked.append("Ishii-type matrix inequality (quantifier over constrained matrices, not sampled)")
    return rep


def concat_tail(x: Path, t: float, rng: np.random.Generator) -> Path:
    from .timegrid import concat

    tail = random_step_path(rng, x.horizon)
    return concat(x, t, tail.shifted(x.at(t) - tail.at(t))) if t > 0 else x


def check_growth(g: TerminalSpec, samples: int = 200, seed: int = 0, horizon: float = 1.0) -> ProbeResult:
    rng = np.random.default_rng(seed)
    res = ProbeResult("growth", True, 0)
    for _ in range(samples):
        x = random_step_path(rng, horizon, scale=float(rng.uniform(0.1, 10)))
        ratio = abs(g(x)) / (1 + x.norm)
        res.checked += 1
        if ratio > g.growth * (1 + 1e-12):
            res.passed = False
            res.worst = max(res.worst, ratio)
    return res


# --------------------------------------------------------------------------
# built-in instances


def _const(c):
    return lambda t, s, a: c + 0.0 * np.asarray(s, dtype=float)


def heat(dim: int = 1, scale: float = 1.0, source: float = 0.0) -> GeneratorSpec:
    """``F = 1/2 scale^2 Tr(gamma) + source``."""
    if dim == 1:
        sig = _const(scale)
    else:
        sig = lambda t, s, a: scale * np.broadcast_to(np.eye(dim), np.shape(s) + (dim, dim))  # noqa: E731
    drv = (lambda t, s, y, w, a: source + 0.0 * y) if source else None
    return GeneratorSpec(
        name="heat" if source == 0 else f"heat+{source:g}",
        dim=dim,
        sigma=sig,
        driver=drv,
        lipschitz=0.5 * scale**2 * dim,
        structure=Structure(
            H=lambda t, s, y, z, g: source,
            r=lambda t, s: 0.0,
            mu=lambda t, s: np.zeros(dim),
            sigma=lambda t, s: scale * np.eye(dim),
        ),
        envelope=Envelope((None,), lambda t, s, a: scale * np.eye(dim), lambda t, s, a: scale * np.eye(dim),
                          lambda t, s, y, z: source, lambda t, s, y, z: source),
        partials={"mu_s": lambda t, s, a: 0.0 * s, "sigma_s": lambda t, s, a: 0.0 * s},
        params={"dim": dim, "scale": scale, "source": source},
    )


def bsb(sigmas: Sequence[float] = (0.1, 0.2), source: float = 0.0) -> GeneratorSpec:
    """Uncertain volatility ``F = max_a 1/2 a^2 gamma`` over a finite set of volatilities."""
    sigmas = tuple(float(a) for a in sigmas)
    if min(sigmas) <= 0:
        raise ValueError("volatilities must be positive")
    lo, hi = min(sigmas), max(sigmas)
    return GeneratorSpec(
        name="bsb",
        controls=sigmas,
        sigma=lambda t, s, a: a + 0.0 * np.asarray(s, dtype=float),
        driver=(lambda t, s, y, w, a: source + 0.0 * y) if source else None,
        lipschitz=0.5 * hi**2,
        envelope=Envelope(sigmas, lambda t, s, a: lo, lambda t, s, a: hi,
                          lambda t, s, y, z: source, lambda t, s, y, z: source),
        partials={"mu_s": lambda t, s, a: 0.0 * s, "sigma_s": lambda t, s, a: 0.0 * s},
        params={"sigmas": sigmas, "source": source},
    )


def semilinear(
    measure: AtomicMeasure | None = None,
    drift: float = 0.3,
    vol: float = 0.5,
    rate: float = 0.5,
    beta: float = 0.3,
    kappa: float = 0.2,
    horizon: float = 1.0,
) -> GeneratorSpec:
    """Semilinear generator with running-integral dependence.

    ``mu = drift tanh(s)``, ``sigma = vol (1 + 0.2 sin s)`` and
    ``f = -rate y + beta tanh(w) + kappa cos(s)``, ``s = int_[0,t] x d lambda``
    (Lebesgue by default).
    """
    m = AtomicMeasure.lebesgue(horizon) if measure is None else measure
    L = max(rate, beta * vol * 1.2, 1.0)

    def sigma(t, s, a):
        return vol * (1 + 0.2 * np.sin(s))

    def mu(t, s, a):
        return drift * np.tanh(s)

    def f(t, s, y, w, a):
        return -rate * y + beta * np.tanh(w) + kappa * np.cos(s)

    partials = {
        "mu_s": lambda t, s, a: drift / np.cosh(s) ** 2,
        "sigma_s": lambda t, s, a: 0.2 * vol * np.cos(s),
        "f_y": lambda t, s, y, w, a: -rate + 0.0 * y,
        "f_w": lambda t, s, y, w, a: beta / np.cosh(w) ** 2,
        "f_s": lambda t, s, y, w, a: -kappa * np.sin(s) + 0.0 * y,
    }
    return GeneratorSpec(
        name="semilinear",
        sigma=sigma,
        mu=mu,
        driver=f,
        measure=m,
        lipschitz=L,
        structure=Structure(
            H=lambda t, s, y, z, g: beta * np.tanh(sigma(t, s, None) * z) + kappa * np.cos(s),
            r=lambda t, s: -rate,
            mu=mu_s_only(mu),
            sigma=lambda t, s: sigma(t, s, None),
        ),
        partials=partials,
        params=dict(drift=drift, vol=vol, rate=rate, beta=beta, kappa=kappa),
    )


def mu_s_only(mu):
    return lambda t, s: mu(t, s, None)


def linear(
    measure: AtomicMeasure | None = None,
    r0: float = -0.2,
    r1: float = 0.1,
    m0: float = 0.0,
    m1: float = 0.2,
    vol: float = 0.4,
    k: float = 0.25,
    source: float = 0.0,
    horizon: float = 1.0,
) -> GeneratorSpec:
    """Linear generator ``F = r(s) y + mu(s) z + 1/2 sigma(s)^2 gamma + source``.

    ``r = r0 + r1 tanh s``, ``mu = m0 + m1 tanh s``, ``sigma = vol (1 + k tanh s)``.
    """
    if not abs(k) < 1:
        raise ValueError("need |k| < 1 for a nondegenerate volatility")
    m = AtomicMeasure.lebesgue(horizon) if measure is None else measure

    def sigma(t, s, a):
        return vol * (1 + k * np.tanh(s))

    def mu(t, s, a):
        return m0 + m1 * np.tanh(s)

    def f(t, s, y, w, a):
        return (r0 + r1 * np.tanh(s)) * y + source

    sech2 = lambda s: 1 / np.cosh(s) ** 2  # noqa: E731
    return GeneratorSpec(
        name="linear",
        sigma=sigma,
        mu=mu,
        driver=f,
        measure=m,
        lipschitz=max(abs(r0) + abs(r1), (vol * (1 + abs(k))) ** 2 / 2, abs(m0) + abs(m1)),
        structure=Structure(
            H=lambda t, s, y, z, g: source,
            r=lambda t, s: r0 + r1 * np.tanh(s),
            mu=mu_s_only(mu),
            sigma=lambda t, s: sigma(t, s, None),
        ),
        partials={
            "mu_s": lambda t, s, a: m1 * sech2(s),
            "sigma_s": lambda t, s, a: vol * k * sech2(s),
            "f_y": lambda t, s, y, w, a: r0 + r1 * np.tanh(s) + 0.0 * y,
            "f_w": lambda t, s, y, w, a: 0.0 * y,
            "f_s": lambda t, s, y, w, a: r1 * sech2(s) * y,
        },
        params=dict(r0=r0, r1=r1, m0=m0, m1=m1, vol=vol, k=k, source=source),
    )


def controlled_drift(drifts: Sequence[float] = (-1.0, 1.0), vol: float = 1.0) -> GeneratorSpec:
    """``F = max_a a z + 1/2 vol^2 gamma``: control acts through the drift only."""
    drifts = tuple(float(a) for a in drifts)
    return GeneratorSpec(
        name="controlled_drift",
        controls=drifts,
        sigma=_const(vol),
        mu=lambda t, s, a: a + 0.0 * np.asarray(s, dtype=float),
        lipschitz=max(max(abs(a) for a in drifts), 0.5 * vol**2),
        partials={"mu_s": lambda t, s, a: 0.0 * s, "sigma_s": lambda t, s, a: 0.0 * s},
        params={"drifts": drifts, "vol": vol},
    )


def black_box(fn: Callable, name: str = "custom", dim: int = 1, lipschitz: float = 1.0) -> GeneratorSpec:
    return GeneratorSpec(name=name, dim=dim, evaluate_fn=fn, lipschitz=lipschitz)


# terminals


def terminal_power(p: int = 2) -> TerminalSpec:
    """``g(x) = x_T^p``."""
    return TerminalSpec(
        f"xT^{p}",
        summary=Summary(lambda S, x: np.asarray(x, float) ** p, None, lambda S, x: (0.0 * x, p * np.asarray(x, float) ** (p - 1))),
        growth=np.inf if p > 1 else 1.0,
        params={"p": p},
    )


def terminal_abs() -> TerminalSpec:
    return TerminalSpec("abs_xT", summary=Summary(lambda S, x: np.abs(x), None, lambda S, x: (0.0 * x, np.sign(x))), growth=1.0)


def terminal_integral(measure: AtomicMeasure | None = None, power: int = 1, horizon: float = 1.0, coef: float = 1.0) -> TerminalSpec:
    """``g(x) = coef (int x d lambda)^power`` (Lebesgue by default)."""
    m = AtomicMeasure.lebesgue(horizon) if measure is None else measure

    def g0(S, x):
        return coef * np.asarray(S, float) ** power + 0.0 * np.asarray(x, float)

    def grad(S, x):
        return coef * power * np.asarray(S, float) ** (power - 1), 0.0 * np.asarray(x, float)

    return TerminalSpec(
        "integral" if power == 1 else f"integral^{power}",
        summary=Summary(g0, m, grad, lipschitz_S=abs(coef) if power == 1 else None),
        growth=abs(coef) * m.total if power == 1 else np.inf,
        params={"power": power, "coef": coef},
    )


def terminal_logcosh(measure: AtomicMeasure | None = None, horizon: float = 1.0) -> TerminalSpec:
    """``g(x) = log cosh(int x d lambda)``: 1-Lipschitz with bounded second derivative."""
    m = AtomicMeasure.lebesgue(horizon) if measure is None else measure

    def g0(S, x):
        S = np.asarray(S, float)
        return np.logaddexp(S, -S) - np.log(2.0) + 0.0 * np.asarray(x, float)

    return TerminalSpec(
        "logcosh",
        summary=Summary(g0, m, lambda S, x: (np.tanh(S), 0.0 * np.asarray(x, float)), lipschitz_S=1.0),
        growth=max(1.0, m.total),
    )


def terminal_semilinear(measure: AtomicMeasure | None = None, horizon: float = 1.0) -> TerminalSpec:
    """``g(x) = softplus(x_T) + 0.5 sin(int x d lambda)``."""
    m = AtomicMeasure.lebesgue(horizon) if measure is None else measure

    def g0(S, x):
        return np.logaddexp(0.0, x) + 0.5 * np.sin(S)

    def grad(S, x):
        return 0.5 * np.cos(S), 0.5 * (1 + np.tanh(0.5 * np.asarray(x, float)))

    return TerminalSpec("semilinear_terminal", summary=Summary(g0, m, grad), growth=1.0 + np.log(2) + 0.5)


def terminal_from_callable(fn: Callable, name: str = "custom", growth: float = 1.0) -> TerminalSpec:
    return TerminalSpec(name, evaluate_fn=fn, growth=growth)


GENERATORS: dict[str, Callable[..., GeneratorSpec]] = {
    "heat": heat,
    "bsb": bsb,
    "semilinear": semilinear,
    "linear": linear,
    "controlled_drift": controlled_drift,
}

TERMINALS: dict[str, Callable[..., TerminalSpec]] = {
    "power": terminal_power,
    "square": lambda **kw: terminal_power(2),
    "abs": terminal_abs,
    "integral": terminal_integral,
    "integral_square": lambda **kw: terminal_integral(power=2, **kw),
    "logcosh": terminal_logcosh,
    "semilinear": terminal_semilinear,
}


def measure_from_params(params: dict, horizon: float = 1.0) -> AtomicMeasure | None:
    """Measure from config keys ``measure = lebesgue | atoms | none``, ``atoms = t:w, ...``."""
    kind = str(params.pop("measure", "lebesgue")).lower()
    atoms = params.pop("atoms", "")
    scale = float(params.pop("density", 1.0))
    if kind == "none":
        return None
    m = AtomicMeasure.lebesgue(horizon, scale) if kind in ("lebesgue", "mixed") else AtomicMeasure.zero()
    if kind in ("atoms", "mixed") and atoms:
        pairs = [a.split(":") for a in str(atoms).split(",") if a.strip()]
        m = m + AtomicMeasure.atoms([float(p[0]) for p in pairs], [float(p[1]) for p in pairs])
    return m


def build_generator(name: str, params: dict | None = None, horizon: float = 1.0) -> GeneratorSpec:
    params = dict(params or {})
    if name not in GENERATORS:
        raise KeyError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}")
    if name in ("semilinear", "linear"):
        params["measure"] = measure_from_params(params, horizon)
        params["horizon"] = horizon
    if name == "bsb" and "sigmas" in params and isinstance(params["sigmas"], str):
        params["sigmas"] = tuple(float(v) for v in params["sigmas"].split(","))
    if name == "controlled_drift" and isinstance(params.get("drifts"), str):
        params["drifts"] = tuple(float(v) for v in params["drifts"].split(","))
    return GENERATORS[name](**params)


def build_terminal(name: str, params: dict | None = None, horizon: float = 1.0) -> TerminalSpec:
    params = dict(params or {})
    if name not in TERMINALS:
        raise KeyError(f"unknown terminal {name!r}; choose from {sorted(TERMINALS)}")
    if name in ("integral", "integral_square", "logcosh", "semilinear"):
        params["measure"] = measure_from_params(params, horizon)
        params["horizon"] = horizon
    if name == "power" and "p" in params:
        params["p"] = int(params["p"])
    return TERMINALS[name](**params)
