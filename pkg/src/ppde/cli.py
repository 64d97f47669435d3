"""Experiment runner: ``ppde <command> config.ini``.

Exit codes: 0 success, 1 a flagged numerical check failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import os
import platform
import sys
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np
import scipy

from . import __version__
from .approximation import (
    BackendError,
    approximate_solution,
    classical_consistency,
    grid_independence,
    halving_ratios,
    level_value,
    modulus_check,
    stability_experiment,
    write_csv,
)
from .dupire import generator_form, regularity_certificates, vertical_derivative
from .fbsde import McConfig
from .fixtures import load_fixture
from .generators import (
    GENERATORS,
    TERMINALS,
    AtomicMeasure,
    Modulus,
    build_generator,
    build_terminal,
    check_growth,
    validate_assumptions,
)
from .slab_pde import SolverConfig, dump_field, solve_vn_lift
from .timegrid import GridSequence, Path

OUTPUT_ENV = "PPDE_OUTPUT_DIR"
COMMANDS = ("solve", "converge", "gridcheck", "modulus", "stability", "classical", "mc", "dupire", "validate")
CONVERGE_COLUMNS = ("n", "mesh", "t", "path_id", "value", "gap_prev", "se_if_mc")


class ConfigError(ValueError):
    def __init__(self, where: str, message: str):
        super().__init__(f"[{where}] {message}")
        self.where = where


# --------------------------------------------------------------------------
# config


def _number(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    low = text.strip().lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    return text


def parse_levels(text: str, where: str) -> list[int]:
    """``"1-5"`` or ``"1, 2, 4"``."""
    text = (text or "").strip()
    if not text:
        raise ConfigError(where, "levels must not be empty")
    try:
        if "-" in text and "," not in text:
            a, b = (int(v) for v in text.split("-"))
            out = list(range(a, b + 1))
        else:
            out = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(where, f"cannot parse levels {text!r}") from None
    if not out:
        raise ConfigError(where, "levels must not be empty")
    if any(n < 1 for n in out) or out != sorted(set(out)):
        raise ConfigError(where, "levels must be positive and strictly increasing")
    return out


def _floats(text: str, where: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(where, f"expected a comma-separated list of numbers, got {text!r}") from None


@dataclass
class ExperimentConfig:
    generator: str
    terminal: str
    generator_params: dict
    terminal_params: dict
    horizon: float
    sequence: str
    levels: list
    sequence_b: str | None
    levels_b: list
    backend: str
    t: float
    fixtures: list
    output: str
    seed: int
    jobs: int
    solver: SolverConfig
    mc: McConfig
    sections: dict = field(default_factory=dict)
    digest: str = ""

    def section(self, name: str) -> dict:
        return self.sections.get(name, {})

    def build(self):
        try:
            F = build_generator(self.generator, self.generator_params, self.horizon)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("generator", str(exc)) from None
        try:
            g = build_terminal(self.terminal, self.terminal_params, self.horizon)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("terminal", str(exc)) from None
        return F, g

    def grids(self, which: str = "a") -> GridSequence:
        name = self.sequence if which == "a" else self.sequence_b
        key = "sequence" if which == "a" else "sequence_b"
        try:
            return GridSequence.by_name(name, self.horizon)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"grid.{key}", str(exc)) from None

    def queries(self) -> list[tuple[str, tuple[float, Path]]]:
        out = []
        for fid in self.fixtures:
            try:
                x = load_fixture(fid, self.horizon, self.solver.mode)
            except (KeyError, ValueError) as exc:
                raise ConfigError("query.fixtures", str(exc)) from None
            out.append((fid, (self.t, x)))
        return out


def _dataclass_from(cls, section: dict, where: str):
    names = {f.name: f for f in fields(cls)}
    kw = {}
    for k, v in section.items():
        if k not in names:
            raise ConfigError(f"{where}.{k}", f"unknown setting; choose from {sorted(names)}")
        kw[k] = _number(v)
        if k == "radius" and str(v).strip().lower() == "none":
            kw[k] = None
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from None


def load_config(filename: str) -> ExperimentConfig:
    if not os.path.isfile(filename):
        raise ConfigError("file", f"config file {filename!r} not found")
    with open(filename, "rb") as fh:
        raw = fh.read()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(raw.decode())
    except configparser.Error as exc:
        raise ConfigError("file", str(exc).replace("\n", " ")) from None
    sec = {s: dict(cp.items(s)) for s in cp.sections()}
    inst = sec.get("instance", {})
    for key in ("generator", "terminal"):
        if key not in inst:
            raise ConfigError(f"instance.{key}", "missing")
    if inst["generator"] not in GENERATORS:
        raise ConfigError("instance.generator", f"unknown generator {inst['generator']!r}; choose from {sorted(GENERATORS)}")
    if inst["terminal"] not in TERMINALS:
        raise ConfigError("instance.terminal", f"unknown terminal {inst['terminal']!r}; choose from {sorted(TERMINALS)}")
    try:
        horizon = float(inst.get("horizon", 1.0))
    except ValueError:
        raise ConfigError("instance.horizon", "must be a number") from None
    grid = sec.get("grid", {})
    run = sec.get("run", {})
    query = sec.get("query", {})
    if "seed" not in run:
        raise ConfigError("run.seed", "missing (a seed is required for reproducibility)")
    try:
        seed = int(run["seed"])
        jobs = int(run.get("jobs", 1))
        t = float(query.get("t", 0.0))
    except ValueError as exc:
        raise ConfigError("run", str(exc)) from None
    if not 0 <= t <= horizon:
        raise ConfigError("query.t", f"must lie in [0, {horizon}]")
    levels = parse_levels(grid.get("levels", ""), "grid.levels")
    levels_b = parse_levels(grid["levels_b"], "grid.levels_b") if grid.get("levels_b") else []
    solver = _dataclass_from(SolverConfig, sec.get("solver", {}), "solver")
    mc_sec = dict(sec.get("mc", {}))
    mc_sec.setdefault("seed", str(seed))
    mc = _dataclass_from(McConfig, mc_sec, "mc")
    backend = run.get("backend", "lift")
    if backend not in ("lift", "exact", "mc"):
        raise ConfigError("run.backend", f"unknown backend {backend!r}")
    fixtures = [f.strip() for f in query.get("fixtures", "constant").split(",") if f.strip()]
    if not fixtures:
        raise ConfigError("query.fixtures", "no fixtures given")
    cfg = ExperimentConfig(
        generator=inst["generator"],
        terminal=inst["terminal"],
        generator_params={k: _number(v) for k, v in sec.get("generator", {}).items()},
        terminal_params={k: _number(v) for k, v in sec.get("terminal", {}).items()},
        horizon=horizon,
        sequence=grid.get("sequence", "dyadic"),
        levels=levels,
        sequence_b=grid.get("sequence_b"),
        levels_b=levels_b,
        backend=backend,
        t=t,
        fixtures=fixtures,
        output=os.environ.get(OUTPUT_ENV) or run.get("output", "out"),
        seed=seed,
        jobs=jobs,
        solver=solver,
        mc=mc,
        sections=sec,
        digest=hashlib.sha256(raw).hexdigest(),
    )
    cfg.grids("a")
    for fid in fixtures:
        cfg.queries()
        break
    return cfg


# --------------------------------------------------------------------------
# output


def write_manifest(cfg: ExperimentConfig, command: str, outputs: list[str], checks: dict) -> str:
    man = {
        "command": command,
        "config_sha256": cfg.digest,
        "seed": cfg.seed,
        "versions": {
            "ppde": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "outputs": outputs,
        "checks": checks,
    }
    fn = os.path.join(cfg.output, f"{command}_manifest.json")
    with open(fn, "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")
    return fn


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.bool_):
        return bool(v)
    return str(v)


def print_table(rows: list[dict], columns) -> None:
    columns = list(columns)
    cells = [[_cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[k]) for row in cells)) if cells else len(c) for k, c in enumerate(columns)]
    print("  ".join(c.rjust(w) for c, w in zip(columns, widths)))
    for row in cells:
        print("  ".join(v.rjust(w) for v, w in zip(row, widths)))


def _cell(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


# --------------------------------------------------------------------------
# commands


def cmd_solve(cfg: ExperimentConfig, args) -> tuple[list, dict]:
    F, g = cfg.build()
    grids = cfg.grids()
    rows, outputs = [], []
    for fid, q in cfg.queries():
        prev = None
        for n in cfg.levels:
            grid = grids.level(n)
            if args.dump_field and cfg.backend == "lift":
                sol = solve_vn_lift(F, g, grid, q, cfg.solver)
                v, se = sol.value, 0.0
                fn = os.path.join(cfg.output, f"field_{fid}_n{n}.csv")
                dump_field(sol.field, fn)
                outputs.append(fn)
            else:
                v, se = level_value(F, g, grid, q, cfg.backend, cfg.solver, cfg.mc)
            rows.append({"n": n, "mesh": grid.mesh, "t": q[0], "path_id": fid, "value": v,
                         "gap_prev": "" if prev is None else abs(v - prev),
                         "se_if_mc": se if cfg.backend == "mc" else ""})
            prev = v
    fn = os.path.join(cfg.output, "solve.csv")
    write_csv(rows, fn, CONVERGE_COLUMNS)
    print_table(rows, CONVERGE_COLUMNS)
    return [fn] + outputs, {}


def _converge(cfg: ExperimentConfig, backend: str, name: str) -> tuple[list, dict]:
    F, g = cfg.build()
    grids = cfg.grids()
    rows, checks = [], {}
    for fid, q in cfg.queries():
        rep = approximate_solution(F, g, grids, q, cfg.levels, backend, cfg.solver, cfg.mc, fid,
                                   float(cfg.section("converge").get("cauchy_tol", 1e-2)))
        rows += rep.rows()
        rate = rep.rate
        checks[fid] = {
            "limit": rep.limit,
            "finest": rep.finest,
            "rate": None if rate is None else (math.inf if rate.infinite else rate.slope),
            "rate_ok": rate is None or rate.ok(),
            "cauchy": rep.cauchy,
        }
    fn = os.path.join(cfg.output, f"{name}.csv")
    write_csv(rows, fn, CONVERGE_COLUMNS)
    print_table(rows, CONVERGE_COLUMNS)
    for fid, c in checks.items():
        rate = "n/a" if c["rate"] is None else f"{c['rate']:.3g}"
        print(f"{fid}: limit {c['limit']:.6g}  rate {rate}  rate>=1/4 {c['rate_ok']}  cauchy {c['cauchy']}")
    # Monte Carlo gaps mix regression noise into the fit, so the rate is reported but not enforced
    enforce = _number(cfg.section("converge").get("check_rate", "true" if backend != "mc" else "false")) is True
    failed = enforce and any(not c["rate_ok"] for c in checks.values())
    return [fn], {"queries": checks, "rate_enforced": enforce, "failed": failed}


def cmd_converge(cfg, args):
    return _converge(cfg, cfg.backend, "converge")


def cmd_mc(cfg, args):
    return _converge(cfg, "mc", "mc")


def cmd_gridcheck(cfg: ExperimentConfig, args):
    if not cfg.sequence_b or not cfg.levels_b:
        raise ConfigError("grid.sequence_b", "gridcheck needs sequence_b and levels_b")
    F, g = cfg.build()
    named = cfg.queries()
    res = grid_independence(F, g, cfg.grids("a"), cfg.grids("b"), [q for _, q in named], cfg.levels, cfg.levels_b,
                            cfg.backend, cfg.solver, cfg.mc)
    rows = []
    for (fid, _), ra, rb in zip(named, res.reports_a, res.reports_b):
        for seq, rep in ((cfg.sequence, ra), (cfg.sequence_b, rb)):
            for r in rep.rows():
                r.update(path_id=fid, sequence=seq, limit=rep.limit)
                rows.append(r)
    cols = ("sequence",) + CONVERGE_COLUMNS + ("limit",)
    fn = os.path.join(cfg.output, "gridcheck.csv")
    write_csv(rows, fn, cols)
    print_table(rows, cols)
    print(f"discrepancy {res.discrepancy:.3e}  tol_grid {res.tol_grid:.3e}  passed {res.passed}")
    return [fn], {"discrepancy": res.discrepancy, "tol_grid": res.tol_grid, "failed": not res.passed}


def _lift_evaluator(F, g, grid, solver) -> Callable[[float, Path], float]:
    return lambda t, x: solve_vn_lift(F, g, grid, (t, x), solver).value


def cmd_modulus(cfg: ExperimentConfig, args):
    F, g = cfg.build()
    sec = cfg.section("modulus")
    n = int(sec.get("level", cfg.levels[-1]))
    grid = cfg.grids().level(n)
    ev = _lift_evaluator(F, g, grid, cfg.solver)
    space = _floats(sec.get("space_steps", "0.4,0.2,0.1,0.05"), "modulus.space_steps")
    times = _floats(sec.get("time_steps", "0.2,0.1,0.05,0.025"), "modulus.time_steps")
    max_var = float(sec.get("max_variation", 2.0))
    modulus = Modulus(float(sec.get("beta", 1.0)))
    rows, checks, failed = [], {}, False
    include_mesh = _number(sec.get("include_mesh", "false")) is True
    anchor = sec.get("anchor", "start")
    if anchor not in ("start", "end"):
        raise ConfigError("modulus.anchor", "must be start or end")
    t_time = float(sec.get("time_t", cfg.t))
    jobs = []
    for name, key in (("space", "space_fixtures"), ("time", "time_fixtures")):
        ids = [f.strip() for f in sec.get(key, ",".join(cfg.fixtures)).split(",") if f.strip()]
        for fid in ids:
            try:
                x = load_fixture(fid, cfg.horizon, cfg.solver.mode)
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"modulus.{key}", str(exc)) from None
            jobs.append((name, fid, x))
    for name, fid, x in jobs:
        y = Path.constant(1.0, cfg.horizon, x.mode)
        if name == "space":
            tab = modulus_check(ev, cfg.t, x, y, space, [], grid.mesh, modulus).space
        else:
            tab = modulus_check(ev, t_time, x, y, [], times, grid.mesh, modulus, include_mesh, anchor).time
        for s, num, den, r in zip(tab.steps, tab.numerators, tab.denominators, tab.ratios):
            rows.append({"path_id": fid, "table": name, "step": s, "numerator": num, "denominator": den, "ratio": r})
        checks[f"{fid}/{name}"] = {"variation": tab.variation, "bound": tab.bound}
        failed |= tab.variation > max_var
    cols = ("path_id", "table", "step", "numerator", "denominator", "ratio")
    fn = os.path.join(cfg.output, "modulus.csv")
    write_csv(rows, fn, cols)
    print_table(rows, cols)
    return [fn], {"tables": checks, "max_variation": max_var, "failed": failed}


def cmd_stability(cfg: ExperimentConfig, args):
    F0, g0 = cfg.build()
    sec = cfg.section("stability")
    family = sec.get("family", "sigma")
    ks = _floats(sec.get("ks", "2,4,8,16"), "stability.ks")
    n = int(sec.get("level", cfg.levels[-1]))
    grid = cfg.grids().level(n)
    if family == "sigma":
        if cfg.generator != "heat":
            raise ConfigError("stability.family", "the sigma family scales the heat generator")
        base = float(cfg.generator_params.get("scale", 1.0))

        def fam(k):
            params = dict(cfg.generator_params, scale=base * (1 + 1 / k))
            return build_generator("heat", params, cfg.horizon), g0
    elif family == "shift":
        def fam(k):
            return F0, g0.shifted(1 / k)
    else:
        raise ConfigError("stability.family", f"unknown family {family!r}; choose sigma or shift")
    rows, checks, failed = [], {}, False
    tol = float(sec.get("ratio_tol", 0.3))
    for fid, q in cfg.queries():
        table = stability_experiment(fam, ks, (F0, g0), q, grid, cfg.solver)
        for r in table:
            rows.append({"path_id": fid, "k": r.k, "value": r.value, "gap": r.gap})
        ratios = halving_ratios(table)
        checks[fid] = ratios
        failed |= any(abs(r / 2 - 1) > tol for r in ratios)
    cols = ("path_id", "k", "value", "gap")
    fn = os.path.join(cfg.output, "stability.csv")
    write_csv(rows, fn, cols)
    print_table(rows, cols)
    print("halving ratios:", checks)
    return [fn], {"ratios": checks, "failed": failed}


CLASSICAL = ("heat_square", "heat_integral", "bsb_square")


def classical_instance(name: str, horizon: float = 1.0, sigmas=(0.1, 0.2)):
    """``(F, g, w)`` for the built-in instances with closed-form solutions."""
    from .generators import bsb, heat, terminal_integral, terminal_power

    T = horizon
    if name == "heat_square":
        return heat(), terminal_power(2), lambda t, x: float(x.at(t)[0]) ** 2 + (T - t)
    if name == "heat_integral":
        lam = AtomicMeasure.lebesgue(T)
        return heat(), terminal_integral(lam, horizon=T), \
            lambda t, x: float(lam.integrate(x, 0.0, t)[0]) + float(x.at(t)[0]) * (T - t)
    if name == "bsb_square":
        hi = max(sigmas)
        return bsb(sigmas), terminal_power(2), lambda t, x: float(x.at(t)[0]) ** 2 + hi**2 * (T - t)
    raise KeyError(f"unknown classical fixture {name!r}; choose from {CLASSICAL}")


def cmd_classical(cfg: ExperimentConfig, args):
    sec = cfg.section("classical")
    names = [s.strip() for s in sec.get("fixtures", ",".join(CLASSICAL)).split(",") if s.strip()]
    tol = float(sec.get("tol", 1e-2))
    rows, checks = [], {}
    grids = cfg.grids()
    queries = [q for _, q in cfg.queries()]
    for name in names:
        try:
            F, g, w = classical_instance(name, cfg.horizon)
        except KeyError as exc:
            raise ConfigError("classical.fixtures", str(exc)) from None
        rep = classical_consistency(F, g, w, queries, grids, cfg.levels, cfg.solver)
        for n, gap in zip(rep.levels, rep.gaps):
            rows.append({"fixture": name, "n": n, "mesh": grids.level(n).mesh, "max_gap": gap})
        checks[name] = rep.finest_gap
    cols = ("fixture", "n", "mesh", "max_gap")
    fn = os.path.join(cfg.output, "classical.csv")
    write_csv(rows, fn, cols)
    print_table(rows, cols)
    return [fn], {"finest_gap": checks, "tol": tol, "failed": any(v > tol for v in checks.values())}


def cmd_dupire(cfg: ExperimentConfig, args):
    F, g = cfg.build()
    sec = cfg.section("dupire")
    n = int(sec.get("level", cfg.levels[-1]))
    grid = cfg.grids().level(n)
    delta = float(sec.get("delta", 1e-2))
    ev = _lift_evaluator(F, g, grid, cfg.solver)
    derivs = []

    def grad(t, x):
        d = vertical_derivative(ev, t, x, delta)
        derivs.append(d)
        return d.value

    measure = g.measure if g.measure is not None else (F.measure or AtomicMeasure.zero())
    alpha = float(sec.get("alpha", g.alpha))
    fixtures = [x for _, (_, x) in cfg.queries()]
    rep, _ = regularity_certificates(
        grad, measure, fixtures, cfg.t, alpha,
        space_steps=_floats(sec.get("space_steps", "0.4,0.2,0.1,0.05"), "dupire.space_steps"),
        time_steps=_floats(sec.get("time_steps", "0.2,0.1,0.05,0.025"), "dupire.time_steps"),
        uniform_bound=float(sec["uniform_bound"]) if "uniform_bound" in sec else None,
        max_growth=float(sec.get("max_growth", 2.0)),
    )
    form = generator_form(F, alpha, cfg.horizon, seed=cfg.seed)
    rep.labels["generator_form"] = form
    print(f"generator form: {form}")
    cols = ("check_id", "ladder_step", "ratio", "bound", "pass")
    fn = os.path.join(cfg.output, "certificates.csv")
    rows = rep.csv_rows()
    write_csv(rows, fn, cols)
    print_table(rows, cols)
    accepted = sum(d.accepted for d in derivs)
    return [fn], {"passed": rep.passed, "generator_form": form, "derivatives": len(derivs), "accepted": accepted,
                  "failed": not rep.passed}


def cmd_validate(cfg: ExperimentConfig, args):
    F, g = cfg.build()
    samples = int(cfg.section("validate").get("samples", 200))
    rep = validate_assumptions(F, samples, cfg.seed, cfg.horizon)
    results = list(rep.results) + [check_growth(g, samples, cfg.seed, cfg.horizon)]
    rows = [{"probe": r.name, "passed": int(r.passed), "checked": r.checked, "worst": r.worst, "note": r.note}
            for r in results]
    rows += [{"probe": name, "passed": "", "checked": 0, "worst": "", "note": "not checked"} for name in rep.unchecked]
    cols = ("probe", "passed", "checked", "worst", "note")
    fn = os.path.join(cfg.output, "validate.csv")
    write_csv(rows, fn, cols)
    print_table(rows, cols)
    return [fn], {"failed": not all(r.passed for r in results)}


HANDLERS = {
    "solve": cmd_solve,
    "converge": cmd_converge,
    "gridcheck": cmd_gridcheck,
    "modulus": cmd_modulus,
    "stability": cmd_stability,
    "classical": cmd_classical,
    "mc": cmd_mc,
    "dupire": cmd_dupire,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppde", description="Grid approximations of path-dependent PDEs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=(HANDLERS[name].__doc__ or name).strip().splitlines()[0])
        sp.add_argument("config", help="INI experiment config")
        sp.add_argument("--output", help=f"output directory (overrides config and ${OUTPUT_ENV})")
        if name == "solve":
            sp.add_argument("--dump-field", action="store_true", help="write the value field at the query time")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    try:
        cfg = load_config(args.config)
        if args.output:
            cfg.output = args.output
        os.makedirs(cfg.output, exist_ok=True)
        outputs, checks = HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 2
    write_manifest(cfg, args.command, outputs, checks)
    if checks.get("failed"):
        print("a flagged check failed", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
