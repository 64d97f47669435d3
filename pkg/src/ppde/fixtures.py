"""Deterministic query paths shared by the diagnostics, the CLI and the tests."""

from __future__ import annotations

import os
from typing import Callable

import numpy as np

from .timegrid import PC, PL, Path, read_path, write_path


def constant(horizon: float = 1.0, mode: str = PC, level: float = 0.0) -> Path:
    return Path.constant(level, horizon, mode)


def ramp(horizon: float = 1.0) -> Path:
    """``x_s = s / T``, piecewise linear."""
    return Path(np.array([0.0, horizon]), np.array([0.0, 1.0]), PL, horizon)


def single_step(horizon: float = 1.0, at: float = 0.5, height: float = 1.0) -> Path:
    return Path(np.array([0.0, at * horizon]), np.array([0.0, height]), PC, horizon)


def sine(horizon: float = 1.0, nodes: int = 33) -> Path:
    """``sin(2 pi s / T)`` sampled at ``nodes`` points and joined linearly."""
    s = np.linspace(0.0, horizon, nodes)
    return Path(s, np.sin(2 * np.pi * s / horizon), PL, horizon)


def one(horizon: float = 1.0, mode: str = PC) -> Path:
    return Path.constant(1.0, horizon, mode)


FIXTURES: dict[str, Callable[..., Path]] = {
    "constant": constant,
    "one": one,
    "ramp": ramp,
    "step": single_step,
    "sine": sine,
}


def load_fixture(name: str, horizon: float = 1.0, mode: str = PC) -> Path:
    """Built-in fixture by id, or a path file when ``name`` points to one."""
    if name in FIXTURES:
        if name in ("constant", "one"):
            return FIXTURES[name](horizon, mode=mode)
        return FIXTURES[name](horizon)
    if os.path.isfile(name):
        return read_path(name)
    raise KeyError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)} or give a path file")


def write_fixtures(directory: str, horizon: float = 1.0) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    out = []
    for name in FIXTURES:
        fn = os.path.join(directory, f"{name}.path")
        write_path(fn, load_fixture(name, horizon))
        out.append(fn)
    return out
