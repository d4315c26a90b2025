"""Flat ``section.key = value`` configuration files.

Lines are ``key = value``; ``#`` starts a comment.  Every key has a
default, unknown keys are rejected, and all problems in a file are reported
together.  :func:`format_config` writes the effective configuration back in
a form that :func:`parse_config` reads to an identical :class:`RunConfig`.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .collision import CollisionKernel
from .euler_poisson import EPConfig
from .hilbert import ExpansionConfig
from .kinetic_core import DomainError, SpatialGrid1D, SpeciesPair, VelocityGrid
from .remainder_analysis import WeightSpec
from .vpb_sim import SimConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


def _bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(Fraction(p.strip())) for p in s.split(",") if p.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _float(s: str) -> float:
    return float(Fraction(s.strip())) if "/" in s else float(s)


def _optional_float(s: str) -> float | None:
    return None if s.strip().lower() in ("none", "auto", "") else _float(s)


_TWO_PI = 2.0 * math.pi

# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "species.m_A": (_float, 1.875),
    "species.m_B": (_float, 1.0),
    "species.e_A": (_float, 1.0),
    "species.e_B": (_float, 1.0),
    "species.sigma_A": (_float, 1.0),
    "species.sigma_B": (_float, 1.0),
    "kernel.gamma": (_float, 1.0),
    "kernel.C_phi_AA": (_float, 1.0),
    "kernel.C_phi_AB": (_float, 1.0),
    "kernel.C_phi_BB": (_float, 1.0),
    "kernel.C_b": (_float, 1.0),
    "kernel.b_power": (_float, 1.0),
    "velocity.L_v": (_float, 4.5),
    "velocity.points": (int, 7),
    "velocity.axisymmetric": (_bool, False),
    "space.L_x": (_float, 2.0 * _TWO_PI),
    "space.cells": (int, 12),
    "ep.n_bar_1": (_float, 1.0),
    "ep.C_p": (_float, 1.0),
    "ep.c1": (_float, 0.5),
    "ep.c2": (_float, 0.5),
    "ep.cfl": (_float, 0.5),
    "ep.t_end": (_float, 1.0),
    "ep.L_x": (_float, _TWO_PI),
    "ep.cells": (int, 64),
    "ep.amplitude": (_float, 0.05),
    "ep.dt": (_optional_float, None),
    "expansion.k_terms": (int, 1),
    "expansion.epsilon": (_float, 0.1),
    "expansion.tau": (_float, 0.025),
    "expansion.t_end": (_float, 0.4),
    "expansion.output_every": (int, 2),
    "expansion.amplitude": (_float, 0.1),
    "weight.l": (int, 7),
    "weight.kappa_0": (_float, 1e-3),
    "weight.k": (int, 6),
    "sim.epsilon": (_float, 0.1),
    "sim.dt": (_optional_float, None),
    "sim.t_end": (_float, 0.5),
    "sim.output_dt": (_float, 0.05),
    "sim.scheme": (str, "strang"),
    "sim.collisions": (_bool, True),
    "sim.field": (_bool, True),
    "sim.tol_neg": (_float, 1e-8),
    "sweep.epsilons": (_floats, (0.2, 0.1, 0.05, 0.025)),
    "sweep.amplitude": (_float, 0.1),
    "sweep.L_v": (_float, 3.0),
    "sweep.points": (int, 5),
    "sweep.cells": (int, 12),
    "sweep.scheme": (str, "rk4"),
    "validity.gammas": (_floats, (1.0, 0.5, 0.0, -0.5, -1.0, -1.5, -2.0, -2.5, -2.9)),
    "validity.ks": (_ints, (6, 8, 10)),
    "validity.epsilon": (_float, 0.01),
    "characteristics.species": (str, "A"),
    "characteristics.x": (_float, 1.0),
    "characteristics.v": (_floats, (0.5, 0.0, 0.0)),
    "characteristics.t": (_float, 0.0),
    "characteristics.tau_end": (_float, 2.0),
    "characteristics.dtau": (_float, 1e-2),
    "characteristics.phi_amplitude": (_float, 0.5),
    "check.samples": (int, 5),
    "run.seed": (int, 0),
}


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "auto"
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


@dataclass(frozen=True)
class RunConfig:
    """Validated effective configuration (every schema key present)."""

    values: tuple[tuple[str, Any], ...]

    def __getitem__(self, key: str) -> Any:
        return dict(self.values)[key]

    def with_(self, **overrides: Any) -> RunConfig:
        d = dict(self.values)
        for k, v in overrides.items():
            key = k.replace("__", ".")
            if key not in d:
                raise KeyError(key)
            d[key] = v
        return build(d)

    # -- derived objects --------------------------------------------------
    def species(self) -> SpeciesPair:
        g = self.__getitem__
        return SpeciesPair(g("species.m_A"), g("species.m_B"), g("species.e_A"), g("species.e_B"),
                           g("species.sigma_A"), g("species.sigma_B"))

    def kernel(self) -> CollisionKernel:
        g = self.__getitem__
        return CollisionKernel(g("kernel.gamma"), ((g("kernel.C_phi_AA"), g("kernel.C_phi_AB")),
                                                   (g("kernel.C_phi_AB"), g("kernel.C_phi_BB"))),
                               g("kernel.C_b"), g("kernel.b_power"))

    def velocity_grid(self) -> VelocityGrid:
        return VelocityGrid(self["velocity.L_v"], self["velocity.points"], self["velocity.axisymmetric"])

    def spatial_grid(self) -> SpatialGrid1D:
        return SpatialGrid1D(self["space.L_x"], self["space.cells"])

    def ep_config(self) -> EPConfig:
        g = self.__getitem__
        return EPConfig(sp=self.species(), n_bar_1=g("ep.n_bar_1"), C_p=g("ep.C_p"), c1=g("ep.c1"), c2=g("ep.c2"),
                        cfl=g("ep.cfl"), t_end=g("ep.t_end"), grid=SpatialGrid1D(g("ep.L_x"), g("ep.cells")))

    def expansion(self) -> ExpansionConfig:
        return ExpansionConfig(self["expansion.k_terms"], self["expansion.epsilon"])

    def weight(self) -> WeightSpec:
        return WeightSpec(self["kernel.gamma"], self["weight.l"], self["weight.kappa_0"], self["weight.k"])

    def sim(self) -> SimConfig:
        g = self.__getitem__
        return SimConfig(epsilon=g("sim.epsilon"), vg=self.velocity_grid(), grid=self.spatial_grid(),
                         kernel=self.kernel(), sp=self.species(), dt=g("sim.dt"), t_end=g("sim.t_end"),
                         output_dt=g("sim.output_dt"), scheme=g("sim.scheme"), collisions=g("sim.collisions"),
                         field=g("sim.field"), tol_neg=g("sim.tol_neg"))

    # -- serialisation -----------------------------------------------------
    def text(self) -> str:
        lines, section = [], None
        for key, val in self.values:
            s = key.split(".")[0]
            if s != section:
                if section is not None:
                    lines.append("")
                section = s
            lines.append(f"{key} = {_fmt(val)}")
        return "\n".join(lines) + "\n"

    def sha256(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()


_BUILDERS = ("species", "kernel", "velocity_grid", "spatial_grid", "ep_config", "expansion", "weight", "sim")


def _validate(rc: RunConfig) -> list[str]:
    problems = []
    for name in _BUILDERS:
        try:
            getattr(rc, name)()
        except (DomainError, ValueError) as exc:
            problems.append(f"{name}: {exc}")
    g = rc.__getitem__
    if not 0 < g("expansion.epsilon"):
        problems.append("expansion.epsilon: must be positive")
    if g("sweep.scheme") not in ("strang", "rk4"):
        problems.append("sweep.scheme: must be 'strang' or 'rk4'")
    if len(g("sweep.epsilons")) < 3 or any(e <= 0 for e in g("sweep.epsilons")):
        problems.append("sweep.epsilons: need at least three positive values")
    if g("characteristics.species") not in ("A", "B"):
        problems.append("characteristics.species: must be 'A' or 'B'")
    if len(g("characteristics.v")) != 3:
        problems.append("characteristics.v: need three components")
    if any(not -3 < x <= 1 for x in g("validity.gammas")):
        problems.append("validity.gammas: every gamma must lie in (-3, 1]")
    if any(k < 6 for k in g("validity.ks")):
        problems.append("validity.ks: every k must be >= 6")
    if not 0 < g("validity.epsilon") < 1:
        problems.append("validity.epsilon: must lie in (0, 1)")
    if g("run.seed") < 0 or g("run.seed") >= 2**64:
        problems.append("run.seed: must be an unsigned 64-bit integer")
    if g("check.samples") < 1:
        problems.append("check.samples: must be positive")
    return problems


def build(values: dict[str, Any]) -> RunConfig:
    rc = RunConfig(tuple((k, values[k]) for k in SCHEMA))
    problems = _validate(rc)
    if problems:
        raise ConfigError(problems)
    return rc


def defaults() -> RunConfig:
    return build({k: v for k, (_, v) in SCHEMA.items()})


def parse_text(text: str, source: str = "<config>") -> RunConfig:
    values = {k: v for k, (_, v) in SCHEMA.items()}
    problems, seen = [], {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source}:{lineno}: expected 'key = value'")
            continue
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            problems.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        if key in seen:
            problems.append(f"{source}:{lineno}: {key!r} repeats line {seen[key]}")
            continue
        seen[key] = lineno
        try:
            values[key] = SCHEMA[key][0](val)
        except (ValueError, ZeroDivisionError) as exc:
            problems.append(f"{source}:{lineno}: {key}: {exc}")
    if problems:
        raise ConfigError(problems)
    try:
        return build(values)
    except ConfigError as exc:
        raise ConfigError([f"{source}: {p}" for p in exc.problems]) from None


def parse_config(path: str | Path) -> RunConfig:
    p = Path(path)
    return parse_text(p.read_text(encoding="utf-8"), str(p))


def format_config(rc: RunConfig) -> str:
    return rc.text()


def seeded_rng(rc: RunConfig) -> np.random.Generator:
    return np.random.default_rng(rc["run.seed"])
