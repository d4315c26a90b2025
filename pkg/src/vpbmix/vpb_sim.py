"""Kinetic solver for the scaled two-species VPB system and the eps-sweep harness.

The solved system is

    d_t F^a + v_1 d_x F^a + (e^a / m^a) phi_x d_{v_1} F^a = C(F)^a / eps,
    phi_xx = n_e - mean(n_e),

on a periodic interval with three-dimensional velocities.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .collision import AngularGrid, CollisionKernel, collision_frequency, linearize, vector_collision
from .euler_poisson import CFLError, Spectral
from .kinetic_core import (
    DistributionPair,
    DomainError,
    FluidState,
    SpatialGrid1D,
    SpeciesPair,
    VelocityGrid,
    moments,
    velocity_derivative,
)
from .remainder_analysis import WeightSpec, validity_time, weighted_remainder


class NegativityError(RuntimeError):
    """A distribution went negative beyond the clipping tolerance."""


@dataclass(frozen=True)
class SimConfig:
    epsilon: float
    vg: VelocityGrid
    grid: SpatialGrid1D
    kernel: CollisionKernel = field(default_factory=CollisionKernel)
    sp: SpeciesPair = field(default_factory=SpeciesPair)
    ag: AngularGrid | None = None
    dt: float | None = None
    t_end: float = 0.5
    output_dt: float = 0.05
    scheme: str = "strang"
    collisions: bool = True
    field: bool = True
    tol_neg: float = 1e-8
    rk4_safety: float = 0.8
    validity_k: int = 6

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise DomainError("epsilon must be positive")
        if self.scheme not in ("strang", "rk4"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not (self.t_end >= 0 and self.output_dt > 0):
            raise DomainError("need t_end >= 0 and output_dt > 0")

    def with_(self, **kw) -> SimConfig:
        return replace(self, **kw)


class KineticSolver:
    """Semi-discrete operators shared by both time integrators."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.op = Spectral(cfg.grid, dealias=False)
        self.Dv = velocity_derivative(cfg.vg)
        sp = cfg.sp
        self.qm = (sp.e_A / sp.m_A, sp.e_B / sp.m_B)
        self.v1 = cfg.vg.nodes[:, 0]
        self.clip_defect = 0.0
        self._rho = None

    # -- fields ---------------------------------------------------------
    def field(self, F: DistributionPair) -> tuple[np.ndarray, np.ndarray]:
        sp, w = self.cfg.sp, self.cfg.vg.weights
        ne = sp.e_A * (F.F_A @ w) + sp.e_B * (F.F_B @ w)
        if not self.cfg.field:
            z = np.zeros_like(ne)
            return z, z
        return self.op.poisson(ne - np.mean(ne))

    def collision(self, F: DistributionPair) -> DistributionPair:
        c = self.cfg
        return vector_collision(F, c.kernel, c.sp, c.vg, c.ag)

    # -- method of lines --------------------------------------------------
    def rhs(self, F: DistributionPair) -> DistributionPair:
        c = self.cfg
        _, g = self.field(F)
        out = []
        for Fa, qm in zip(F, self.qm):
            dx = self.op.dx(Fa.T).T
            out.append(-self.v1 * dx - qm * g[:, None] * (Fa @ self.Dv.T))
        r = DistributionPair(*out)
        if c.collisions:
            r = r + self.collision(F).scaled(1.0 / c.epsilon)
        return r

    def collision_radius(self, F: DistributionPair) -> float:
        """Spectral radius of ``L`` at the densest node, padded for variation across nodes.

        Tail nodes make the entropic form far stiffer than the collision frequency suggests.
        """
        if self._rho is None:
            c = self.cfg
            fs = moments(F, c.vg, c.sp).fluid_state()
            j = int(np.argmax(fs.n_A + fs.n_B))
            node = fs.at(j)
            if c.vg.axisymmetric:
                node = FluidState(node.n_A, node.n_B, [float(node.u[0, 0]), 0.0, 0.0], node.theta)
            lin = linearize(node, c.kernel, c.sp, c.vg, c.ag)
            self._rho = 1.25 * float(np.max(np.abs(lin.spectrum)))
        return self._rho

    def stiffness(self, F: DistributionPair) -> float:
        """Spectral-radius estimate of the semi-discrete operator."""
        c = self.cfg
        kmax = float(np.max(np.abs(self.op.ik))) if self.op.ik.size else 0.0
        transport = kmax * float(np.max(np.abs(self.v1)))
        _, g = self.field(F)
        accel = max(abs(q) for q in self.qm) * float(np.max(np.abs(g))) / c.vg.h
        coll = self.collision_radius(F) / c.epsilon if c.collisions else 0.0
        return transport + accel + coll

    def step_rk4(self, F: DistributionPair, dt: float) -> DistributionPair:
        k1 = self.rhs(F)
        k2 = self.rhs(F + k1.scaled(dt / 2))
        k3 = self.rhs(F + k2.scaled(dt / 2))
        k4 = self.rhs(F + k3.scaled(dt))
        return F + (k1 + k2.scaled(2.0) + k3.scaled(2.0) + k4).scaled(dt / 6)

    # -- splitting --------------------------------------------------------
    def transport(self, F: DistributionPair, dt: float) -> DistributionPair:
        """Exact free streaming over ``dt`` by a Fourier phase shift."""
        k = self.cfg.grid.wavenumbers
        phase = np.exp(-1j * k[:, None] * self.v1[None, :] * dt)
        n = self.cfg.grid.cells
        out = []
        for Fa in F:
            hat = np.fft.rfft(Fa, axis=0) * phase
            if n % 2 == 0:
                # the Nyquist mode cannot carry a complex phase
                hat[-1] = hat[-1].real * np.cos(k[-1] * self.v1 * dt)
            out.append(np.fft.irfft(hat, n=n, axis=0))
        return DistributionPair(*out)

    def accelerate(self, F: DistributionPair, g: np.ndarray, dt: float) -> DistributionPair:
        """Shift along ``v_1`` by ``(e/m) phi_x dt`` with cubic Lagrange interpolation."""
        vg = self.cfg.vg
        n = vg.points
        out = []
        for Fa, qm in zip(F, self.qm):
            full = vg.expand(Fa).reshape(Fa.shape[0], n, n * n)
            pad = np.concatenate([np.zeros_like(full[:, :2]), full, np.zeros_like(full[:, :2])], axis=1)
            res = np.empty_like(full)
            for x in range(Fa.shape[0]):
                s = qm * g[x] * dt / vg.h
                base = int(np.floor(-s))
                r = -s - base
                w = (-(r) * (r - 1) * (r - 2) / 6, (r + 1) * (r - 1) * (r - 2) / 2,
                     -(r + 1) * r * (r - 2) / 2, (r + 1) * r * (r - 1) / 6)
                acc = np.zeros((n, n * n))
                for m, wm in zip((-1, 0, 1, 2), w):
                    lo = 2 + base + m
                    idx = np.arange(n) + lo
                    valid = (idx >= 0) & (idx < n + 4)
                    rows = np.zeros((n, n * n))
                    rows[valid] = pad[x, idx[valid]]
                    acc += wm * rows
                res[x] = acc
            out.append(vg.restrict(res.reshape(Fa.shape[0], -1)))
        return DistributionPair(*out)

    def collide(self, F: DistributionPair, dt: float, h_max: float) -> DistributionPair:
        """Heun sub-cycles of ``dF/dt = C(F) / eps`` no longer than ``h_max``."""
        eps = self.cfg.epsilon
        nsub = max(1, int(np.ceil(dt / h_max - 1e-12)))
        h = dt / nsub
        for _ in range(nsub):
            k1 = self.collision(F).scaled(1.0 / eps)
            G = F + k1.scaled(h)
            k2 = self.collision(G).scaled(1.0 / eps)
            F = F + (k1 + k2).scaled(h / 2)
        return F

    def step_strang(self, F: DistributionPair, dt: float, h_max: float) -> DistributionPair:
        F = self.transport(F, dt / 2)
        _, g = self.field(F)
        F = self.accelerate(F, g, dt / 2)
        if self.cfg.collisions:
            F = self.collide(F, dt, h_max)
        F = self.accelerate(F, g, dt / 2)
        return self.transport(F, dt / 2)

    def clip(self, F: DistributionPair) -> DistributionPair:
        """Clip small negative values; larger undershoots abort."""
        out = []
        w = self.cfg.vg.weights
        for Fa in F:
            tol = self.cfg.tol_neg * float(np.max(np.abs(Fa)))
            lo = float(np.min(Fa))
            if lo < -tol:
                raise NegativityError(f"distribution reached {lo:.3e} (tolerance {tol:.3e})")
            if lo < 0:
                neg = np.minimum(Fa, 0.0)
                self.clip_defect += float(-np.sum(neg @ w)) * self.cfg.grid.dx
                Fa = np.maximum(Fa, 0.0)
            out.append(Fa)
        return DistributionPair(*out)


def nu_max_of(F: DistributionPair, cfg: SimConfig) -> float:
    fs = moments(F, cfg.vg, cfg.sp).fluid_state()
    j = int(np.argmax(fs.n_A + fs.n_B))
    node = fs.at(j)
    res = collision_frequency(cfg.kernel, cfg.sp, node, cfg.vg, cfg.ag, angular="grid")
    return 1.25 * float(max(res.nu_A.max(), res.nu_B.max()))


def collision_substep(F: DistributionPair, cfg: SimConfig, solver: KineticSolver) -> float:
    """Heun sub-step bound: accuracy against ``nu_max``, stability against the spectral radius."""
    return cfg.epsilon * min(0.1 / nu_max_of(F, cfg), 1.6 / solver.collision_radius(F))


def vpb_step(dp: DistributionPair, cfg: SimConfig, dt: float | None = None,
             solver: KineticSolver | None = None) -> DistributionPair:
    """One step of the configured scheme (Strang splitting by default)."""
    solver = KineticSolver(cfg) if solver is None else solver
    dt = cfg.dt if dt is None else dt
    if dt is None:
        raise ValueError("a step size is required")
    if cfg.scheme == "rk4":
        lim = 2.78 * cfg.rk4_safety / solver.stiffness(dp)
        if dt > lim * (1 + 1e-12):
            raise CFLError(f"dt = {dt:.3e} exceeds the explicit stability bound {lim:.3e}")
        out = solver.step_rk4(dp, dt)
    else:
        h_max = collision_substep(dp, cfg, solver) if cfg.collisions else dt
        out = solver.step_strang(dp, dt, h_max)
    return solver.clip(out)


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


def l2_norm(F: DistributionPair, vg: VelocityGrid, grid: SpatialGrid1D) -> float:
    w = vg.weights
    return float(np.sqrt(grid.dx * sum(np.sum((Fa**2) @ w) for Fa in F)))


def total_energy(F: DistributionPair, cfg: SimConfig, solver: KineticSolver) -> float:
    w, v2 = cfg.vg.weights, np.sum(cfg.vg.nodes**2, axis=1)
    kin = 0.5 * (cfg.sp.m_A * np.sum(F.F_A @ (w * v2)) + cfg.sp.m_B * np.sum(F.F_B @ (w * v2)))
    _, g = solver.field(F)
    return float(cfg.grid.dx * (kin + 0.5 * np.sum(g**2)))


def entropy(F: DistributionPair, vg: VelocityGrid, grid: SpatialGrid1D) -> float:
    """``sum_a int F^a log F^a``; zero entries contribute nothing."""
    w = vg.weights
    tot = 0.0
    for Fa in F:
        pos = np.where(Fa > 0, Fa, 1.0)
        tot += float(np.sum((Fa * np.log(pos)) @ w))
    return tot * grid.dx


@dataclass
class RunResult:
    times: np.ndarray
    mass_A: np.ndarray
    mass_B: np.ndarray
    energy: np.ndarray
    entropy: np.ndarray
    remainder_l2: dict[int, np.ndarray]
    remainder_linf: dict[int, np.ndarray]
    final: DistributionPair
    clip_defect: float
    steps: int
    dt: float

    @property
    def mass_drift(self) -> tuple[np.ndarray, np.ndarray]:
        return (self.mass_A - self.mass_A[0]) / self.mass_A[0], (self.mass_B - self.mass_B[0]) / self.mass_B[0]

    @property
    def energy_drift(self) -> np.ndarray:
        return (self.energy - self.energy[0]) / abs(self.energy[0])


def choose_dt(F: DistributionPair, cfg: SimConfig, solver: KineticSolver) -> float:
    """Largest step that lands on the output grid and meets the scheme's bound."""
    if cfg.scheme == "rk4":
        lim = 2.78 * cfg.rk4_safety / solver.stiffness(F)
    else:
        lim = cfg.dt if cfg.dt is not None else 0.1 * cfg.output_dt
    if cfg.dt is not None:
        lim = min(lim, cfg.dt)
    n = max(1, int(np.ceil(cfg.output_dt / lim - 1e-9)))
    return cfg.output_dt / n


def run(cfg: SimConfig, F_init: DistributionPair, references: dict[int, list[DistributionPair]] | None = None,
        weight: WeightSpec | None = None, theta_M: float | None = None) -> RunResult:
    """Integrate to ``t_end`` and record diagnostics at every output time.

    ``references[k]`` lists the truncated expansion (``k`` terms beyond
    ``F_0``) at each output time; remainder norms are taken against it.
    """
    if cfg.t_end > 0:
        try:
            _, T = validity_time(cfg.kernel.gamma, cfg.validity_k, min(cfg.epsilon, 0.999))
            if cfg.t_end > T:
                warnings.warn(f"t_end = {cfg.t_end} exceeds the validity time {T:.3g}", stacklevel=2)
        except DomainError:
            pass
    solver = KineticSolver(cfg)
    nout = int(round(cfg.t_end / cfg.output_dt))
    if abs(nout * cfg.output_dt - cfg.t_end) > 1e-9 * max(1.0, cfg.t_end):
        raise ValueError("t_end must be a multiple of output_dt")
    references = references or {}
    for k, ref in references.items():
        if len(ref) != nout + 1:
            raise ValueError(f"reference {k} needs {nout + 1} samples")
    F = DistributionPair(F_init.F_A.copy(), F_init.F_B.copy())
    dt = choose_dt(F, cfg, solver)
    per_out = int(round(cfg.output_dt / dt))
    rec: dict[str, list] = {"t": [], "mA": [], "mB": [], "E": [], "S": []}
    l2 = {k: [] for k in references}
    linf = {k: [] for k in references}
    w = cfg.vg.weights
    h_max = collision_substep(F, cfg, solver) if (cfg.collisions and cfg.scheme == "strang") else dt

    def record(i, F):
        rec["t"].append(i * cfg.output_dt)
        rec["mA"].append(cfg.grid.dx * float(np.sum(F.F_A @ w)))
        rec["mB"].append(cfg.grid.dx * float(np.sum(F.F_B @ w)))
        rec["E"].append(total_energy(F, cfg, solver))
        rec["S"].append(entropy(F, cfg.vg, cfg.grid))
        for k, ref in references.items():
            R = F - ref[i]
            l2[k].append(l2_norm(R, cfg.vg, cfg.grid))
            if weight is not None and theta_M is not None:
                linf[k].append(weighted_remainder(R, weight, theta_M, cfg.sp, cfg.vg, i * cfg.output_dt).sup_weighted)
            else:
                linf[k].append(np.nan)

    record(0, F)
    steps = 0
    for i in range(1, nout + 1):
        for _ in range(per_out):
            if cfg.scheme == "rk4":
                F = solver.clip(solver.step_rk4(F, dt))
            else:
                F = solver.clip(solver.step_strang(F, dt, h_max))
            steps += 1
            if not (np.all(np.isfinite(F.F_A)) and np.all(np.isfinite(F.F_B))):
                raise FloatingPointError(f"non-finite distribution at step {steps}")
        record(i, F)
    return RunResult(np.array(rec["t"]), np.array(rec["mA"]), np.array(rec["mB"]), np.array(rec["E"]),
                     np.array(rec["S"]), {k: np.array(v) for k, v in l2.items()},
                     {k: np.array(v) for k, v in linf.items()}, F, solver.clip_defect, steps, dt)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    residual: float
    ci_low: float
    ci_high: float

    def as_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}


def fit_slope(eps, values, confidence: float = 0.95) -> SlopeFit:
    x, y = np.log(np.asarray(eps, float)), np.log(np.asarray(values, float))
    res = stats.linregress(x, y)
    resid = float(np.sqrt(np.mean((y - (res.intercept + res.slope * x)) ** 2)))
    if len(x) > 2:
        q = stats.t.ppf(0.5 + confidence / 2, len(x) - 2) * res.stderr
    else:
        q = np.inf
    return SlopeFit(float(res.slope), float(res.intercept), resid, float(res.slope - q), float(res.slope + q))


@dataclass
class SweepResult:
    epsilons: np.ndarray
    runs: list[RunResult]
    sup_l2: dict[int, np.ndarray]
    fits: dict[int, SlopeFit]
    flags: list[str]

    @property
    def slope(self) -> float:
        return self.fits[min(self.fits)].slope

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["k_terms", "epsilon", "t", "l2_remainder", "linf_weighted_remainder", "mass_drift_A",
                         "mass_drift_B", "energy_drift"])
            for eps, r in zip(self.epsilons, self.runs):
                dA, dB = r.mass_drift
                dE = r.energy_drift
                for k in sorted(r.remainder_l2):
                    for i, t in enumerate(r.times):
                        wr.writerow([k] + [format(float(v), ".17g") for v in (
                            eps, t, r.remainder_l2[k][i], r.remainder_linf[k][i], dA[i], dB[i], dE[i])])

    def write_slope_json(self, path: Path) -> None:
        doc = {"epsilons": [float(e) for e in self.epsilons],
               "fits": {str(k): f.as_dict() for k, f in self.fits.items()},
               "sup_l2": {str(k): [float(v) for v in s] for k, s in self.sup_l2.items()},
               "flags": self.flags}
        doc["slope"] = self.slope
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def check_geometric(eps) -> None:
    e = np.asarray(eps, dtype=float)
    if len(e) < 3:
        raise ValueError("a sweep needs at least three epsilon values")
    r = e[1:] / e[:-1]
    if not np.allclose(r, r[0], rtol=1e-9):
        raise ValueError("epsilon values must be geometrically spaced")


def epsilon_sweep(base: SimConfig, eps_list, F0: list[DistributionPair], F1: list[DistributionPair],
                  k_terms=(0, 1), init_terms: int = 1, weight: WeightSpec | None = None,
                  theta_M: float | None = None) -> SweepResult:
    """Runs over ``eps_list`` with well-prepared data and remainder fits.

    ``F0``/``F1`` are the expansion terms at the output times of ``base``.
    Initial data are ``F0[0] + eps F1[0]`` when ``init_terms = 1``.
    """
    check_geometric(eps_list)
    runs, sup = [], {k: [] for k in k_terms}
    for eps in eps_list:
        cfg = base.with_(epsilon=float(eps))
        init = F0[0] if init_terms == 0 else F0[0] + F1[0].scaled(eps)
        refs = {}
        for k in k_terms:
            refs[k] = [f0 if k == 0 else f0 + f1.scaled(eps) for f0, f1 in zip(F0, F1)]
        r = run(cfg, init, refs, weight, theta_M)
        runs.append(r)
        for k in k_terms:
            sup[k].append(float(np.max(r.remainder_l2[k])))
    flags = []
    fits = {}
    for k in k_terms:
        s = np.array(sup[k])
        order = np.argsort(eps_list)
        if np.any(np.diff(s[order]) < 0):
            flags.append(f"k_terms={k}: remainder not monotone in epsilon")
        fits[k] = fit_slope(eps_list, s)
    return SweepResult(np.asarray(eps_list, float), runs, {k: np.array(v) for k, v in sup.items()}, fits, flags)
