"""Two-fluid Euler-Poisson system on a periodic interval.

Unknowns are ``(n_A, n_B, u, theta)`` with a three-component bulk velocity
depending on ``x`` only.  The system is advanced in non-conservative form,

    n_a_t + (n_a u_1)_x = 0
    u_t + u_1 u_x + e_1 (n_tilde theta)_x / rho - e_1 (n_e / rho) phi_x = 0
    theta_t + u_1 theta_x + (2/3) theta u_1,x = 0
    phi_xx = n_e - n_bar_e

by Fourier pseudo-spectral derivatives (2/3 rule) and classical RK4.
Conservation of mass, momentum and energy is monitored, not imposed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .kinetic_core import DomainError, FluidState, SpatialGrid1D, SpeciesPair


class PositivityError(RuntimeError):
    """A density or the temperature became nonpositive."""


class CFLError(ValueError):
    """Requested time step exceeds the stability bound."""


class SmoothnessError(RuntimeError):
    """Gradients exceeded the blow-up threshold (shock formation)."""


class CompatibilityError(ValueError):
    """Poisson right-hand side has a nonzero mean on the torus."""


@dataclass(frozen=True)
class EPConfig:
    sp: SpeciesPair = field(default_factory=SpeciesPair)
    n_bar_1: float = 1.0
    C_p: float = 1.0
    c1: float = 0.5
    c2: float = 0.5
    cfl: float = 0.5
    t_end: float = 1.0
    grid: SpatialGrid1D = field(default_factory=lambda: SpatialGrid1D(2.0 * np.pi, 64))
    gradient_limit: float = 1e3

    def __post_init__(self) -> None:
        if not (self.n_bar_1 > 0 and self.C_p > 0):
            raise DomainError("need n_bar_1 > 0 and C_p > 0")
        if not 0 < self.cfl <= 1:
            raise DomainError("cfl must lie in (0, 1]")

    @property
    def n_bar_2(self) -> float:
        return self.C_p * self.n_bar_1

    @property
    def n_bar_e(self) -> float:
        return self.sp.e_A * self.n_bar_1 + self.sp.e_B * self.n_bar_2

    @property
    def entropy_constant(self) -> float:
        return self.c1 + self.c2 * self.C_p ** (2.0 / 3.0)

    @property
    def theta_bar(self) -> float:
        return self.entropy_constant * self.n_bar_1 ** (2.0 / 3.0)

    def background(self) -> FluidState:
        n = self.grid.cells
        return FluidState(np.full(n, self.n_bar_1), np.full(n, self.n_bar_2), np.zeros(3), np.full(n, self.theta_bar))

    def with_(self, **kw) -> EPConfig:
        return replace(self, **kw)


@dataclass
class EPState:
    fs: FluidState
    t: float = 0.0


class Spectral:
    """Periodic pseudo-spectral derivative with the 2/3 truncation."""

    def __init__(self, grid: SpatialGrid1D, dealias: bool = True):
        self.grid = grid
        k = grid.wavenumbers
        self.k = k
        kmax = np.abs(k).max() if len(k) > 1 else 0.0
        keep = np.abs(k) <= (2.0 / 3.0) * kmax + 1e-12 if dealias else np.ones_like(k, bool)
        self.ik = np.where(keep, 1j * k, 0.0)
        if grid.cells % 2 == 0:
            self.ik[-1] = 0.0
        self.k2 = k**2

    def dx(self, f: np.ndarray) -> np.ndarray:
        return np.fft.irfft(self.ik * np.fft.rfft(f, axis=-1), n=self.grid.cells, axis=-1)

    def poisson(self, rhs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        fk = np.fft.rfft(rhs)
        phik = np.zeros_like(fk)
        phik[1:] = -fk[1:] / self.k2[1:]
        phi = np.fft.irfft(phik, n=self.grid.cells)
        grad = np.fft.irfft(1j * self.k * phik, n=self.grid.cells)
        return phi, grad


def poisson_solve(n_e: np.ndarray, n_bar_e: float, grid: SpatialGrid1D,
                  tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean ``phi`` with ``phi_xx = n_e - n_bar_e`` and its gradient."""
    rhs = np.asarray(n_e, dtype=float) - n_bar_e
    scale = max(float(np.max(np.abs(n_e))), abs(n_bar_e), 1.0)
    defect = float(np.mean(rhs))
    if abs(defect) > tol * scale:
        raise CompatibilityError(f"mean of n_e - n_bar_e is {defect:.3e}; the periodic problem needs zero")
    return Spectral(grid, dealias=False).poisson(rhs - defect)


def spectral_laplacian(phi: np.ndarray, grid: SpatialGrid1D) -> np.ndarray:
    k = grid.wavenumbers
    return np.fft.irfft(-(k**2) * np.fft.rfft(phi), n=grid.cells)


def symmetrizer(fs: FluidState, sp: SpeciesPair, j: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``A_0`` and ``A_j`` of the quasilinear system at a single point.

    Variable order is ``(n_A, n_B, u_1, u_2, u_3, theta)``; ``A_0 A_j`` is symmetric.
    """
    fs.check_positive()
    nA, nB, th = float(fs.n_A.flat[0]), float(fs.n_B.flat[0]), float(fs.theta.flat[0])
    u = np.asarray(fs.u).reshape(-1, 3)[0]
    rho, nt = sp.m_A * nA + sp.m_B * nB, nA + nB
    A0 = np.diag([th / nA, th / nB, rho, rho, rho, 1.5 * nt / th])
    e = np.zeros(3)
    e[j] = 1.0
    Aj = u[j] * np.eye(6)
    Aj[0, 2:5] = nA * e
    Aj[1, 2:5] = nB * e
    Aj[2:5, 0] = th / rho * e
    Aj[2:5, 1] = th / rho * e
    Aj[2:5, 5] = nt / rho * e
    Aj[5, 2:5] = 2.0 / 3.0 * th * e
    return A0, Aj


def _unpack(fs: FluidState):
    return fs.n_A, fs.n_B, fs.u, fs.theta


def _check_positive(fs: FluidState, grid: SpatialGrid1D, t: float) -> None:
    for name in ("n_A", "n_B", "theta"):
        a = getattr(fs, name)
        bad = np.flatnonzero(~(a > 0))
        if bad.size:
            i = int(bad[0])
            raise PositivityError(f"{name} = {a[i]:.3e} at x = {grid.x[i]:.6g} (index {i}), t = {t:.6g}")


class EPSolver:
    """Method-of-lines right-hand side and RK4 stepping for one configuration."""

    def __init__(self, cfg: EPConfig):
        self.cfg = cfg
        self.op = Spectral(cfg.grid)

    def field(self, fs: FluidState) -> tuple[np.ndarray, np.ndarray]:
        ne = fs.n_e(self.cfg.sp)
        return self.op.poisson(ne - np.mean(ne))

    def rhs(self, fs: FluidState) -> tuple[np.ndarray, ...]:
        sp, D = self.cfg.sp, self.op.dx
        nA, nB, u, th = _unpack(fs)
        u1 = u[:, 0]
        rho, nt, ne = fs.rho(sp), fs.n_tilde(), fs.n_e(sp)
        _, gphi = self.field(fs)
        dnA = -D(nA * u1)
        dnB = -D(nB * u1)
        du = -u1[:, None] * D(u.T).T
        du[:, 0] += (-D(nt * th) + ne * gphi) / rho
        dth = -u1 * D(th) - 2.0 / 3.0 * th * D(u1)
        return dnA, dnB, du, dth

    def max_dt(self, fs: FluidState) -> float:
        sp = self.cfg.sp
        rho = fs.rho(sp)
        cs = np.sqrt(5.0 / 3.0 * fs.n_tilde() * fs.theta / rho)
        speed = float(np.max(np.abs(fs.u[:, 0]) + cs))
        wp = float(np.sqrt(np.max(fs.n_e(sp) ** 2 / rho)))
        dt = self.cfg.cfl * self.cfg.grid.dx / max(speed, 1e-300)
        if wp > 0:
            dt = min(dt, 2.0 * self.cfg.cfl / wp)
        return dt

    def step(self, state: EPState, dt: float) -> EPState:
        fs = state.fs
        limit = self.max_dt(fs)
        if dt > limit * (1 + 1e-12):
            raise CFLError(f"dt = {dt:.3e} exceeds the stability bound {limit:.3e}")

        def shift(base, k, c):
            return FluidState(base.n_A + c * k[0], base.n_B + c * k[1], base.u + c * k[2], base.theta + c * k[3])

        k1 = self.rhs(fs)
        s2 = shift(fs, k1, dt / 2)
        _check_positive(s2, self.cfg.grid, state.t)
        k2 = self.rhs(s2)
        s3 = shift(fs, k2, dt / 2)
        _check_positive(s3, self.cfg.grid, state.t)
        k3 = self.rhs(s3)
        s4 = shift(fs, k3, dt)
        _check_positive(s4, self.cfg.grid, state.t)
        k4 = self.rhs(s4)
        comb = [(a + 2 * b + 2 * c + d) / 6.0 for a, b, c, d in zip(k1, k2, k3, k4)]
        new = shift(fs, comb, dt)
        _check_positive(new, self.cfg.grid, state.t + dt)
        phi, gphi = self.field(new)
        new.phi, new.grad_phi = phi, gphi
        self._check_smooth(new, state.t + dt)
        return EPState(new, state.t + dt)

    def _check_smooth(self, fs: FluidState, t: float) -> None:
        D = self.op.dx
        g = max(float(np.max(np.abs(D(a)))) for a in (fs.n_A, fs.n_B, fs.u[:, 0], fs.theta))
        if not np.isfinite(g) or g > self.cfg.gradient_limit:
            raise SmoothnessError(f"max gradient {g:.3e} above {self.cfg.gradient_limit:.1e} at t = {t:.6g}")


def check_compatible(fs: FluidState, cfg: EPConfig, tol: float = 1e-10) -> None:
    defect = float(np.mean(fs.n_e(cfg.sp)) - cfg.n_bar_e)
    if abs(defect) > tol * max(abs(cfg.n_bar_e), 1.0):
        raise CompatibilityError(f"initial data violate neutrality: mean(n_e) - n_bar_e = {defect:.3e}")


def with_field(fs: FluidState, cfg: EPConfig) -> FluidState:
    phi, g = poisson_solve(fs.n_e(cfg.sp), float(np.mean(fs.n_e(cfg.sp))), cfg.grid)
    return FluidState(fs.n_A, fs.n_B, fs.u, fs.theta, phi, g)


def ep_step(state: EPState, cfg: EPConfig, dt: float) -> EPState:
    return EPSolver(cfg).step(state, dt)


@dataclass
class EPHistory:
    times: np.ndarray
    states: list[FluidState]


def ep_run(fs0: FluidState, cfg: EPConfig, dt: float | None = None, t_end: float | None = None,
           save_every: int = 1) -> EPHistory:
    """Integrate from ``fs0`` to ``t_end`` with a uniform step that lands on ``t_end``."""
    fs0.check_positive()
    check_compatible(fs0, cfg)
    solver = EPSolver(cfg)
    t_end = cfg.t_end if t_end is None else t_end
    # margin for the wave speed growing during the run
    dt = 0.8 * solver.max_dt(fs0) if dt is None else dt
    nsteps = max(1, int(np.ceil(t_end / dt - 1e-9)))
    dt = t_end / nsteps
    state = EPState(with_field(fs0, cfg), 0.0)
    times, states = [0.0], [state.fs]
    for n in range(1, nsteps + 1):
        state = solver.step(state, dt)
        if n % save_every == 0 or n == nsteps:
            times.append(state.t)
            states.append(state.fs)
    return EPHistory(np.array(times), states)


def conservation_diagnostics(history: EPHistory, cfg: EPConfig) -> dict[str, np.ndarray]:
    """Integrals of the conserved densities and their drift from ``t = 0``."""
    sp, dx = cfg.sp, cfg.grid.dx
    op = Spectral(cfg.grid, dealias=False)
    out: dict[str, list[float]] = {"mass_A": [], "mass_B": [], "momentum": [], "energy": [], "neutrality": []}
    for fs in history.states:
        rho = fs.rho(sp)
        ne = fs.n_e(sp)
        _, g = op.poisson(ne - np.mean(ne))
        out["mass_A"].append(float(np.sum(fs.n_A) * dx))
        out["mass_B"].append(float(np.sum(fs.n_B) * dx))
        out["momentum"].append(float(np.sum(rho * fs.u[:, 0]) * dx))
        kin = 0.5 * rho * np.sum(fs.u**2, axis=1) + 1.5 * fs.n_tilde() * fs.theta
        out["energy"].append(float(np.sum(kin + 0.5 * g**2) * dx))
        out["neutrality"].append(float(np.sum(ne - cfg.n_bar_e) * dx))
    res = {k: np.array(v) for k, v in out.items()}
    for k in list(res):
        res[k + "_drift"] = res[k] - res[k][0]
    res["t"] = history.times
    return res


@dataclass
class IsentropicSystem:
    """Single-density isentropic Euler-Poisson system for proportional data.

    With ``n_B = C_p n_A`` and ``theta = kappa n_A^{2/3}``, the mixture closes
    in ``(n_A, u)``; ``u_2, u_3`` are advected passively.
    """

    cfg: EPConfig
    n_A: np.ndarray
    u: np.ndarray
    t: float = 0.0

    @property
    def mass_factor(self) -> float:
        sp = self.cfg.sp
        return sp.m_A + self.cfg.C_p * sp.m_B

    @property
    def charge_factor(self) -> float:
        sp = self.cfg.sp
        return sp.e_A + sp.e_B * self.cfg.C_p

    def rhs(self, nA: np.ndarray, u: np.ndarray):
        cfg = self.cfg
        op = Spectral(cfg.grid)
        D = op.dx
        u1 = u[:, 0]
        pres = (1.0 + cfg.C_p) * cfg.entropy_constant * nA ** (5.0 / 3.0)
        q = self.charge_factor
        _, gphi = op.poisson(q * (nA - np.mean(nA)))
        dn = -D(nA * u1)
        du = -u1[:, None] * D(u.T).T
        du[:, 0] += -D(pres) / (self.mass_factor * nA) + q / self.mass_factor * gphi
        return dn, du

    def step(self, dt: float) -> None:
        n0, u0 = self.n_A, self.u
        k1 = self.rhs(n0, u0)
        k2 = self.rhs(n0 + dt / 2 * k1[0], u0 + dt / 2 * k1[1])
        k3 = self.rhs(n0 + dt / 2 * k2[0], u0 + dt / 2 * k2[1])
        k4 = self.rhs(n0 + dt * k3[0], u0 + dt * k3[1])
        self.n_A = n0 + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        self.u = u0 + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        self.t += dt
        if np.any(self.n_A <= 0):
            raise PositivityError(f"n_A nonpositive at t = {self.t:.6g}")

    def run(self, t_end: float, dt: float) -> FluidState:
        nsteps = max(1, int(np.ceil((t_end - self.t) / dt - 1e-9)))
        h = (t_end - self.t) / nsteps
        for _ in range(nsteps):
            self.step(h)
        return self.full_state()

    def full_state(self) -> FluidState:
        cfg = self.cfg
        return FluidState(self.n_A, cfg.C_p * self.n_A, self.u, cfg.entropy_constant * self.n_A ** (2.0 / 3.0))


def isentropic_reduce(cfg: EPConfig, fs0: FluidState, tol: float = 1e-12) -> IsentropicSystem:
    """Reduced evolver; raises unless ``fs0`` is proportional and isentropic."""
    fs0.check_positive()
    ratio = np.max(np.abs(fs0.n_B - cfg.C_p * fs0.n_A)) / np.max(np.abs(fs0.n_B))
    if ratio > tol:
        raise DomainError(f"initial data are not proportional: max|n_B - C_p n_A|/max n_B = {ratio:.3e}")
    th = cfg.entropy_constant * fs0.n_A ** (2.0 / 3.0)
    dev = np.max(np.abs(fs0.theta - th)) / np.max(th)
    if dev > tol:
        raise DomainError(f"initial temperature is not isentropic: relative deviation {dev:.3e}")
    check_compatible(fs0, cfg)
    return IsentropicSystem(cfg, fs0.n_A.copy(), fs0.u.copy())
