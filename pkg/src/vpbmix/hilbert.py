"""Hilbert expansion ``F = F_0 + eps F_1 + ...`` around an Euler-Poisson flow.

Fluid unknowns are handled in the primitive ordering
``U = (n_A, n_B, u_1, u_2, u_3, theta)`` and conserved ordering
``W = (n_A, n_B, rho u_1, rho u_2, rho u_3, rho |u|^2 / 2 + 3 n_tilde theta / 2)``.
An order-``l`` correction is stored through its macroscopic coordinates
``Z_l = (n_l^A, n_l^B, u_l, dtheta_l)`` (so that the macroscopic part of
``F_l`` is ``dmu/dU . Z_l``) plus its microscopic part.  The temperature
coefficient in the convention of the symmetric system is ``theta_l = 3 dtheta_l``.

A *closure* supplies ``W(U)``, the ``x_1`` flux and the field source.
:class:`ContinuumClosure` uses the exact Maxwellian moments.
:class:`DiscreteClosure` takes them by the velocity quadrature with the
same ``v_1`` difference operator as the kinetic solver, so that the
expansion is consistent with the semi-discrete kinetic model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import make_interp_spline

from .collision import (
    AngularGrid,
    CollisionKernel,
    LinearizedOperator,
    linearize,
    macro_project,
    solve_L_inverse,
    stacked_weights,
)
from .euler_poisson import EPConfig, EPHistory, EPSolver, Spectral
from .kinetic_core import (
    DistributionPair,
    DomainError,
    FluidState,
    SpatialGrid1D,
    SpeciesPair,
    VelocityGrid,
    bi_maxwellian,
    velocity_derivative,
)

NVAR = 6


def _fields(U):
    return U[0], U[1], U[2:5], U[5]


def _maxwellian_c(n, u, theta, m, v):
    """Complex-safe Maxwellian; ``n, theta`` shape ``(nx,)``, ``u`` shape ``(3, nx)``."""
    d2 = sum((v[None, :, d] - u[d][:, None]) ** 2 for d in range(3))
    return n[:, None] * (m / (2 * np.pi * theta[:, None])) ** 1.5 * np.exp(-m * d2 / (2 * theta[:, None]))


def maxwellian_pair(U: np.ndarray, sp: SpeciesPair, vg: VelocityGrid) -> tuple[np.ndarray, np.ndarray]:
    nA, nB, u, th = _fields(U)
    v = vg.nodes
    return _maxwellian_c(nA, u, th, sp.m_A, v), _maxwellian_c(nB, u, th, sp.m_B, v)


def maxwellian_derivatives(U: np.ndarray, sp: SpeciesPair, vg: VelocityGrid) -> tuple[np.ndarray, np.ndarray]:
    """``d mu^a / d U_k`` as arrays ``(6, nx, size)`` per species."""
    nA, nB, u, th = _fields(U)
    v = vg.nodes
    out = []
    for a, (n, m) in enumerate(((nA, sp.m_A), (nB, sp.m_B))):
        mu = _maxwellian_c(n, u, th, m, v)
        c = [v[None, :, d] - u[d][:, None] for d in range(3)]
        c2 = c[0] ** 2 + c[1] ** 2 + c[2] ** 2
        d = np.zeros((NVAR,) + mu.shape, dtype=mu.dtype)
        d[a] = mu / n[:, None]
        for k in range(3):
            d[2 + k] = mu * m * c[k] / th[:, None]
        d[5] = mu * (m * c2 / (2 * th[:, None] ** 2) - 1.5 / th[:, None])
        out.append(d)
    return out[0], out[1]


def complex_step_jacobian(fun, U: np.ndarray, h: float = 1e-30) -> np.ndarray:
    """``J[i, k, x] = d fun_i / d U_k`` at every spatial node."""
    cols = []
    for k in range(U.shape[0]):
        Uc = U.astype(complex)
        Uc[k] = Uc[k] + 1j * h
        cols.append(np.imag(fun(Uc)) / h)
    return np.stack(cols, axis=1)


class ContinuumClosure:
    """Exact moments of bi-Maxwellians (the Euler-Poisson system)."""

    name = "continuum"

    def __init__(self, sp: SpeciesPair):
        self.sp = sp

    def conserved(self, U):
        nA, nB, u, th = _fields(U)
        rho = self.sp.m_A * nA + self.sp.m_B * nB
        return np.stack([nA, nB, rho * u[0], rho * u[1], rho * u[2],
                         0.5 * rho * (u[0] ** 2 + u[1] ** 2 + u[2] ** 2) + 1.5 * (nA + nB) * th])

    def flux(self, U):
        nA, nB, u, th = _fields(U)
        rho = self.sp.m_A * nA + self.sp.m_B * nB
        p = (nA + nB) * th
        e = 0.5 * rho * (u[0] ** 2 + u[1] ** 2 + u[2] ** 2) + 1.5 * p
        return np.stack([nA * u[0], nB * u[0], rho * u[0] ** 2 + p, rho * u[0] * u[1], rho * u[0] * u[2],
                         (e + p) * u[0]])

    def force(self, U):
        """Field source per unit ``phi_x``."""
        nA, nB, u, _ = _fields(U)
        ne = self.sp.e_A * nA + self.sp.e_B * nB
        z = np.zeros_like(ne)
        return np.stack([z, z, ne, z, z, ne * u[0]])

    def dv_mu(self, mu: np.ndarray, U: np.ndarray, m: float, vg: VelocityGrid) -> np.ndarray:
        return -m * (vg.nodes[None, :, 0] - U[2][:, None]) / U[5][:, None] * mu


class DiscreteClosure:
    """Moments by the velocity quadrature of ``vg``."""

    name = "discrete"

    def __init__(self, sp: SpeciesPair, vg: VelocityGrid):
        self.sp, self.vg = sp, vg
        self.Dv = velocity_derivative(vg)
        v = vg.moment_nodes
        one, zero = np.ones(vg.size), np.zeros(vg.size)
        r2 = 0.5 * np.sum(vg.nodes**2, axis=1)
        self.psi = [
            np.stack([one, zero, sp.m_A * v[:, 0], sp.m_A * v[:, 1], sp.m_A * v[:, 2], sp.m_A * r2]),
            np.stack([zero, one, sp.m_B * v[:, 0], sp.m_B * v[:, 1], sp.m_B * v[:, 2], sp.m_B * r2]),
        ]
        self.w = vg.weights

    def moments(self, FA, FB, weight=None):
        w = self.w if weight is None else self.w * weight
        return (FA * w) @ self.psi[0].T + (FB * w) @ self.psi[1].T

    def _transverse(self, out, U, weight):
        # on an axisymmetric grid the transverse momentum is carried analytically
        if self.vg.axisymmetric:
            rho = self.sp.m_A * U[0] + self.sp.m_B * U[1]
            out[3] = rho * U[3] * weight
            out[4] = rho * U[4] * weight
        return out

    def conserved(self, U):
        return self._transverse(self.moments(*maxwellian_pair(U, self.sp, self.vg)).T, U, 1.0)

    def flux(self, U):
        W = self.moments(*maxwellian_pair(U, self.sp, self.vg), self.vg.nodes[:, 0]).T
        return self._transverse(W, U, U[2])

    def force_of(self, FA, FB):
        sp = self.sp
        return -self.moments(sp.e_A / sp.m_A * FA @ self.Dv.T, sp.e_B / sp.m_B * FB @ self.Dv.T).T

    def force(self, U):
        return self.force_of(*maxwellian_pair(U, self.sp, self.vg))

    def dv_mu(self, mu, U, m, vg):
        return mu @ self.Dv.T


def flux_of(F: DistributionPair, sp: SpeciesPair, vg: VelocityGrid) -> np.ndarray:
    """Quadrature ``x_1``-flux of the conserved densities, shape ``(6, nx)``."""
    return DiscreteClosure.moments(_quad(sp, vg), F.F_A, F.F_B, vg.nodes[:, 0]).T


def force_of(F: DistributionPair, closure, sp: SpeciesPair, vg: VelocityGrid) -> np.ndarray:
    """Field source per unit ``phi_x`` carried by ``F`` (micro parts)."""
    if isinstance(closure, DiscreteClosure):
        return closure.force_of(F.F_A, F.F_B)
    w = vg.weights
    ne = sp.e_A * (F.F_A @ w) + sp.e_B * (F.F_B @ w)
    je = sp.e_A * (F.F_A @ (w * vg.nodes[:, 0])) + sp.e_B * (F.F_B @ (w * vg.nodes[:, 0]))
    z = np.zeros_like(ne)
    return np.stack([z, z, ne, z, z, je])


_QUAD_CACHE: dict = {}


def _quad(sp, vg):
    key = (sp, vg)
    if key not in _QUAD_CACHE:
        _QUAD_CACHE[key] = DiscreteClosure(sp, vg)
    return _QUAD_CACHE[key]


def to_conserved_newton(W: np.ndarray, closure, U_guess: np.ndarray, tol: float = 1e-13,
                        max_iter: int = 30) -> np.ndarray:
    """Invert ``W = closure.conserved(U)`` by Newton's method, node by node."""
    U = U_guess.copy()
    for _ in range(max_iter):
        R = W - closure.conserved(U)
        J = complex_step_jacobian(closure.conserved, U)
        dU = np.linalg.solve(np.moveaxis(J, -1, 0), R.T[..., None])[..., 0].T
        U = U + dU
        if np.max(np.abs(dU) / (np.abs(U) + 1.0)) < tol:
            return U
    raise RuntimeError("primitive recovery did not converge")


# ---------------------------------------------------------------------------
# Order-zero background
# ---------------------------------------------------------------------------


@dataclass
class Background:
    """Order-zero fluid solution sampled at uniform spacing ``tau``."""

    closure: object
    grid: SpatialGrid1D
    sp: SpeciesPair
    times: np.ndarray
    U: np.ndarray
    dUdt: np.ndarray
    grad_phi: np.ndarray
    dealias: bool = True

    @property
    def tau(self) -> float:
        return float(self.times[1] - self.times[0])

    def state(self, k: int) -> FluidState:
        U = self.U[k]
        return FluidState(U[0], U[1], U[2:5].T, U[5], grad_phi=self.grad_phi[k])

    def dx(self, f):
        return Spectral(self.grid, self.dealias).dx(f)


def primitive_of(fs: FluidState) -> np.ndarray:
    return np.stack([fs.n_A, fs.n_B, fs.u[:, 0], fs.u[:, 1], fs.u[:, 2], fs.theta])


def background_from_ep(history: EPHistory, cfg: EPConfig) -> Background:
    """Background from a saved Euler-Poisson run (every step must be saved)."""
    solver = EPSolver(cfg)
    U, dU, g = [], [], []
    for fs in history.states:
        dnA, dnB, du, dth = solver.rhs(fs)
        U.append(primitive_of(fs))
        dU.append(np.stack([dnA, dnB, du[:, 0], du[:, 1], du[:, 2], dth]))
        g.append(solver.field(fs)[1])
    dt = np.diff(history.times)
    if not np.allclose(dt, dt[0], rtol=1e-9):
        raise ValueError("background needs uniformly spaced samples")
    return Background(ContinuumClosure(cfg.sp), cfg.grid, cfg.sp, history.times, np.array(U), np.array(dU),
                      np.array(g), dealias=True)


class DiscreteEulerPoisson:
    """Conservative order-zero system closed by a :class:`DiscreteClosure`."""

    def __init__(self, closure: DiscreteClosure, grid: SpatialGrid1D):
        self.closure, self.grid = closure, grid
        self.op = Spectral(grid, dealias=False)
        sp = closure.sp
        self.charges = np.array([sp.e_A, sp.e_B])

    def field(self, W):
        ne = self.charges @ W[:2]
        return self.op.poisson(ne - np.mean(ne))[1]

    def rhs(self, W, U):
        g = self.field(W)
        return -self.op.dx(self.closure.flux(U)) + g * self.closure.force(U), g

    def run(self, U0: np.ndarray, tau: float, t_end: float) -> Background:
        """RK4 with step ``tau``; every step is stored."""
        nsteps = max(1, int(round(t_end / tau)))
        if abs(nsteps * tau - t_end) > 1e-9 * max(t_end, 1.0):
            raise ValueError("t_end must be a multiple of tau")
        W = self.closure.conserved(U0)
        U = U0.copy()
        times, Us, dUs, gs = [], [], [], []

        def record(t, W, U):
            dW, g = self.rhs(W, U)
            M = complex_step_jacobian(self.closure.conserved, U)
            dU = np.linalg.solve(np.moveaxis(M, -1, 0), dW.T[..., None])[..., 0].T
            times.append(t)
            Us.append(U.copy())
            dUs.append(dU)
            gs.append(g)

        record(0.0, W, U)
        for n in range(nsteps):
            k1, _ = self.rhs(W, U)
            U2 = to_conserved_newton(W + tau / 2 * k1, self.closure, U)
            k2, _ = self.rhs(W + tau / 2 * k1, U2)
            U3 = to_conserved_newton(W + tau / 2 * k2, self.closure, U2)
            k3, _ = self.rhs(W + tau / 2 * k2, U3)
            U4 = to_conserved_newton(W + tau * k3, self.closure, U3)
            k4, _ = self.rhs(W + tau * k3, U4)
            W = W + tau / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            U = to_conserved_newton(W, self.closure, U4)
            if np.any(U[[0, 1, 5]] <= 0):
                raise DomainError(f"discrete fluid state lost positivity at t = {(n + 1) * tau:.4g}")
            record((n + 1) * tau, W, U)
        return Background(self.closure, self.grid, self.closure.sp, np.array(times), np.array(Us),
                          np.array(dUs), np.array(gs), dealias=False)


# ---------------------------------------------------------------------------
# Kinetic pieces
# ---------------------------------------------------------------------------


def order_zero(fs: FluidState, sp: SpeciesPair, vg: VelocityGrid) -> DistributionPair:
    """``F_0``: the local bi-Maxwellian of the fluid state."""
    return bi_maxwellian(fs, sp, vg)


def burnett(fs: FluidState, sp: SpeciesPair, vg: VelocityGrid) -> tuple[np.ndarray, np.ndarray]:
    """Burnett functions ``A[a, i, j]`` and ``B[a, i]`` on the stored nodes.

    Arrays have shapes ``(2, 3, 3, ..., size)`` and ``(2, 3, ..., size)`` with
    the fluid state's spatial shape in the ellipsis.
    """
    fs.check_positive()
    mu = bi_maxwellian(fs, sp, vg)
    th = fs.theta[..., None]
    c = vg.nodes - fs.u[..., None, :]
    c2 = np.sum(c**2, axis=-1)
    A, B = [], []
    for m, F in ((sp.m_A, mu.F_A), (sp.m_B, mu.F_B)):
        s = np.sqrt(F)
        A.append([[(m * c[..., i] * c[..., j] / th - (i == j) * m * c2 / (3 * th)) * s for j in range(3)]
                  for i in range(3)])
        B.append([0.5 * c[..., i] * np.sqrt(m / th) * (m * c2 / th - 5.0) * s for i in range(3)])
    return np.array(A), np.array(B)


def solvability_residual(rbar: np.ndarray, basis: np.ndarray, vg: VelocityGrid) -> np.ndarray:
    """``<rbar, X_j>`` per spatial node, reduced to the max-modulus value over space.

    ``basis`` is a single ``(nb, 2K)`` array or one per node ``(nx, nb, 2K)``.
    """
    rbar = np.atleast_2d(rbar)
    D = stacked_weights(vg)
    if basis.ndim == 2:
        res = (rbar * D) @ basis.T
    else:
        res = np.einsum("xk,xjk->xj", rbar * D, basis)
    idx = np.argmax(np.abs(res), axis=0)
    return res[idx, np.arange(res.shape[1])]


@dataclass
class MicroSample:
    micro: DistributionPair
    projection_defect: np.ndarray
    reprojection: np.ndarray
    basis: np.ndarray


def rbar_zero(bg: Background, k: int, vg: VelocityGrid) -> tuple[np.ndarray, np.ndarray]:
    """``-(d_t + v_1 d_x + (e/m) phi_x d_v1) F_0 / sqrt(mu)`` at background sample ``k``.

    Returns ``(rbar, sqrt_mu)`` stacked over species, shape ``(nx, 2K)``.
    """
    sp = bg.sp
    U, dUdt = bg.U[k], bg.dUdt[k]
    dUdx = bg.dx(U)
    dA, dB = maxwellian_derivatives(U, sp, vg)
    muA, muB = maxwellian_pair(U, sp, vg)
    v1 = vg.nodes[:, 0]
    g = bg.grad_phi[k][:, None]
    parts = []
    for a, (d, mu, m, e) in enumerate(((dA, muA, sp.m_A, sp.e_A), (dB, muB, sp.m_B, sp.e_B))):
        T = np.einsum("kxv,kx->xv", d, dUdt) + v1 * np.einsum("kxv,kx->xv", d, dUdx)
        T = T + e / m * g * bg.closure.dv_mu(mu, U, m, vg)
        parts.append(T)
    sq = np.sqrt(np.concatenate([muA, muB], axis=1))
    return -np.concatenate(parts, axis=1) / sq, sq


def micro_from_rbar(bg: Background, k: int, rbar: np.ndarray, kernel: CollisionKernel, vg: VelocityGrid,
                    ag: AngularGrid | None = None) -> MicroSample:
    """``sqrt(mu) L^{-1} (I - P) rbar`` node by node at background sample ``k``."""
    sp = bg.sp
    nx = rbar.shape[0]
    K = vg.size
    micro = np.zeros((nx, 2 * K))
    defect = np.zeros(nx)
    reproj = np.zeros(nx)
    bases = []
    U = bg.U[k]
    if vg.axisymmetric and np.max(np.abs(U[3:5])) > 0:
        raise DomainError("an axisymmetric velocity grid needs u_2 = u_3 = 0")
    for x in range(nx):
        fs = FluidState(U[0, x], U[1, x], U[2:5, x], U[5, x])
        lin: LinearizedOperator = linearize(fs, kernel, sp, vg, ag)
        mac, mic = lin.project(rbar[x])
        D = lin.D
        norm = np.sqrt(np.sum(D * rbar[x] ** 2))
        defect[x] = np.sqrt(np.sum(D * mac**2)) / max(norm, 1e-300)
        g = solve_L_inverse(lin, mic)
        pg, _ = lin.project(g)
        reproj[x] = np.sqrt(np.sum(D * pg**2)) / max(np.sqrt(np.sum(D * g**2)), 1e-300)
        sq = np.sqrt(np.concatenate(maxwellian_pair(U[:, x:x + 1], sp, vg), axis=1)[0])
        micro[x] = sq * g
        bases.append(lin.basis)
    return MicroSample(DistributionPair(micro[:, :K], micro[:, K:]), defect, reproj, np.array(bases))


# ---------------------------------------------------------------------------
# Order-l fluid system
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpansionConfig:
    k_terms: int = 1
    epsilon: float = 0.1

    def __post_init__(self) -> None:
        if not self.epsilon >= 0 or self.k_terms < 0:
            raise DomainError("need epsilon >= 0 and k_terms >= 0")


@dataclass
class ExpansionTerm:
    """Order-``l`` correction sampled at output times."""

    order: int
    times: np.ndarray
    U0: np.ndarray
    Z: np.ndarray
    grad_phi: np.ndarray
    phi: np.ndarray
    micro: DistributionPair
    step_times: np.ndarray
    W_steps: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_A(self):
        return self.Z[:, 0]

    @property
    def n_B(self):
        return self.Z[:, 1]

    @property
    def u(self):
        return self.Z[:, 2:5]

    @property
    def theta(self):
        """Temperature coefficient in the ``theta_l = 3 dtheta_l`` convention."""
        return 3.0 * self.Z[:, 5]

    def pressures(self) -> tuple[np.ndarray, np.ndarray]:
        """``p_l^a = theta n_l^a + n^a dtheta_l``."""
        th = self.U0[:, 5]
        return th * self.Z[:, 0] + self.U0[:, 0] * self.Z[:, 5], th * self.Z[:, 1] + self.U0[:, 1] * self.Z[:, 5]

    def distribution(self, k: int, sp: SpeciesPair, vg: VelocityGrid) -> DistributionPair:
        """Full ``F_l`` (macro plus micro) at output sample ``k``."""
        dA, dB = maxwellian_derivatives(self.U0[k], sp, vg)
        Z = self.Z[k]
        macro = DistributionPair(np.einsum("kxv,kx->xv", dA, Z), np.einsum("kxv,kx->xv", dB, Z))
        return macro + DistributionPair(self.micro.F_A[k], self.micro.F_B[k])


def order_l_matrices(U: np.ndarray, sp: SpeciesPair) -> tuple[np.ndarray, np.ndarray]:
    """Symmetriser ``B_0`` and ``B_1`` of the order-``l`` system at one point.

    Unknowns are ``(p_l^A, p_l^B, u_l, theta_l)``; the momentum block uses
    ``rho theta``.
    """
    nA, nB, u1, th = U[0], U[1], U[2], U[5]
    rho = sp.m_A * nA + sp.m_B * nB
    nt = nA + nB
    p = rho * th
    B0 = np.zeros((6, 6))
    B0[0, 0] = 9.0 / (5.0 * nA)
    B0[1, 1] = 9.0 / (5.0 * nB)
    B0[2, 2] = B0[3, 3] = B0[4, 4] = p
    B0[5, 5] = 5.0 / 6.0 * nt
    B0[0, 5] = B0[5, 0] = B0[1, 5] = B0[5, 1] = -1.0
    B1 = u1 * B0
    B1[0, 2] = B1[2, 0] = B1[1, 2] = B1[2, 1] = th
    return B0, B1


def pressure_map(U0: np.ndarray) -> np.ndarray:
    """``T`` with ``Z = T (p_l^A, p_l^B, u_l, theta_l)``, shape ``(6, 6, nx)``."""
    nA, nB, th = U0[0], U0[1], U0[5]
    T = np.zeros((6, 6) + nA.shape)
    T[0, 0] = 1.0 / th
    T[1, 1] = 1.0 / th
    T[0, 5] = -nA / (3.0 * th)
    T[1, 5] = -nB / (3.0 * th)
    for d in range(2, 5):
        T[d, d] = 1.0
    T[5, 5] = 1.0 / 3.0
    return T


def _bmm(A, B):
    return np.einsum("ijx,jkx->ikx", A, B)


def _bmv(A, v):
    return np.einsum("ijx,jx->ix", A, v)


def _binv(A):
    return np.moveaxis(np.linalg.inv(np.moveaxis(A, -1, 0)), 0, -1)


class _TimeSeries:
    """Quintic spline in time through output samples (exact at the samples).

    The quintic keeps the jumps at knots in the fifth derivative, below
    what the sixth-order residual stencils resolve.
    """

    def __init__(self, times, values):
        self.times = np.asarray(times)
        self.values = np.asarray(values)
        n = len(self.times)
        deg = min(5, n - 1)
        self.spline = make_interp_spline(self.times, self.values, k=max(deg, 1), axis=0) if n > 1 else None

    def __call__(self, t):
        k = np.flatnonzero(np.isclose(self.times, t, rtol=0, atol=1e-12))
        if k.size:
            return self.values[k[0]]
        return self.spline(t)


def solve_order_l(l: int, bg: Background, previous: list[ExpansionTerm], kernel: CollisionKernel,
                  vg: VelocityGrid, ag: AngularGrid | None = None, output_every: int = 1,
                  method: str = "conservative", Z0: np.ndarray | None = None) -> ExpansionTerm:
    """Integrate the order-``l`` fluid system and attach the micro part of ``F_l``.

    The time step is ``2 * bg.tau`` so that RK4 stages land on background
    samples.  ``previous`` holds terms ``1 .. l-1`` (empty for ``l = 1``).
    The micro part comes from ``L^{-1}`` of the order ``l - 1`` source at
    output times and enters the fluxes through a cubic spline in time.
    """
    if l < 1:
        raise ValueError("order must be at least 1")
    if len(previous) != l - 1:
        raise ValueError(f"order {l} needs {l - 1} previous terms")
    sp, closure = bg.sp, bg.closure
    nsamp = len(bg.times)
    if (nsamp - 1) % (2 * output_every) != 0:
        raise ValueError("background length must be a multiple of 2 * output_every steps")
    out_idx = np.arange(0, nsamp, 2 * output_every)
    t_out = bg.times[out_idx]

    # micro part of F_l and its flux / field contributions at output samples
    micros, defects, reproj = [], [], []
    for k in out_idx:
        if l == 1:
            rbar, _ = rbar_zero(bg, k, vg)
        else:
            rbar = rbar_order(l - 1, bg, previous, int(np.flatnonzero(out_idx == k)[0]), kernel, vg, ag)
        ms = micro_from_rbar(bg, k, rbar, kernel, vg, ag)
        micros.append(ms.micro)
        defects.append(ms.projection_defect)
        reproj.append(ms.reprojection)
    mflux = _TimeSeries(t_out, [flux_of(m, sp, vg) for m in micros])
    mforce = _TimeSeries(t_out, [force_of(m, closure, sp, vg) for m in micros])
    lower = []
    for i in range(1, l):
        j = l - i
        if j >= 1:
            lower.append((_TimeSeries(previous[i - 1].times, previous[i - 1].grad_phi),
                          _TimeSeries(previous[j - 1].times, _term_force(previous[j - 1], closure, sp, vg))))

    charges = np.array([sp.e_A, sp.e_B])
    op = Spectral(bg.grid, bg.dealias)

    def field_l(Z):
        ne = charges @ Z[:2]
        return op.poisson(ne - np.mean(ne))

    def source(k, t, Z):
        U0 = bg.U[k]
        g0 = bg.grad_phi[k]
        _, g1 = field_l(Z)
        FU = complex_step_jacobian(closure.force, U0)
        s = g0 * _bmv(FU, Z) + g1 * closure.force(U0) + g0 * mforce(t)
        for gi, fj in lower:
            s = s + gi(t) * fj(t)
        return s

    def rhs_cons(k, t, W):
        U0 = bg.U[k]
        M = complex_step_jacobian(closure.conserved, U0)
        N = complex_step_jacobian(closure.flux, U0)
        Z = _bmv(_binv(M), W)
        return -op.dx(_bmv(N, Z) + mflux(t)) + source(k, t, Z)

    Z_init = np.zeros_like(bg.U[0]) if Z0 is None else Z0
    tau2 = 2 * bg.tau
    step_times, W_steps = [bg.times[0]], []
    if method == "conservative":
        W = _bmv(complex_step_jacobian(closure.conserved, bg.U[0]), Z_init)
        W_steps.append(W)
        for s in range(0, nsamp - 1, 2):
            t = bg.times[s]
            k1 = rhs_cons(s, t, W)
            k2 = rhs_cons(s + 1, t + tau2 / 2, W + tau2 / 2 * k1)
            k3 = rhs_cons(s + 1, t + tau2 / 2, W + tau2 / 2 * k2)
            k4 = rhs_cons(s + 2, t + tau2, W + tau2 * k3)
            W = W + tau2 / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            W_steps.append(W)
            step_times.append(bg.times[s + 2])
        W_steps = np.array(W_steps)
        Zs = np.array([_bmv(_binv(complex_step_jacobian(closure.conserved, bg.U[s])), W_steps[i])
                       for i, s in enumerate(range(0, nsamp, 2))])
    elif method == "symmetric":
        Zs, W_steps, diag = _integrate_symmetric(bg, Z_init, mflux, source, op)
        step_times = list(bg.times[::2])
    else:
        raise ValueError(f"unknown method {method!r}")

    Z_out = Zs[out_idx // 2]
    phis, grads = zip(*(field_l(Z) for Z in Z_out))
    micro = DistributionPair(np.array([m.F_A for m in micros]), np.array([m.F_B for m in micros]))
    diagnostics = {"projection_defect": np.array(defects), "reprojection": np.array(reproj)}
    if method == "symmetric":
        diagnostics.update(diag)
    return ExpansionTerm(l, t_out, bg.U[out_idx], Z_out, np.array(grads), np.array(phis), micro,
                         np.array(step_times), np.asarray(W_steps), diagnostics)


def _term_force(term: ExpansionTerm, closure, sp, vg) -> np.ndarray:
    out = []
    for k in range(len(term.times)):
        out.append(force_of(term.distribution(k, sp, vg), closure, sp, vg))
    return np.array(out)


def _integrate_symmetric(bg: Background, Z_init, mflux, source, op):
    """RK4 on ``U_l = (p_l^A, p_l^B, u_l, theta_l)`` in non-conservative form.

    ``dU/dt = -A_1 U_x - C U + g`` with ``A_1 = M^-1 N``,
    ``C = M^-1 (M_t + N_x - S)`` and ``M = dW/dU T``, ``N = dFlux/dU T``.
    """
    closure, sp = bg.closure, bg.sp
    nsamp = len(bg.times)
    h = 1e-5

    def mats(k):
        U0, dt0 = bg.U[k], bg.dUdt[k]
        dx0 = bg.dx(U0)

        def MN(U):
            T = pressure_map(U)
            return (_bmm(complex_step_jacobian(closure.conserved, U), T),
                    _bmm(complex_step_jacobian(closure.flux, U), T))

        M, N = MN(U0)
        Mp, _ = MN(U0 + h * dt0)
        Mm, _ = MN(U0 - h * dt0)
        _, Np = MN(U0 + h * dx0)
        _, Nm = MN(U0 - h * dx0)
        Mt = (Mp - Mm) / (2 * h)
        Nx = (Np - Nm) / (2 * h)
        T = pressure_map(U0)
        S = _bmm(complex_step_jacobian(closure.force, U0), T) * bg.grad_phi[k]
        Minv = _binv(M)
        return T, Minv, _bmm(Minv, N), _bmm(Minv, Mt + Nx - S)

    cache = {}

    def rhs(k, t, Ul):
        if k not in cache:
            cache[k] = mats(k)
        T, Minv, A1, C = cache[k]
        Z = _bmv(T, Ul)
        s = source(k, t, Z) - bg.grad_phi[k] * _bmv(complex_step_jacobian(closure.force, bg.U[k]), Z)
        g = _bmv(Minv, -op.dx(mflux(t)) + s)
        return -_bmv(A1, op.dx(Ul)) - _bmv(C, Ul) + g

    Ul = _bmv(_binv(pressure_map(bg.U[0])), Z_init)
    Zs = [_bmv(pressure_map(bg.U[0]), Ul)]
    min_eig = np.inf
    sym_defect = 0.0
    tau2 = 2 * bg.tau
    for s in range(0, nsamp - 1, 2):
        t = bg.times[s]
        k1 = rhs(s, t, Ul)
        k2 = rhs(s + 1, t + tau2 / 2, Ul + tau2 / 2 * k1)
        k3 = rhs(s + 1, t + tau2 / 2, Ul + tau2 / 2 * k2)
        k4 = rhs(s + 2, t + tau2, Ul + tau2 * k3)
        Ul = Ul + tau2 / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        Zs.append(_bmv(pressure_map(bg.U[s + 2]), Ul))
        for x in range(bg.U.shape[2]):
            B0, B1 = order_l_matrices(bg.U[s + 2][:, x], sp)
            min_eig = min(min_eig, float(np.linalg.eigvalsh(B0)[0]))
            A1 = cache[s + 2][2][:, :, x] if (s + 2) in cache else None
            if A1 is not None:
                sym_defect = max(sym_defect, float(np.max(np.abs(B0 @ A1 - B1))) / float(np.max(np.abs(B1)) + 1.0))
        for key in [kk for kk in cache if kk < s]:
            del cache[key]
    if not min_eig > 0:
        raise DomainError("B_0 lost positive definiteness along the run")
    Zs = np.array(Zs)
    W = np.array([_bmv(complex_step_jacobian(closure.conserved, bg.U[s]), Zs[i])
                  for i, s in enumerate(range(0, nsamp, 2))])
    return Zs, W, {"B0_min_eig": min_eig, "B0A1_minus_B1": sym_defect}


def rbar_order(l: int, bg: Background, terms: list[ExpansionTerm], k_out: int, kernel: CollisionKernel,
               vg: VelocityGrid, ag: AngularGrid | None = None, h: float = 1e-3) -> np.ndarray:
    """Source ``rbar_l`` (``l >= 1``) at output sample ``k_out`` of the stored terms.

    Time derivatives of ``F_l`` use second-order differences across output
    samples; the collision products ``Q(F_i, F_j)`` with ``i + j = l + 1``
    come from symmetric second differences of the discrete operator at ``F_0``.
    """
    from .collision import vector_collision

    sp = bg.sp
    term = terms[l - 1]
    times = term.times
    k_bg = int(np.argmin(np.abs(bg.times - times[k_out])))
    U0 = bg.U[k_bg]
    F = [term.distribution(k, sp, vg) for k in range(len(times))]
    dFdt = DistributionPair(*np.gradient(np.array([[f.F_A, f.F_B] for f in F]), times, axis=0)[k_out])
    Fl = F[k_out]
    op = Spectral(bg.grid, bg.dealias)
    v1 = vg.nodes[:, 0]
    g0 = bg.grad_phi[k_bg][:, None]
    muA, muB = maxwellian_pair(U0, sp, vg)
    closure = bg.closure

    def dv(Fa, m, which):
        return closure.dv_mu(Fa, U0, m, vg) if isinstance(closure, DiscreteClosure) else np.gradient(Fa, axis=-1) * 0

    def force_term(Fpair, gphi):
        out = []
        for Fa, m, e, mu in ((Fpair.F_A, sp.m_A, sp.e_A, muA), (Fpair.F_B, sp.m_B, sp.e_B, muB)):
            out.append(e / m * gphi * _dv_general(Fa, closure, vg))
        return out

    T = [dFdt.F_A + v1 * op.dx(Fl.F_A.T).T, dFdt.F_B + v1 * op.dx(Fl.F_B.T).T]
    fA, fB = force_term(Fl, g0)
    T[0] = T[0] + fA
    T[1] = T[1] + fB
    gl = terms[l - 1].grad_phi[k_out][:, None]
    F0 = DistributionPair(muA, muB)
    fA, fB = force_term(F0, gl)
    T[0] = T[0] + fA
    T[1] = T[1] + fB
    for i in range(1, l):
        j = l - i
        gi = terms[i - 1].grad_phi[k_out][:, None]
        fA, fB = force_term(terms[j - 1].distribution(k_out, sp, vg), gi)
        T[0] = T[0] + fA
        T[1] = T[1] + fB
    coll = [np.zeros_like(T[0]), np.zeros_like(T[1])]
    for i in range(1, l + 1):
        j = l + 1 - i
        if j < 1 or j > l:
            continue
        Fi = terms[i - 1].distribution(k_out, sp, vg)
        Fj = terms[j - 1].distribution(k_out, sp, vg)
        plus = vector_collision(F0 + (Fi + Fj).scaled(h), kernel, sp, vg, ag)
        minus = vector_collision(F0 + (Fi - Fj).scaled(h), kernel, sp, vg, ag)
        plus2 = vector_collision(F0 - (Fi - Fj).scaled(h), kernel, sp, vg, ag)
        minus2 = vector_collision(F0 - (Fi + Fj).scaled(h), kernel, sp, vg, ag)
        # polarisation: Q(Fi, Fj) + Q(Fj, Fi) from second differences
        cross = (plus - minus - plus2 + minus2).scaled(1.0 / (8 * h * h))
        coll[0] += cross.F_A
        coll[1] += cross.F_B
    sq = np.sqrt(np.concatenate([muA, muB], axis=1))
    return (np.concatenate([coll[0] - T[0], coll[1] - T[1]], axis=1)) / sq


def _dv_general(F: np.ndarray, closure, vg: VelocityGrid) -> np.ndarray:
    if isinstance(closure, DiscreteClosure):
        return F @ closure.Dv.T
    return F @ velocity_derivative(vg).T


# ---------------------------------------------------------------------------
# Residuals and assembly
# ---------------------------------------------------------------------------


def conservative_residual(term: ExpansionTerm, bg: Background, vg: VelocityGrid,
                          fd_order: int = 6) -> np.ndarray:
    """``d_t W_l + d_x Flux_l - S_l`` at interior output samples, shape ``(nt, 6, nx)``.

    The time derivative uses centred differences of the stored step
    trajectory; spatial derivatives and sources are evaluated as the solver
    does.  Samples too close to the ends for the stencil are NaN.
    """
    sp, closure = bg.sp, bg.closure
    op = Spectral(bg.grid, bg.dealias)
    W = term.W_steps
    ts = term.step_times
    dt = ts[1] - ts[0]
    half = fd_order // 2
    coeffs = _central_coefficients(half)
    charges = np.array([sp.e_A, sp.e_B])
    out = np.full((len(term.times), NVAR, bg.U.shape[2]), np.nan)
    for i, t in enumerate(term.times):
        s = int(round((t - ts[0]) / dt))
        if s - half < 0 or s + half >= len(ts):
            continue
        dW = sum(c * W[s + o] for o, c in coeffs.items()) / dt
        k = 2 * s
        U0 = bg.U[k]
        Z = term.Z[i]
        M = complex_step_jacobian(closure.conserved, U0)
        N = complex_step_jacobian(closure.flux, U0)
        micro = DistributionPair(term.micro.F_A[i], term.micro.F_B[i])
        flux = _bmv(N, Z) + flux_of(micro, sp, vg)
        ne = charges @ Z[:2]
        _, g1 = op.poisson(ne - np.mean(ne))
        FU = complex_step_jacobian(closure.force, U0)
        S = bg.grad_phi[k] * (_bmv(FU, Z) + force_of(micro, closure, sp, vg)) + g1 * closure.force(U0)
        out[i] = dW + op.dx(flux) - S
        del M
    return out


def _central_coefficients(half: int) -> dict[int, float]:
    offs = np.arange(-half, half + 1)
    A = np.vander(offs, increasing=True).T.astype(float)
    b = np.zeros(len(offs))
    b[1] = 1.0
    c = np.linalg.solve(A, b)
    return {int(o): float(v) for o, v in zip(offs, c)}


def kernel_residuals(res_cons: np.ndarray, U0: np.ndarray, sp: SpeciesPair) -> np.ndarray:
    """Map conservative-form residuals to components along ``X_0 .. X_5``.

    ``res_cons`` has shape ``(6, nx)`` for moments against
    ``(e_1, e_2, m v, m |v|^2 / 2)``; the kernel functions are combinations
    of these with coefficients set by the background state.
    """
    nA, nB, u, th = _fields(U0)
    rho, nt = sp.m_A * nA + sp.m_B * nB, nA + nB
    r = res_cons
    out = np.zeros_like(r)
    out[0] = r[0] / np.sqrt(nA)
    out[1] = r[1] / np.sqrt(nB)
    mass = sp.m_A * r[0] + sp.m_B * r[1]
    for d in range(3):
        out[2 + d] = (r[2 + d] - u[d] * mass) / np.sqrt(th * rho)
    # m |v - u|^2 / theta - 3 = (2 E - 2 u . P + |u|^2 M) / theta - 3 N
    u2 = u[0] ** 2 + u[1] ** 2 + u[2] ** 2
    udotp = u[0] * r[2] + u[1] * r[3] + u[2] * r[4]
    out[5] = ((2 * r[5] - 2 * udotp + u2 * mass) / th - 3 * (r[0] + r[1])) / np.sqrt(6 * nt)
    return out


def assemble_truncated(F0: DistributionPair, terms: list[DistributionPair], cfg: ExpansionConfig,
                       grad_phi0: np.ndarray | None = None,
                       grad_phis: list[np.ndarray] | None = None) -> tuple[DistributionPair, np.ndarray | None]:
    """``F_0 + sum_{i=1}^{k} eps^i F_i`` and the matching field gradient."""
    out = DistributionPair(F0.F_A.copy(), F0.F_B.copy())
    g = None if grad_phi0 is None else np.array(grad_phi0, dtype=float)
    for i in range(1, cfg.k_terms + 1):
        if i > len(terms):
            raise ValueError(f"k_terms = {cfg.k_terms} but only {len(terms)} terms supplied")
        out = out + terms[i - 1].scaled(cfg.epsilon**i)
        if g is not None and grad_phis is not None:
            g = g + cfg.epsilon**i * grad_phis[i - 1]
    return out, g


def perturbed_primitive(grid: SpatialGrid1D, amplitude: float) -> np.ndarray:
    """Smooth single-mode fluid data with ``u_2 = u_3 = 0``."""
    x = grid.x
    k = 2.0 * np.pi / grid.L_x
    a = amplitude
    z = np.zeros_like(x)
    return np.stack([1 + a * np.cos(k * x), 0.8 + 0.5 * a * np.sin(k * x), a * np.sin(k * x), z, z,
                     1 + a * np.cos(k * x)])


def sweep_reference(cfg, amplitude: float, U0: np.ndarray | None = None
                    ) -> tuple[list[DistributionPair], list[DistributionPair]]:
    """``F_0`` and ``F_1`` at the output times of a kinetic run configuration.

    ``cfg`` needs ``vg``, ``grid``, ``sp``, ``kernel``, ``ag``, ``t_end``
    and ``output_dt``.  The fluid part uses the discrete closure of ``cfg.vg``
    so that the expansion matches the semi-discrete kinetic system.
    """
    U0 = perturbed_primitive(cfg.grid, amplitude) if U0 is None else U0
    tau = cfg.output_dt / 4.0
    bg = DiscreteEulerPoisson(DiscreteClosure(cfg.sp, cfg.vg), cfg.grid).run(U0, tau, cfg.t_end)
    term = solve_order_l(1, bg, [], cfg.kernel, cfg.vg, cfg.ag, output_every=2)
    idx = np.arange(0, len(bg.times), 4)
    F0 = [DistributionPair(*maxwellian_pair(bg.U[i], cfg.sp, cfg.vg)) for i in idx]
    F1 = [term.distribution(j, cfg.sp, cfg.vg) for j in range(len(idx))]
    return F0, F1
