"""Two-species Boltzmann collision operator and its linearisation.

Two discretisations are provided.

``form="entropic"`` (the default everywhere) is a conservative weak form.
For every triple ``(v_i, v_j, omega)`` the gain product is
``exp(I log F^a (v') + I log F^b (v_*'))`` and test functions are
interpolated with the same seven-point quadratic star ``I``.  Because ``I``
reproduces ``1, v, |v|^2`` exactly, mass, momentum and energy are conserved
to round-off, any shared-``(u, theta)`` bi-Maxwellian is an exact discrete
equilibrium and the discrete entropy production is nonpositive term by term.

``form="strong"`` is the literal pointwise formula with trilinear
interpolation of ``F`` at the post-collision velocities.  It is bilinear in
``(F^a, F^b)`` and converges under refinement, but conserves only up to
interpolation error; it serves as the calibration reference for
``collision_invariant_residual``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
from scipy.special import gamma as gamma_fn
from scipy.special import hyp1f1

from . import _kernels
from .kinetic_core import (
    DistributionPair,
    DomainError,
    FluidState,
    SpeciesPair,
    VelocityGrid,
    bi_maxwellian,
)


class SolvabilityError(ValueError):
    """Right-hand side is not orthogonal to the kernel of ``L``."""

    def __init__(self, residuals: np.ndarray, tol: float):
        self.residuals = np.asarray(residuals)
        super().__init__(
            f"right-hand side has kernel components {np.array2string(self.residuals, precision=3)} "
            f"(tolerance {tol:.1e})"
        )


@dataclass(frozen=True)
class CollisionKernel:
    """``B^{ab} = C_phi[a, b] |v - v_*|^gamma b(cos theta)``.

    The angular factor is ``b(c) = C_b |c|^b_power``; ``b_power >= 1`` keeps
    it under the cutoff bound ``C_b |c|``.
    """

    gamma: float = 1.0
    C_phi: tuple[tuple[float, float], tuple[float, float]] = ((1.0, 1.0), (1.0, 1.0))
    C_b: float = 1.0
    b_power: float = 1.0

    def __post_init__(self) -> None:
        if not -3.0 < self.gamma <= 1.0:
            raise DomainError(f"gamma = {self.gamma} outside (-3, 1]")
        c = np.asarray(self.C_phi, dtype=float)
        if c.shape != (2, 2) or not np.all(c > 0) or c[0, 1] != c[1, 0]:
            raise DomainError("C_phi must be a symmetric positive 2x2 table")
        if not self.C_b > 0 or self.b_power < 1.0:
            raise DomainError("need C_b > 0 and b_power >= 1")

    @property
    def table(self) -> np.ndarray:
        return np.asarray(self.C_phi, dtype=float)

    def b(self, cos_theta) -> np.ndarray:
        return self.C_b * np.abs(cos_theta) ** self.b_power

    def angular_integral(self) -> float:
        """Exact ``int_{S^2} b dω``."""
        return 4.0 * np.pi * self.C_b / (self.b_power + 1.0)


@dataclass(frozen=True)
class AngularGrid:
    """Degree-7 Lebedev rule on the unit sphere (26 nodes)."""

    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def lebedev26(cls) -> AngularGrid:
        pts, wts = [], []
        for axis in range(3):
            for s in (1.0, -1.0):
                e = np.zeros(3)
                e[axis] = s
                pts.append(e)
                wts.append(1.0 / 21.0)
        r = 1.0 / np.sqrt(2.0)
        for a, b in ((0, 1), (0, 2), (1, 2)):
            for sa in (1.0, -1.0):
                for sb in (1.0, -1.0):
                    e = np.zeros(3)
                    e[a], e[b] = sa * r, sb * r
                    pts.append(e)
                    wts.append(4.0 / 105.0)
        r = 1.0 / np.sqrt(3.0)
        for sx in (1.0, -1.0):
            for sy in (1.0, -1.0):
                for sz in (1.0, -1.0):
                    pts.append(r * np.array([sx, sy, sz]))
                    wts.append(9.0 / 280.0)
        return cls(np.array(pts), 4.0 * np.pi * np.array(wts))

    @property
    def count(self) -> int:
        return len(self.weights)

    @cached_property
    def half(self) -> tuple[np.ndarray, np.ndarray]:
        """One node per antipodal pair, with its (unmerged) weight."""
        keep = []
        for k, p in enumerate(self.nodes):
            nz = p[np.flatnonzero(np.abs(p) > 1e-12)[0]]
            if nz > 0:
                keep.append(k)
        keep = np.array(keep)
        return np.ascontiguousarray(self.nodes[keep]), np.ascontiguousarray(self.weights[keep])


def post_collision(v, v_star, omega, m_alpha: float, m_beta: float):
    """Elastic post-collision velocities for masses ``(m_alpha, m_beta)``."""
    v = np.asarray(v, dtype=float)
    v_star = np.asarray(v_star, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if np.any(np.abs(np.linalg.norm(omega, axis=-1) - 1.0) > 1e-12):
        raise DomainError("omega must be a unit vector")
    a = np.sum((v - v_star) * omega, axis=-1, keepdims=True)
    M = m_alpha + m_beta
    return v - 2.0 * m_beta / M * a * omega, v_star + 2.0 * m_alpha / M * a * omega


def _default_ag(ag: AngularGrid | None) -> AngularGrid:
    return AngularGrid.lebedev26() if ag is None else ag


def _table(kernel: CollisionKernel, sp: SpeciesPair) -> np.ndarray:
    return kernel.table * sp.cross_section()


INTERP_ORDER = {"trilinear": 2, "triquadratic": 3}


def q_bilinear(F_alpha, F_beta, kernel: CollisionKernel, alpha: int, beta: int,
               vg: VelocityGrid, sp: SpeciesPair | None = None, ag: AngularGrid | None = None,
               interp: str = "trilinear") -> np.ndarray:
    """Strong-form ``Q^{ab}(F^a, F^b)`` on the stored nodes of ``vg``.

    ``alpha``/``beta`` are species indices (0 for A, 1 for B).  Leading axes
    of the inputs are looped over.  ``interp`` picks the tensor Lagrange
    interpolation used for the gain term.
    """
    sp = SpeciesPair() if sp is None else sp
    ag = _default_ag(ag)
    Fa = np.asarray(F_alpha, dtype=float)
    Fb = np.asarray(F_beta, dtype=float)
    if Fa.shape != Fb.shape or Fa.shape[-1] != vg.size:
        raise ValueError("distribution arrays do not match the velocity grid")
    dirs, dirw = ag.half
    c = _table(kernel, sp)[alpha, beta]
    m = sp.masses
    lead = Fa.shape[:-1]
    Fa2 = vg.expand(Fa).reshape(-1, vg.points**3)
    Fb2 = vg.expand(Fb).reshape(-1, vg.points**3)
    out = np.empty_like(Fa2)
    for r in range(Fa2.shape[0]):
        _kernels.strong_collision(
            np.ascontiguousarray(Fa2[r]), np.ascontiguousarray(Fb2[r]), m[alpha], m[beta],
            vg.points, vg.L_v, vg.h, c, kernel.gamma, kernel.b_power, dirs, dirw, INTERP_ORDER[interp], out[r],
        )
    return vg.restrict(out).reshape(lead + (vg.size,))


def _entropic(dp: DistributionPair, kernel: CollisionKernel, sp: SpeciesPair, vg: VelocityGrid,
              ag: AngularGrid, floor: float) -> DistributionPair:
    dirs, dirw = ag.half
    lead = dp.F_A.shape[:-1]
    FA = np.ascontiguousarray(dp.F_A.reshape(-1, vg.size).T)
    FB = np.ascontiguousarray(dp.F_B.reshape(-1, vg.size).T)
    outA = np.zeros_like(FA)
    outB = np.zeros_like(FB)
    if vg.axisymmetric:
        first, mult, unordered = vg.rep_full_index, vg.multiplicity, False
    else:
        first, mult, unordered = np.arange(vg.size, dtype=np.int64), np.ones(vg.size), True
    _kernels.weak_collision(
        FA, FB, first, mult, vg.rep_of, vg.points, vg.L_v, vg.h, sp.masses, _table(kernel, sp),
        kernel.gamma, kernel.b_power, dirs, dirw, unordered, floor, outA, outB,
    )
    w = vg.weights[:, None]
    return DistributionPair((outA / w).T.reshape(lead + (vg.size,)), (outB / w).T.reshape(lead + (vg.size,)))


def vector_collision(dp: DistributionPair, kernel: CollisionKernel, sp: SpeciesPair, vg: VelocityGrid,
                     ag: AngularGrid | None = None, form: str = "entropic",
                     floor: float = 1e-300, interp: str = "trilinear") -> DistributionPair:
    """Component ``a`` is ``Q^{aA}(F^a, F^A) + Q^{aB}(F^a, F^B)``.

    The entropic form takes logarithms of ``max(F, floor)``; ``interp``
    only affects the strong form.
    """
    ag = _default_ag(ag)
    if form == "entropic":
        return _entropic(dp, kernel, sp, vg, ag, floor)
    if form == "strong":
        FA, FB = dp.F_A, dp.F_B
        def q(x, y, a, b):
            return q_bilinear(x, y, kernel, a, b, vg, sp, ag, interp)

        QA = q(FA, FA, 0, 0) + q(FA, FB, 0, 1)
        QB = q(FB, FA, 1, 0) + q(FB, FB, 1, 1)
        return DistributionPair(QA, QB)
    raise ValueError(f"unknown collision form {form!r}")


def invariant_table(sp: SpeciesPair, vg: VelocityGrid) -> tuple[np.ndarray, np.ndarray]:
    """The six collision invariants ``e_1, e_2, m v_1, m v_2, m v_3, m |v|^2`` per species."""
    v = vg.moment_nodes
    one, zero = np.ones(vg.size), np.zeros(vg.size)
    r2 = np.sum(vg.nodes**2, axis=1)
    psiA = np.stack([one, zero, sp.m_A * v[:, 0], sp.m_A * v[:, 1], sp.m_A * v[:, 2], sp.m_A * r2])
    psiB = np.stack([zero, one, sp.m_B * v[:, 0], sp.m_B * v[:, 1], sp.m_B * v[:, 2], sp.m_B * r2])
    return psiA, psiB


def collision_invariant_residual(dp: DistributionPair, kernel: CollisionKernel, sp: SpeciesPair,
                                 vg: VelocityGrid, ag: AngularGrid | None = None, form: str = "entropic",
                                 CF: DistributionPair | None = None, interp: str = "trilinear") -> np.ndarray:
    """``<C F, psi_j>`` for the six invariants; leading axes are kept after the first."""
    if CF is None:
        CF = vector_collision(dp, kernel, sp, vg, ag, form, interp=interp)
    psiA, psiB = invariant_table(sp, vg)
    w = vg.weights
    return np.moveaxis((CF.F_A * w) @ psiA.T + (CF.F_B * w) @ psiB.T, -1, 0)


def collision_l1(CF: DistributionPair, vg: VelocityGrid) -> np.ndarray:
    """``||C F||_1`` per leading index, the scale for invariant residuals."""
    w = vg.weights
    return np.abs(CF.F_A) @ w + np.abs(CF.F_B) @ w


def entropy_production(dp: DistributionPair, kernel: CollisionKernel, sp: SpeciesPair, vg: VelocityGrid,
                       ag: AngularGrid | None = None, form: str = "entropic") -> np.ndarray:
    """``<C F, log F>``; nonpositive for the entropic form."""
    if np.any(dp.F_A <= 0) or np.any(dp.F_B <= 0):
        raise DomainError("entropy production needs strictly positive distributions")
    CF = vector_collision(dp, kernel, sp, vg, ag, form)
    w = vg.weights
    return (CF.F_A * np.log(dp.F_A)) @ w + (CF.F_B * np.log(dp.F_B)) @ w


def _radial_mean(v: np.ndarray, u: np.ndarray, theta: float, m: float, gamma: float) -> np.ndarray:
    """``E |v - Z|^gamma`` for ``Z ~ N(u, theta/m I_3)`` (noncentral chi moments)."""
    s = gamma / 2.0
    lam = m * np.sum((v - u) ** 2, axis=-1) / theta
    scale = (theta / m) ** s
    return scale * 2.0**s * gamma_fn(1.5 + s) / gamma_fn(1.5) * hyp1f1(-s, 1.5, -lam / 2.0)


def collision_frequency_exact(v, kernel: CollisionKernel, sp: SpeciesPair, fs: FluidState) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form ``nu^A, nu^B`` at arbitrary velocities for a bi-Maxwellian background."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    tab = _table(kernel, sp)
    n = (float(fs.n_A[0]), float(fs.n_B[0]))
    u, th = fs.u[0], float(fs.theta[0])
    ang = kernel.angular_integral()
    mean = [_radial_mean(v, u, th, m, kernel.gamma) for m in sp.masses]
    nu = [sum(tab[a, b] * ang * n[b] * mean[b] for b in range(2)) for a in range(2)]
    return nu[0], nu[1]


@dataclass
class FrequencyResult:
    nu_A: np.ndarray
    nu_B: np.ndarray
    c_low: float
    c_high: float


def collision_frequency(kernel: CollisionKernel, sp: SpeciesPair, fs: FluidState, vg: VelocityGrid,
                        ag: AngularGrid | None = None, angular: str = "exact") -> FrequencyResult:
    """Loss frequency ``nu^a(v) = sum_b int B^{ab} mu^b_* dω dv_*`` on the stored nodes.

    ``angular="exact"`` integrates ``b`` analytically; ``"grid"`` uses the
    angular rule, which matches the linearised operator.  The velocity
    integral is always the grid quadrature with the coincident node dropped.
    """
    fs.check_positive()
    mu = bi_maxwellian(fs, sp, vg)
    tab = _table(kernel, sp)
    if angular == "exact":
        dirs, dirw, bpow = np.array([[1.0, 0.0, 0.0]]), np.array([kernel.angular_integral() / kernel.C_b]), 0.0
    elif angular == "grid":
        dirs, dirw = _default_ag(ag).half
        dirw, bpow = 2.0 * dirw, kernel.b_power
    else:
        raise ValueError(f"unknown angular mode {angular!r}")
    pts = np.ascontiguousarray(vg.nodes)
    nus = []
    for a in range(2):
        tot = np.zeros(vg.size)
        for b, mub in enumerate((mu.F_A[0], mu.F_B[0])):
            out = np.empty(vg.size)
            _kernels.loss_frequency(np.ascontiguousarray(vg.expand(mub)), pts, vg.points, vg.L_v, vg.h,
                                    tab[a, b] * kernel.C_b, kernel.gamma, bpow, dirs, dirw, out)
            tot += out
        nus.append(tot)
    ratio = np.concatenate(nus) / np.tile(vg.bracket**kernel.gamma, 2)
    return FrequencyResult(nus[0], nus[1], float(ratio.min()), float(ratio.max()))


def kernel_basis(fs: FluidState, sp: SpeciesPair, vg: VelocityGrid) -> np.ndarray:
    """The six kernel functions, stacked ``(6, 2 * size)`` as ``(X^A, X^B)``.

    Normalised to be orthonormal in the continuous inner product: the
    momentum functions use ``rho`` and the energy function uses ``n_tilde``.
    """
    fs.check_positive()
    nA, nB, th = float(fs.n_A[0]), float(fs.n_B[0]), float(fs.theta[0])
    u = fs.u[0]
    rho, nt = sp.m_A * nA + sp.m_B * nB, nA + nB
    mu = bi_maxwellian(FluidState(nA, nB, u, th), sp, vg)
    sA, sB = np.sqrt(mu.F_A[0]), np.sqrt(mu.F_B[0])
    c = vg.nodes - u
    c2 = np.sum(c**2, axis=1)
    z = np.zeros(vg.size)
    X = [np.concatenate([sA / np.sqrt(nA), z]), np.concatenate([z, sB / np.sqrt(nB)])]
    for d in range(3):
        X.append(np.concatenate([sp.m_A * c[:, d] * sA, sp.m_B * c[:, d] * sB]) / np.sqrt(th * rho))
    X.append(np.concatenate([(sp.m_A * c2 / th - 3.0) * sA, (sp.m_B * c2 / th - 3.0) * sB]) / np.sqrt(6.0 * nt))
    return np.array(X)


def stacked_weights(vg: VelocityGrid) -> np.ndarray:
    return np.tile(vg.weights, 2)


def gram(X: np.ndarray, vg: VelocityGrid) -> np.ndarray:
    return (X * stacked_weights(vg)) @ X.T


def orthonormalize(X: np.ndarray, vg: VelocityGrid) -> np.ndarray:
    """Symmetric (Lowdin) orthonormalisation in the quadrature inner product."""
    G = gram(X, vg)
    lam, V = np.linalg.eigh(G)
    return (V @ np.diag(lam**-0.5) @ V.T) @ X


def macro_project(g: np.ndarray, basis: np.ndarray, vg: VelocityGrid) -> tuple[np.ndarray, np.ndarray]:
    """``(P g, g - P g)`` for stacked ``g`` (leading axes allowed)."""
    g = np.asarray(g, dtype=float)
    coef = (g * stacked_weights(vg)) @ basis.T
    Pg = coef @ basis
    return Pg, g - Pg


SYMMETRIC_BASIS = (0, 1, 2, 5)


@dataclass
class LinearizedOperator:
    """Discrete ``L`` around a bi-Maxwellian, acting on stacked ``(g^A, g^B)``.

    ``Q`` is the symmetric quadratic form, so ``L = D^{-1} Q`` with ``D`` the
    stacked quadrature weights.  ``basis`` is orthonormal in the quadrature
    inner product and spans the discrete kernel.
    """

    vg: VelocityGrid
    sp: SpeciesPair
    kernel: CollisionKernel
    state: FluidState
    Q: np.ndarray
    nu_A: np.ndarray
    nu_B: np.ndarray
    basis: np.ndarray
    formula_basis: np.ndarray
    masked: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    #: relative asymmetry of the assembled form before it was symmetrised
    asymmetry: float = 0.0

    @property
    def D(self) -> np.ndarray:
        return stacked_weights(self.vg)

    @cached_property
    def matrix(self) -> np.ndarray:
        return self.Q / self.D[:, None]

    @cached_property
    def symmetric(self) -> np.ndarray:
        s = 1.0 / np.sqrt(self.D)
        S = s[:, None] * self.Q * s[None, :]
        return 0.5 * (S + S.T)

    @property
    def nu(self) -> np.ndarray:
        return np.concatenate([self.nu_A, self.nu_B])

    @cached_property
    def K(self) -> np.ndarray:
        return self.matrix - np.diag(self.nu)

    def apply(self, g: np.ndarray) -> np.ndarray:
        return np.asarray(g) @ self.matrix.T

    def inner(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        return (np.asarray(f) * self.D) @ np.asarray(g).T

    def nu_norm2(self, f: np.ndarray) -> float:
        return float(np.sum(self.D * np.tile(self.vg.bracket**self.kernel.gamma, 2) * np.asarray(f) ** 2))

    def project(self, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return macro_project(g, self.basis, self.vg)

    @cached_property
    def spectrum(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.symmetric)

    def null_gap(self) -> float:
        """Ratio of the first nonzero eigenvalue to the largest kernel eigenvalue."""
        ev = np.sort(np.abs(self.spectrum))
        k = self.basis.shape[0]
        return float(ev[k] / max(ev[k - 1], np.finfo(float).tiny))

    @cached_property
    def _factor(self):
        Y = self.basis * np.sqrt(self.D)
        M = self.symmetric + Y.T @ Y
        return sla.cho_factor(M), Y

    @cached_property
    def condition(self) -> float:
        Y = self.basis * np.sqrt(self.D)
        return float(np.linalg.cond(self.symmetric + Y.T @ Y))


def linearize(fs: FluidState, kernel: CollisionKernel, sp: SpeciesPair, vg: VelocityGrid,
              ag: AngularGrid | None = None, mask_below: float = 1e-250) -> LinearizedOperator:
    """Assemble ``L`` from the entropic discretisation around the bi-Maxwellian of ``fs``.

    ``L`` is the exact linearisation of the default collision form, so the
    discrete kernel is spanned by ``sqrt(mu)`` times the collision invariants.
    Nodes where ``mu`` underflows ``mask_below`` are reported in ``masked``.
    """
    ag = _default_ag(ag)
    fs.check_positive()
    if vg.size > 9**3:
        raise ValueError("dense assembly is limited to 9^3 velocity nodes")
    state = FluidState(fs.n_A[:1], fs.n_B[:1], fs.u[:1], fs.theta[:1])
    mu = bi_maxwellian(state, sp, vg)
    muA, muB = mu.F_A[0], mu.F_B[0]
    masked = np.flatnonzero(np.concatenate([muA, muB]) < mask_below)
    dirs, dirw = ag.half
    if vg.axisymmetric:
        first, mult, unordered = vg.rep_full_index, vg.multiplicity, False
    else:
        first, mult, unordered = np.arange(vg.size, dtype=np.int64), np.ones(vg.size), True
    Q = np.zeros((2 * vg.size, 2 * vg.size))
    _kernels.assemble_linear(
        np.maximum(muA, mask_below), np.maximum(muB, mask_below), first, mult, vg.rep_of, vg.points,
        vg.L_v, vg.h, sp.masses, _table(kernel, sp), kernel.gamma, kernel.b_power, dirs, dirw, unordered, Q,
    )
    asym = float(np.max(np.abs(Q - Q.T)) / np.max(np.abs(Q)))
    Q = 0.5 * (Q + Q.T)
    freq = collision_frequency(kernel, sp, state, vg, ag, angular="grid")
    Xf = kernel_basis(state, sp, vg)
    keep = list(SYMMETRIC_BASIS) if vg.axisymmetric else list(range(6))
    basis = orthonormalize(Xf[keep], vg)
    return LinearizedOperator(vg, sp, kernel, state, Q, freq.nu_A, freq.nu_B, basis, Xf, masked, asym)


def solvability_residuals(lin: LinearizedOperator, rbar: np.ndarray) -> np.ndarray:
    return lin.inner(rbar, lin.basis)


def solve_L_inverse(lin: LinearizedOperator, rbar: np.ndarray, tol: float = 1e-8,
                    cond_warn: float = 1e12) -> np.ndarray:
    """Unique ``g`` with ``L g = rbar`` and ``P g = 0``.

    ``rbar`` must be orthogonal to the kernel within ``tol`` relative to its
    norm; otherwise :class:`SolvabilityError` carries the components.
    """
    rbar = np.asarray(rbar, dtype=float)
    res = solvability_residuals(lin, rbar)
    scale = np.sqrt(np.maximum(np.sum(lin.D * rbar**2, axis=-1), np.finfo(float).tiny))
    if np.any(np.abs(res) > tol * np.asarray(scale)[..., None]):
        raise SolvabilityError(res, tol)
    if lin.condition > cond_warn:
        warnings.warn(f"L restricted to the micro space is ill-conditioned (cond ~ {lin.condition:.2e})",
                      RuntimeWarning, stacklevel=2)
    cho, _ = lin._factor
    rhs = (np.sqrt(lin.D) * rbar).reshape(-1, rbar.shape[-1]).T
    y = sla.cho_solve(cho, rhs).T.reshape(rbar.shape)
    return y / np.sqrt(lin.D)
