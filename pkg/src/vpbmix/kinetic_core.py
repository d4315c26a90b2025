"""Grids, species parameters, distribution containers and Maxwellian moments.

Velocity is always three dimensional.  Space is a periodic interval, so
fields depend on ``x = x_1`` only and the bulk velocity keeps three
components.  Distribution arrays put the velocity index last; any leading
axes (usually one spatial axis) are carried along untouched.

A velocity grid can be built in *axisymmetric* form.  Problems driven along
``x_1`` keep distributions invariant under the symmetry group of the square
acting on ``(v_2, v_3)`` (sign flips and the swap).  The axisymmetric grid
stores one representative node per orbit and folds the orbit size into the
quadrature weight, which cuts the work of every velocity sum by about 5x.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse


class DomainError(ValueError):
    """Raised when an input leaves the domain where a formula is defined."""


@dataclass(frozen=True)
class SpeciesPair:
    """Masses, charges and diameters of the two species ``A`` and ``B``."""

    m_A: float = 1.875
    m_B: float = 1.0
    e_A: float = 1.0
    e_B: float = 1.0
    sigma_A: float = 1.0
    sigma_B: float = 1.0

    def __post_init__(self) -> None:
        if not (self.m_A > 0 and self.m_B > 0):
            raise DomainError("masses must be positive")
        if not (self.sigma_A > 0 and self.sigma_B > 0):
            raise DomainError("diameters must be positive")
        if self.m_A < self.m_B:
            raise DomainError("species are labelled so that m_A >= m_B")

    @property
    def masses(self) -> np.ndarray:
        return np.array([self.m_A, self.m_B])

    @property
    def charges(self) -> np.ndarray:
        return np.array([self.e_A, self.e_B])

    @property
    def diameters(self) -> np.ndarray:
        return np.array([self.sigma_A, self.sigma_B])

    def cross_section(self) -> np.ndarray:
        """2x2 table of the geometric prefactor ``(sigma_a + sigma_b)^2 / 4``."""
        d = self.diameters
        return (d[:, None] + d[None, :]) ** 2 / 4.0


@dataclass(frozen=True)
class VelocityGrid:
    """Uniform midpoint grid on ``[-L_v, L_v]^3``.

    With ``axisymmetric=True`` the public ``nodes``/``weights`` refer to orbit
    representatives; ``full_nodes`` always lists every Cartesian node.
    """

    L_v: float
    points: int
    axisymmetric: bool = False

    def __post_init__(self) -> None:
        if self.points < 1 or self.points % 2 == 0:
            raise DomainError("points_per_axis must be a positive odd integer")
        if not self.L_v > 0:
            raise DomainError("L_v must be positive")

    @property
    def h(self) -> float:
        return 2.0 * self.L_v / self.points

    @cached_property
    def axis(self) -> np.ndarray:
        return -self.L_v + (np.arange(self.points) + 0.5) * self.h

    @cached_property
    def full_index(self) -> np.ndarray:
        n = self.points
        i = np.indices((n, n, n)).reshape(3, -1).T
        return np.ascontiguousarray(i, dtype=np.int64)

    @cached_property
    def full_nodes(self) -> np.ndarray:
        return self.axis[self.full_index]

    @cached_property
    def _orbits(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n, c = self.points, self.points // 2
        idx = self.full_index
        if not self.axisymmetric:
            k = np.arange(n**3)
            return k, k, np.ones(n**3)
        a = np.abs(idx[:, 1] - c)
        b = np.abs(idx[:, 2] - c)
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        canon = idx[:, 0] * n * n + (c + lo) * n + (c + hi)
        reps, rep_of = np.unique(canon, return_inverse=True)
        mult = np.bincount(rep_of).astype(float)
        return reps.astype(np.int64), rep_of.astype(np.int64), mult

    @property
    def rep_full_index(self) -> np.ndarray:
        """Full-grid index of each stored node."""
        return self._orbits[0]

    @property
    def rep_of(self) -> np.ndarray:
        """Stored-node index of each full-grid node."""
        return self._orbits[1]

    @property
    def multiplicity(self) -> np.ndarray:
        return self._orbits[2]

    @property
    def size(self) -> int:
        return len(self.rep_full_index)

    @cached_property
    def nodes(self) -> np.ndarray:
        return self.full_nodes[self.rep_full_index]

    @cached_property
    def moment_nodes(self) -> np.ndarray:
        """Nodes averaged over their orbit, for first moments.

        Orbit sums of ``v_2`` and ``v_3`` vanish, so stored nodes keep only
        ``v_1`` in axisymmetric mode.
        """
        if not self.axisymmetric:
            return self.nodes
        v = self.nodes.copy()
        v[:, 1:] = 0.0
        return v

    @cached_property
    def weights(self) -> np.ndarray:
        return self.h**3 * self.multiplicity

    @cached_property
    def bracket(self) -> np.ndarray:
        """Polynomial weight ``<v> = 1 + |v|`` at the stored nodes."""
        return 1.0 + np.linalg.norm(self.nodes, axis=1)

    def expand(self, f: np.ndarray) -> np.ndarray:
        """Values on every Cartesian node from values on stored nodes."""
        return np.asarray(f)[..., self.rep_of]

    def restrict(self, f: np.ndarray) -> np.ndarray:
        """Values on stored nodes from values on every Cartesian node."""
        return np.asarray(f)[..., self.rep_full_index]

    def with_symmetry(self, axisymmetric: bool) -> VelocityGrid:
        return VelocityGrid(self.L_v, self.points, axisymmetric)


def default_velocity_extent(theta_max: float, sp: SpeciesPair, factor: float = 6.0) -> float:
    """Box half-width covering ``factor`` thermal widths of the lighter species."""
    return factor * np.sqrt(theta_max / min(sp.m_A, sp.m_B))


@dataclass(frozen=True)
class SpatialGrid1D:
    """Periodic grid ``x_j = j L_x / cells``."""

    L_x: float
    cells: int

    def __post_init__(self) -> None:
        if self.cells < 1 or not self.L_x > 0:
            raise DomainError("need cells >= 1 and L_x > 0")

    @property
    def dx(self) -> float:
        return self.L_x / self.cells

    @cached_property
    def x(self) -> np.ndarray:
        return np.arange(self.cells) * self.dx

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.rfftfreq(self.cells, d=self.dx)


@dataclass
class DistributionPair:
    """Phase-space densities of both species, velocity index last."""

    F_A: np.ndarray
    F_B: np.ndarray

    def __post_init__(self) -> None:
        self.F_A = np.asarray(self.F_A, dtype=float)
        self.F_B = np.asarray(self.F_B, dtype=float)
        if self.F_A.shape != self.F_B.shape:
            raise ValueError("species arrays must share a shape")

    def __iter__(self):
        yield self.F_A
        yield self.F_B

    def __add__(self, other: DistributionPair) -> DistributionPair:
        return DistributionPair(self.F_A + other.F_A, self.F_B + other.F_B)

    def __sub__(self, other: DistributionPair) -> DistributionPair:
        return DistributionPair(self.F_A - other.F_A, self.F_B - other.F_B)

    def scaled(self, c: float) -> DistributionPair:
        return DistributionPair(c * self.F_A, c * self.F_B)

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.F_A, self.F_B], axis=-1)

    @classmethod
    def from_stacked(cls, f: np.ndarray) -> DistributionPair:
        k = f.shape[-1] // 2
        return cls(f[..., :k].copy(), f[..., k:].copy())

    def is_valid(self) -> bool:
        return bool(
            np.all(np.isfinite(self.F_A)) and np.all(np.isfinite(self.F_B))
            and np.all(self.F_A >= 0) and np.all(self.F_B >= 0)
        )


@dataclass
class FluidState:
    """Euler-Poisson unknowns on the spatial grid (or at a single point)."""

    n_A: np.ndarray
    n_B: np.ndarray
    u: np.ndarray
    theta: np.ndarray
    phi: np.ndarray | None = None
    grad_phi: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.n_A = np.atleast_1d(np.asarray(self.n_A, dtype=float))
        self.n_B = np.atleast_1d(np.asarray(self.n_B, dtype=float))
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        u = np.asarray(self.u, dtype=float)
        self.u = np.broadcast_to(u, self.n_A.shape + (3,)).copy()
        zeros = np.zeros_like(self.n_A)
        self.phi = zeros.copy() if self.phi is None else np.atleast_1d(np.asarray(self.phi, float))
        self.grad_phi = zeros.copy() if self.grad_phi is None else np.atleast_1d(np.asarray(self.grad_phi, float))

    def check_positive(self) -> None:
        for name in ("n_A", "n_B", "theta"):
            a = getattr(self, name)
            if not np.all(np.isfinite(a)) or np.any(a <= 0):
                raise DomainError(f"{name} must be strictly positive")

    def densities(self) -> tuple[np.ndarray, np.ndarray]:
        return self.n_A, self.n_B

    def rho(self, sp: SpeciesPair) -> np.ndarray:
        return sp.m_A * self.n_A + sp.m_B * self.n_B

    def n_tilde(self) -> np.ndarray:
        return self.n_A + self.n_B

    def n_e(self, sp: SpeciesPair) -> np.ndarray:
        return sp.e_A * self.n_A + sp.e_B * self.n_B

    def at(self, j: int) -> FluidState:
        return FluidState(self.n_A[j], self.n_B[j], self.u[j], self.theta[j], self.phi[j], self.grad_phi[j])


def maxwellian(n, u, theta, m: float, v: np.ndarray) -> np.ndarray:
    """``n m^{3/2} (2 pi theta)^{-3/2} exp(-m |v-u|^2 / (2 theta))`` on nodes ``v``.

    ``n`` and ``theta`` broadcast over leading axes, ``u`` has a trailing
    axis of length 3; the result gains a trailing velocity axis.
    """
    n = np.asarray(n, dtype=float)[..., None]
    theta = np.asarray(theta, dtype=float)[..., None]
    u = np.asarray(u, dtype=float)
    d2 = np.sum((v - u[..., None, :]) ** 2, axis=-1)
    return n * (m / (2.0 * np.pi * theta)) ** 1.5 * np.exp(-m * d2 / (2.0 * theta))


def bi_maxwellian(fs: FluidState, sp: SpeciesPair, vg: VelocityGrid) -> DistributionPair:
    """Local bi-Maxwellian sharing ``u`` and ``theta`` between the species."""
    fs.check_positive()
    v = vg.nodes
    return DistributionPair(
        maxwellian(fs.n_A, fs.u, fs.theta, sp.m_A, v),
        maxwellian(fs.n_B, fs.u, fs.theta, sp.m_B, v),
    )


def theta_M_of(theta_bar: float, sp: SpeciesPair) -> float:
    if not theta_bar > 0:
        raise DomainError("theta_bar must be positive")
    return 2.0 * sp.m_A * theta_bar / (2.0 * sp.m_A + sp.m_B)


def global_maxwellian(theta_M: float, sp: SpeciesPair, vg: VelocityGrid) -> DistributionPair:
    """``(2 pi theta_M)^{-3/2} exp(-m |v|^2 / (2 theta_M))``, no density or mass prefactor."""
    if not theta_M > 0:
        raise DomainError("theta_M must be positive")
    r2 = np.sum(vg.nodes**2, axis=1)
    pref = (2.0 * np.pi * theta_M) ** -1.5
    return DistributionPair(
        pref * np.exp(-sp.m_A * r2 / (2.0 * theta_M)),
        pref * np.exp(-sp.m_B * r2 / (2.0 * theta_M)),
    )


@dataclass
class SpeciesMoments:
    n: np.ndarray
    momentum: np.ndarray
    energy: np.ndarray
    u: np.ndarray
    theta: np.ndarray
    theta_defined: np.ndarray


@dataclass
class MomentRecord:
    A: SpeciesMoments
    B: SpeciesMoments
    rho: np.ndarray
    n_tilde: np.ndarray
    n_e: np.ndarray
    u: np.ndarray
    theta: np.ndarray
    flags: list[str] = field(default_factory=list)

    def fluid_state(self) -> FluidState:
        return FluidState(self.A.n, self.B.n, self.u, self.theta)


def _species_moments(F: np.ndarray, m: float, vg: VelocityGrid) -> SpeciesMoments:
    w, v = vg.weights, vg.moment_nodes
    n = F @ w
    mom = (F * w) @ v
    en = (F * w) @ np.sum(vg.nodes**2, axis=1)
    ok = n > 0
    safe = np.where(ok, n, 1.0)
    u = mom / safe[..., None]
    theta = m * (en / safe - np.sum(u**2, axis=-1)) / 3.0
    return SpeciesMoments(n, mom, en, np.where(ok[..., None], u, np.nan), np.where(ok, theta, np.nan), ok)


def moments(dp: DistributionPair, vg: VelocityGrid, sp: SpeciesPair) -> MomentRecord:
    """Per-species and mixture moments by the grid quadrature.

    ``energy`` is the unweighted second moment, so that
    ``m * energy = m n |u|^2 + 3 n theta`` for each species.
    """
    A = _species_moments(dp.F_A, sp.m_A, vg)
    B = _species_moments(dp.F_B, sp.m_B, vg)
    rho = sp.m_A * A.n + sp.m_B * B.n
    nt = A.n + B.n
    ne = sp.e_A * A.n + sp.e_B * B.n
    ok = (rho > 0) & (nt > 0)
    u = (sp.m_A * A.momentum + sp.m_B * B.momentum) / np.where(ok, rho, 1.0)[..., None]
    total_e = sp.m_A * A.energy + sp.m_B * B.energy
    theta = (total_e - rho * np.sum(u**2, axis=-1)) / (3.0 * np.where(ok, nt, 1.0))
    flags = []
    if not np.all(A.theta_defined) or not np.all(B.theta_defined):
        flags.append("theta undefined where a species density vanishes")
    return MomentRecord(A, B, rho, nt, ne, np.where(ok[..., None], u, np.nan), np.where(ok, theta, np.nan), flags)


def weighted_norms(f, vg: VelocityGrid, gamma: float) -> dict[str, float]:
    """L2, collision-frequency weighted L2 and sup norms over the velocity grid.

    ``f`` may be a :class:`DistributionPair` (both species summed) or a
    plain array with velocity index last.
    """
    if not -3.0 < gamma <= 1.0:
        raise DomainError("gamma must lie in (-3, 1]")
    parts = [f.F_A, f.F_B] if isinstance(f, DistributionPair) else [np.asarray(f, float)]
    w = vg.weights
    nu_w = w * vg.bracket**gamma
    l2 = sum(float(np.sum(np.abs(p) ** 2 * w)) for p in parts)
    nu = sum(float(np.sum(np.abs(p) ** 2 * nu_w)) for p in parts)
    linf = max(float(np.max(np.abs(p))) for p in parts)
    return {"l2": np.sqrt(l2), "nu": np.sqrt(nu), "linf": linf}


def velocity_derivative(vg: VelocityGrid) -> sparse.csr_matrix:
    """Central difference along ``v_1`` on stored nodes, zero outside the box.

    Returns a sparse ``(size, size)`` matrix ``D`` with ``(D f)_q ~ d f / d v_1``.
    Stored nodes keep their ``v_1`` index, so ``D`` maps symmetric data to
    symmetric data.
    """
    n = vg.points
    full = vg.full_index
    rows, cols, vals = [], [], []
    for r, q in enumerate(vg.rep_full_index):
        i1 = full[q, 0]
        for step, sign in ((1, 1.0), (-1, -1.0)):
            if 0 <= i1 + step < n:
                rows.append(r)
                cols.append(vg.rep_of[q + step * n * n])
                vals.append(sign / (2.0 * vg.h))
    return sparse.csr_matrix((vals, (rows, cols)), shape=(vg.size, vg.size))
