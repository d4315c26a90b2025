"""Weights, validity times, characteristics and weighted remainder fields."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .collision import CollisionKernel, collision_frequency_exact
from .kinetic_core import (
    DistributionPair,
    DomainError,
    FluidState,
    SpeciesPair,
    VelocityGrid,
    global_maxwellian,
)


def _check_gamma(gamma: float) -> None:
    if not (-3.0 < gamma <= 1.0):
        raise DomainError(f"gamma = {gamma} outside (-3, 1]")


@dataclass(frozen=True)
class WeightSpec:
    """Parameters of the velocity weight ``w_gamma(t, v)``."""

    gamma: float
    l: int = 7
    kappa_0: float = 1e-3
    k: int = 6

    def __post_init__(self) -> None:
        _check_gamma(self.gamma)
        if self.gamma == 1 and self.l < 7:
            raise DomainError("the hard-sphere weight needs l >= 7")
        if self.k < 6:
            raise DomainError("expansion order k must be at least 6")
        if not self.kappa_0 > 0:
            raise DomainError("kappa_0 must be positive")

    @property
    def kappa_1(self) -> float:
        return 2.0 / (2 * self.k - 1)

    @property
    def kappa_2(self) -> float:
        """Exponent of ``<v>`` in the exponential weight; capped at 2."""
        return min((3.0 - self.gamma) / 2.0, 2.0)

    @property
    def polynomial(self) -> bool:
        return self.gamma == 1

    def kappa_tilde(self, t) -> np.ndarray:
        return self.kappa_0 * (1.0 + (1.0 + np.asarray(t, dtype=float)) ** (-self.kappa_1))

    def dkappa_tilde_dt(self, t) -> np.ndarray:
        return -self.kappa_0 * self.kappa_1 * (1.0 + np.asarray(t, dtype=float)) ** (-self.kappa_1 - 1.0)


def bracket(v) -> np.ndarray:
    """``<v> = 1 + |v|`` over a trailing axis of length 3."""
    return 1.0 + np.linalg.norm(np.asarray(v, dtype=float), axis=-1)


def log_weight(spec: WeightSpec, t, v) -> np.ndarray:
    b = bracket(v)
    if spec.polynomial:
        return spec.l * np.log(b) + 0.0 * np.asarray(t)
    return spec.kappa_tilde(t) * b**spec.kappa_2


def weight_w(spec: WeightSpec, t, v) -> np.ndarray:
    return np.exp(log_weight(spec, t, v))


def grad_log_weight(spec: WeightSpec, t, v) -> np.ndarray:
    """``grad_v log w``; zero at ``v = 0`` where ``<v>`` has a kink."""
    v = np.asarray(v, dtype=float)
    r = np.linalg.norm(v, axis=-1)
    b = 1.0 + r
    if spec.polynomial:
        scale = spec.l / b
    else:
        scale = spec.kappa_tilde(t) * spec.kappa_2 * b ** (spec.kappa_2 - 1.0)
    unit = np.divide(v, r[..., None], out=np.zeros_like(v), where=r[..., None] > 0)
    return np.asarray(scale)[..., None] * unit


def dt_log_weight(spec: WeightSpec, t, v) -> np.ndarray:
    if spec.polynomial:
        return np.zeros(np.broadcast_shapes(np.shape(t), np.shape(v)[:-1]))
    return spec.dkappa_tilde_dt(t) * bracket(v) ** spec.kappa_2


# ---------------------------------------------------------------------------
# Validity time
# ---------------------------------------------------------------------------


def _as_fraction(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x).limit_denominator(10**9)


def validity_exponent(gamma, k: int) -> Fraction:
    """Exponent ``y`` with ``T = eps^{-y}``, exact for rational ``gamma``."""
    g = _as_fraction(gamma)
    if not (-3 < g <= 1):
        raise DomainError(f"gamma = {gamma} outside (-3, 1]")
    if int(k) != k or k < 6:
        raise DomainError("k must be an integer >= 6")
    num, den = Fraction(2 * k - 3), Fraction(2 * k - 1)
    if g >= -1:
        return num / (2 * den)
    return num / ((1 - g) * den)


def validity_exponent_soft_limit(k: int) -> Fraction:
    """Limit of the exponent as ``gamma -> -3`` from above."""
    if int(k) != k or k < 6:
        raise DomainError("k must be an integer >= 6")
    return Fraction(2 * k - 3, 4 * (2 * k - 1))


def validity_time(gamma, k: int, epsilon: float) -> tuple[Fraction, float]:
    if not 0.0 < epsilon < 1.0:
        raise DomainError("epsilon must lie in (0, 1)")
    y = validity_exponent(gamma, k)
    return y, float(epsilon ** (-float(y)))


# ---------------------------------------------------------------------------
# Lower bound of the weighted collision frequency
# ---------------------------------------------------------------------------


@dataclass
class NuHatReport:
    C: float
    binding: str
    c_low: float
    C_field: float
    epsilon_0: float
    holds: np.ndarray
    margin: np.ndarray
    violations: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))

    @property
    def all_hold(self) -> bool:
        return bool(np.all(self.holds))


def _nu_hat_parts(spec, kernel, sp, grad_bound, theta_M, state, t, v):
    """Pieces of ``nu_hat`` at worst-case field direction, per species."""
    nus = collision_frequency_exact(v, kernel, sp, state)
    parts = []
    for a, (m, e) in enumerate(((sp.m_A, sp.e_A), (sp.m_B, sp.e_B))):
        # grad_v log(sqrt(mu_M) / w) = -m v / (2 theta_M) - grad_v log w
        g = -m * v / (2.0 * theta_M) - grad_log_weight(spec, t, v)
        field_term = -abs(e / m) * grad_bound * np.linalg.norm(g, axis=-1)
        time_term = -dt_log_weight(spec, t, v)
        parts.append((nus[a], field_term, time_term, np.linalg.norm(g, axis=-1) * abs(e / m)))
    return parts


def nu_hat(spec: WeightSpec, kernel: CollisionKernel, sp: SpeciesPair, grad_phi, theta_M: float,
           state: FluidState, t, v, epsilon) -> tuple[np.ndarray, np.ndarray]:
    """``nu_hat_eps`` per species for a given field vector ``grad_phi`` (length 3)."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    nus = collision_frequency_exact(v, kernel, sp, state)
    gp = np.asarray(grad_phi, dtype=float)
    out = []
    for a, (m, e) in enumerate(((sp.m_A, sp.e_A), (sp.m_B, sp.e_B))):
        g = -m * v / (2.0 * theta_M) - grad_log_weight(spec, t, v)
        out.append(nus[a] / epsilon + e / m * (g @ gp) - dt_log_weight(spec, t, v))
    return out[0], out[1]


def nu_hat_lower_bound_check(spec: WeightSpec, kernel: CollisionKernel, sp: SpeciesPair, phi_grad_bound: float,
                             samples: np.ndarray, theta_M: float, state: FluidState,
                             eps_max: float = 1.0, bisect_iter: int = 200) -> NuHatReport:
    """Check ``nu_hat >= 2 <v>^gamma / (3 C eps)`` on ``samples`` rows ``(t, v1, v2, v3, eps)``.

    The field enters at its worst direction with modulus ``phi_grad_bound``.
    ``C = max(1 / c_low, C_field)`` with ``c_low`` the fitted lower constant
    of ``nu / <v>^gamma`` and ``C_field`` the fitted constant of the field
    term against ``<v>`` over the sampled velocities.  ``epsilon_0`` is the
    largest ``eps <= eps_max`` at which the bound holds at every sampled
    ``(t, v)``, located by bisection.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    t, v, eps = samples[:, 0], samples[:, 1:4], samples[:, 4]
    if np.any(eps <= 0):
        raise DomainError("epsilon samples must be positive")
    b = bracket(v)
    parts = _nu_hat_parts(spec, kernel, sp, phi_grad_bound, theta_M, state, t, v)
    c_low = min(float(np.min(p[0] / b**spec.gamma)) for p in parts)
    C_field = max(float(np.max(p[3] / b)) for p in parts)
    C = max(1.0 / c_low, C_field)
    binding = "collision frequency" if 1.0 / c_low >= C_field else "maxwellian derivative"
    target_coef = 2.0 * b**spec.gamma / (3.0 * C)

    def margin(e):
        return np.min([(p[0] - target_coef) / e + p[1] + p[2] for p in parts], axis=0)

    def ok(e):
        return bool(np.all(margin(e) >= 0))

    if ok(eps_max):
        eps0 = eps_max
    else:
        lo, hi = 0.0, eps_max
        for _ in range(bisect_iter):
            mid = 0.5 * (lo + hi)
            if mid == lo or mid == hi:
                break
            if ok(mid):
                lo = mid
            else:
                hi = mid
        eps0 = lo
    m = margin(eps)
    holds = m >= 0
    return NuHatReport(C, binding, c_low, C_field, eps0, holds, m, samples[~holds])


def young_split(v, t, epsilon, iota: float, spec: WeightSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``<v>`` and the two terms bounding it through Young's inequality.

    Uses exponents ``p = (k2 - gamma) / (k2 - 1)`` and
    ``q = (k2 - gamma) / (1 - gamma)`` so that the product of the two
    factors is exactly ``<v>``.  Requires ``gamma < 1``.
    """
    g, k1, k2 = spec.gamma, spec.kappa_1, spec.kappa_2
    if g >= 1:
        raise DomainError("the split needs gamma < 1")
    if not 0.0 < iota < 1.0:
        raise DomainError("iota must lie in (0, 1)")
    b = bracket(v)
    tt = 1.0 + np.asarray(t, dtype=float)
    first = b**g * epsilon ** (iota - 1.0) * tt ** ((1.0 + k1) * (1.0 - g) / (k2 - 1.0))
    second = b**k2 * epsilon ** ((1.0 - iota) * (k2 - 1.0) / (1.0 - g)) * tt ** (-(1.0 + k1))
    return b, first, second


def young_factors(v, t, epsilon, iota: float, spec: WeightSpec) -> np.ndarray:
    """Product of the two Young factors, which equals ``<v>``."""
    g, k2 = spec.gamma, spec.kappa_2
    _, first, second = young_split(v, t, epsilon, iota, spec)
    return first ** ((k2 - 1.0) / (k2 - g)) * second ** ((1.0 - g) / (k2 - g))


# ---------------------------------------------------------------------------
# Characteristics
# ---------------------------------------------------------------------------


class PotentialField:
    """``phi(t, x)`` on a periodic grid: trigonometric in ``x``, linear in ``t``.

    The trigonometric interpolant is smooth, so RK4 along characteristics
    keeps its order; a spline would cost it at every knot.
    """

    def __init__(self, times, x, phi, period: float):
        self.times = np.atleast_1d(np.asarray(times, dtype=float))
        phi = np.atleast_2d(np.asarray(phi, dtype=float))
        if phi.shape != (len(self.times), len(x)):
            raise ValueError("phi must have shape (len(times), len(x))")
        n = phi.shape[1]
        self.period = float(period)
        self.x0 = float(x[0])
        coef = np.fft.rfft(phi, axis=1) / n
        coef[:, 1:] *= 2.0
        if n % 2 == 0:
            coef[:, -1] /= 2.0
        self.coef = coef
        self.k = 2.0 * np.pi / self.period * np.arange(coef.shape[1])

    @classmethod
    def static(cls, x, phi, period: float) -> PotentialField:
        return cls([0.0], x, np.asarray(phi)[None, :], period)

    def _eval(self, row: int, x, nu: int):
        x = np.asarray(x, dtype=float)
        phase = np.exp(1j * np.multiply.outer(x - self.x0, self.k))
        return np.real(phase @ (self.coef[row] * (1j * self.k) ** nu))

    def _blend(self, t, x, nu: int):
        if len(self.times) == 1:
            return self._eval(0, x, nu)
        j = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2))
        s = (t - self.times[j]) / (self.times[j + 1] - self.times[j])
        return (1.0 - s) * self._eval(j, x, nu) + s * self._eval(j + 1, x, nu)

    def covers(self, t) -> bool:
        return len(self.times) == 1 or (self.times[0] - 1e-12 <= t <= self.times[-1] + 1e-12)

    def __call__(self, t, x):
        return self._blend(t, x, 0)

    def gradient(self, t, x):
        return self._blend(t, x, 1)


@dataclass
class Trajectory:
    tau: np.ndarray
    X: np.ndarray
    V: np.ndarray
    truncated: bool = False

    def energy(self, field: PotentialField, m: float, e: float) -> np.ndarray:
        """``m |V|^2 / 2 - e phi(X)`` along the samples."""
        return 0.5 * m * np.sum(self.V**2, axis=-1) - e * np.array(
            [field(t, x) for t, x in zip(self.tau, self.X)])


DEFAULT_DTAU = 1e-2


def integrate_characteristics(phi: PotentialField, anchor: tuple[float, float, np.ndarray], sp: SpeciesPair,
                              species: str, tau_end: float, dtau: float = DEFAULT_DTAU) -> Trajectory:
    """RK4 for ``dX/dtau = V_1``, ``dV/dtau = (e/m) phi_x(tau, X) e_1`` from the anchor ``(t, x, v)``.

    Integrates toward ``tau_end`` (either direction) with a step close to
    ``dtau`` that lands on ``tau_end``.  Leaving the time window of a
    time-dependent field stops the integration and sets ``truncated``.
    """
    t0, x0, v0 = anchor
    v0 = np.asarray(v0, dtype=float).reshape(3)
    if species not in ("A", "B"):
        raise ValueError("species must be 'A' or 'B'")
    qm = sp.e_A / sp.m_A if species == "A" else sp.e_B / sp.m_B
    span = tau_end - t0
    n = max(1, int(np.ceil(abs(span) / dtau - 1e-12)))
    h = span / n
    taus, Xs, Vs = [t0], [float(x0)], [v0.copy()]
    x, v, t = float(x0), v0.copy(), float(t0)
    truncated = False

    def f(t, x, v):
        a = np.zeros(3)
        a[0] = qm * float(phi.gradient(t, x))
        return v[0], a

    for i in range(n):
        if not (phi.covers(t) and phi.covers(t + h)):
            truncated = True
            break
        k1x, k1v = f(t, x, v)
        k2x, k2v = f(t + h / 2, x + h / 2 * k1x, v + h / 2 * k1v)
        k3x, k3v = f(t + h / 2, x + h / 2 * k2x, v + h / 2 * k2v)
        k4x, k4v = f(t + h, x + h * k3x, v + h * k3v)
        x = x + h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        v = v + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        t = t0 + (i + 1) * h
        taus.append(t)
        Xs.append(x)
        Vs.append(v.copy())
    return Trajectory(np.array(taus), np.array(Xs), np.array(Vs), truncated)


# ---------------------------------------------------------------------------
# Support and weighted remainders
# ---------------------------------------------------------------------------


def support_radius(dp: DistributionPair, vg: VelocityGrid, threshold: float = 0.0) -> tuple[float, float]:
    """Largest ``|v|`` where ``|F| > threshold`` (over all spatial nodes), per species."""
    speed = np.linalg.norm(vg.nodes, axis=1)
    out = []
    for F in dp:
        mask = np.any(np.abs(np.reshape(F, (-1, vg.size))) > threshold, axis=0)
        out.append(float(speed[mask].max()) if mask.any() else 0.0)
    return out[0], out[1]



@dataclass(frozen=True)
class SupportFit:
    """Line ``R_s(0) + C_fit t`` fitted to a support-radius history."""

    C_fit: float
    residual: float
    excess: float

    def within(self, cell: float) -> bool:
        return self.residual <= cell and self.excess <= cell


def fit_support_growth(times, radii) -> SupportFit:
    """Least-squares slope through the initial radius.

    ``residual`` is the largest deviation from the line and ``excess`` the
    largest amount by which the history rises above it.
    """
    t = np.asarray(times, dtype=float) - float(times[0])
    r = np.asarray(radii, dtype=float)
    d = r - r[0]
    C = float(t @ d / (t @ t)) if np.any(t > 0) else 0.0
    dev = d - C * t
    return SupportFit(C, float(np.max(np.abs(dev))), float(max(np.max(dev), 0.0)))


@dataclass
class WeightedRemainder:
    fields: DistributionPair
    sup: float
    sup_weighted: float


def weighted_remainder(F_R: DistributionPair, spec: WeightSpec, theta_M: float, sp: SpeciesPair,
                       vg: VelocityGrid, t: float = 0.0) -> WeightedRemainder:
    """``w F_R / sqrt(mu_M)`` per species and its sup norms.

    ``sup_weighted`` carries the extra ``<v>^{2 - gamma}`` factor.
    """
    muM = global_maxwellian(theta_M, sp, vg)
    w = weight_w(spec, t, vg.nodes)
    hA = w * F_R.F_A / np.sqrt(muM.F_A)
    hB = w * F_R.F_B / np.sqrt(muM.F_B)
    extra = vg.bracket ** (2.0 - spec.gamma)
    sup = max(float(np.max(np.abs(hA))), float(np.max(np.abs(hB))))
    supw = max(float(np.max(np.abs(extra * hA))), float(np.max(np.abs(extra * hB))))
    return WeightedRemainder(DistributionPair(hA, hB), sup, supw)
