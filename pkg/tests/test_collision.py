import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.interpolate import RegularGridInterpolator

from vpbmix.collision import (
    AngularGrid,
    CollisionKernel,
    SolvabilityError,
    _radial_mean,
    collision_frequency,
    collision_frequency_exact,
    collision_invariant_residual,
    collision_l1,
    entropy_production,
    gram,
    kernel_basis,
    linearize,
    macro_project,
    post_collision,
    q_bilinear,
    solve_L_inverse,
    stacked_weights,
    vector_collision,
)
from vpbmix.kinetic_core import DistributionPair, DomainError, FluidState, SpeciesPair, VelocityGrid, bi_maxwellian

vec3 = st.lists(st.floats(-5, 5), min_size=3, max_size=3).map(np.array)


def unit(v):
    return v / np.linalg.norm(v)


@settings(max_examples=200)
@given(vec3, vec3, vec3.filter(lambda w: np.linalg.norm(w) > 1e-3), st.floats(0.1, 10), st.floats(0.1, 10))
def test_post_collision_conserves(v, vs, w, ma, mb):
    om = unit(w)
    vp, vsp = post_collision(v, vs, om, ma, mb)
    scale = 1 + np.sum(v**2) + np.sum(vs**2)
    assert np.allclose(ma * vp + mb * vsp, ma * v + mb * vs, atol=1e-12 * scale * (ma + mb))
    e0 = ma * np.sum(v**2) + mb * np.sum(vs**2)
    assert abs(ma * np.sum(vp**2) + mb * np.sum(vsp**2) - e0) <= 1e-11 * scale * (ma + mb)


def test_post_collision_special_cases():
    v, vs = np.array([1.0, 2.0, 0.0]), np.array([-1.0, 0.5, 3.0])
    om = unit(v - vs)
    vp, vsp = post_collision(v, vs, om, 1.0, 1.0)
    a = (v - vs) @ om
    assert np.allclose(vp, v - a * om) and np.allclose(vsp, vs + a * om)
    perp = unit(np.cross(v - vs, [0.0, 0.0, 1.0]))
    vp, vsp = post_collision(v, vs, perp, 1.0, 2.0)
    assert np.allclose(vp, v) and np.allclose(vsp, vs)
    with pytest.raises(DomainError):
        post_collision(v, vs, np.array([1.0, 1.0, 0.0]), 1.0, 1.0)


def test_post_collision_against_conservation_solver():
    # head-on collision along e_1: solve the two conservation laws for the nontrivial root
    ma, mb = 2, 1
    a, b = sympy.symbols("a b")
    sols = sympy.solve([ma * a + mb * b - ma * 1, ma * a**2 + mb * b**2 - ma * 1], [a, b])
    nontrivial = [s for s in sols if s != (1, 0)][0]
    vp, vsp = post_collision([1.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0], ma, mb)
    assert np.isclose(vp[0], float(nontrivial[0])) and np.isclose(vsp[0], float(nontrivial[1]))
    assert np.isclose(vp[0], 1.0 / 3.0)


def test_angular_grid():
    ag = AngularGrid.lebedev26()
    assert ag.count == 26 and np.all(ag.weights > 0)
    assert np.isclose(ag.weights.sum(), 4 * np.pi)
    x, y, z = ag.nodes.T
    assert np.isclose(ag.weights @ (x**2 * y**2 * z**2), 4 * np.pi / 105)
    assert np.isclose(ag.weights @ (x**4), 4 * np.pi / 5)
    assert np.isclose(ag.weights @ (x**3 * y), 0.0, atol=1e-15)
    assert np.allclose(np.sort(ag.nodes, axis=0), np.sort(-ag.nodes, axis=0))


def test_kernel_validation():
    with pytest.raises(DomainError):
        CollisionKernel(gamma=-3.0)
    with pytest.raises(DomainError):
        CollisionKernel(C_phi=((1.0, 2.0), (1.0, 1.0)))
    with pytest.raises(DomainError):
        CollisionKernel(b_power=0.5)
    k = CollisionKernel()
    c = np.linspace(-1, 1, 11)
    assert np.all(k.b(c) <= k.C_b * np.abs(c) + 1e-15)


def _brute_force_q(Fa, Fb, kernel, alpha, beta, vg, sp):
    """Strong-form gain minus loss summed in a different order, full sphere, scipy interpolation."""
    ag = AngularGrid.lebedev26()
    ax = vg.axis
    n = vg.points
    Ia = RegularGridInterpolator((ax, ax, ax), Fa.reshape(n, n, n), bounds_error=False, fill_value=None)
    Ib = RegularGridInterpolator((ax, ax, ax), Fb.reshape(n, n, n), bounds_error=False, fill_value=None)
    ma, mb = sp.masses[alpha], sp.masses[beta]
    c = kernel.table[alpha, beta] * sp.cross_section()[alpha, beta]
    v = vg.nodes
    out = np.zeros(vg.size)
    for om, wo in zip(ag.nodes, ag.weights):
        for j in range(vg.size):
            g = v - v[j]
            gn = np.linalg.norm(g, axis=1)
            ok = gn > 0
            vp, vsp = post_collision(v[ok], np.broadcast_to(v[j], v[ok].shape), np.broadcast_to(om, v[ok].shape), ma, mb)
            inside = (np.max(np.abs(vp), axis=1) <= vg.L_v) & (np.max(np.abs(vsp), axis=1) <= vg.L_v)
            a = g[ok] @ om
            B = c * gn[ok] ** kernel.gamma * kernel.b(a / gn[ok])
            term = np.where(inside, Ia(vp) * Ib(vsp) - Fa[ok] * Fb[j], 0.0)
            out[ok] += vg.weights[j] * wo * B * term
    return out


def test_q_bilinear_matches_brute_force(rng):
    vg, sp, kern = VelocityGrid(3.0, 5), SpeciesPair(), CollisionKernel(gamma=0.5)
    Fa, Fb = rng.uniform(0.1, 1.0, vg.size), rng.uniform(0.1, 1.0, vg.size)
    for a, b in ((0, 1), (1, 1)):
        fast = q_bilinear(Fa, Fb, kern, a, b, vg, sp)
        slow = _brute_force_q(Fa, Fb, kern, a, b, vg, sp)
        assert np.allclose(fast, slow, rtol=1e-11, atol=1e-12 * np.abs(slow).max())


def test_q_bilinear_zero_and_bilinear(vg5, sp, hard_spheres, rng):
    F1, F2, G = (rng.uniform(0.1, 1, vg5.size) for _ in range(3))
    assert np.all(q_bilinear(F1, np.zeros(vg5.size), hard_spheres, 0, 1, vg5, sp) == 0.0)
    lhs = q_bilinear(2.0 * F1 - 3.0 * F2, G, hard_spheres, 0, 1, vg5, sp)
    rhs = 2.0 * q_bilinear(F1, G, hard_spheres, 0, 1, vg5, sp) - 3.0 * q_bilinear(F2, G, hard_spheres, 0, 1, vg5, sp)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-13 * np.abs(rhs).max())


def test_q_bilinear_rejects_mismatch(vg5, sp, hard_spheres):
    with pytest.raises(ValueError):
        q_bilinear(np.ones(vg5.size), np.ones(vg5.size + 1), hard_spheres, 0, 0, vg5, sp)


def test_strong_form_maxwellian_defect_shrinks(sp, hard_spheres):
    fs = FluidState(1.0, 1.0, 0.0, 1.0)
    defect = []
    for n in (7, 9, 11):
        vg = VelocityGrid(4.5, n)
        mu = bi_maxwellian(fs, sp, vg)
        Q = q_bilinear(mu.F_A[0], mu.F_B[0], hard_spheres, 0, 1, vg, sp, interp="triquadratic")
        defect.append(np.abs(Q) @ vg.weights)
    assert defect[2] < defect[0]


def test_single_species_limit(vg5, sp, hard_spheres, rng):
    FA = rng.uniform(0.1, 1, vg5.size)
    C = vector_collision(DistributionPair(FA, np.zeros(vg5.size)), hard_spheres, sp, vg5, form="strong")
    assert np.allclose(C.F_A, q_bilinear(FA, FA, hard_spheres, 0, 0, vg5, sp))
    assert np.all(C.F_B == 0)


@pytest.mark.parametrize("u", [0.0, 0.4])
def test_entropic_bi_maxwellian_is_equilibrium(vg7, sp, hard_spheres, u):
    mu = bi_maxwellian(FluidState(1.0, 0.6, [u, -0.2, 0.1], 1.2), sp, vg7)
    C = vector_collision(mu, hard_spheres, sp, vg7)
    loss_scale = np.max(mu.F_A) * 10
    assert np.max(np.abs(C.F_A)) < 1e-12 * loss_scale
    assert np.max(np.abs(C.F_B)) < 1e-12 * loss_scale


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1.0, 0.0, -1.0, -2.0]))
def test_entropic_invariants_and_h_theorem(seed, gamma):
    vg, sp = VelocityGrid(4.0, 5), SpeciesPair()
    kern = CollisionKernel(gamma=gamma)
    r = np.random.default_rng(seed)
    F = DistributionPair(r.uniform(0.05, 1, vg.size), r.uniform(0.05, 1, vg.size))
    CF = vector_collision(F, kern, sp, vg)
    res = collision_invariant_residual(F, kern, sp, vg, CF=CF)
    assert np.max(np.abs(res)) <= 1e-12 * collision_l1(CF, vg)
    assert entropy_production(F, kern, sp, vg) <= 1e-12 * collision_l1(CF, vg) * 10


def test_entropy_production_sign_cases(vg7, sp, hard_spheres):
    fs = FluidState(1.0, 0.7, [0.3, 0, 0], 1.0)
    mu = bi_maxwellian(fs, sp, vg7)
    scale = collision_l1(vector_collision(mu, hard_spheres, sp, vg7, form="strong"), vg7)
    assert abs(entropy_production(mu, hard_spheres, sp, vg7)) < 1e-12 * max(scale, 1.0)
    bump = mu.F_A.copy()
    bump[0, np.argmin(np.linalg.norm(vg7.nodes - 0.5, axis=1))] *= 1.1
    assert entropy_production(DistributionPair(bump, mu.F_B), hard_spheres, sp, vg7) < -1e-8
    hot = bi_maxwellian(FluidState(1.0, 0.7, 0.0, 1.5), sp, vg7)
    cold = bi_maxwellian(FluidState(1.0, 0.7, 0.0, 1.0), sp, vg7)
    assert entropy_production(DistributionPair(hot.F_A, cold.F_B), hard_spheres, sp, vg7) < -1e-6
    with pytest.raises(DomainError):
        entropy_production(DistributionPair(-mu.F_A, mu.F_B), hard_spheres, sp, vg7)


@pytest.mark.parametrize("gamma", [1.0, 0.5, -0.5, -1.5])
@pytest.mark.parametrize("r", [0.0, 0.7, 2.5])
def test_radial_mean_against_quadrature(gamma, r):
    m, th = 1.875, 1.3
    s2 = th / m

    def integrand(s, c):
        d2 = r * r + s * s - 2 * r * s * c
        return s**gamma * (2 * np.pi * s2) ** -1.5 * np.exp(-d2 / (2 * s2)) * 2 * np.pi * s * s

    ref, _ = integrate.dblquad(integrand, -1, 1, 0, 12, epsabs=1e-12, epsrel=1e-10)
    got = _radial_mean(np.array([[r, 0.0, 0.0]]), np.zeros(3), th, m, gamma)[0]
    assert np.isclose(got, ref, rtol=1e-7)


def test_frequency_gamma_zero_constant(sp):
    kern = CollisionKernel(gamma=0.0)
    fs = FluidState(1.2, 0.5, 0.0, 1.0)
    nuA, nuB = collision_frequency_exact(np.random.default_rng(0).normal(size=(20, 3)), kern, sp, fs)
    expect = kern.angular_integral() * (1.2 * kern.table[0, 0] + 0.5 * kern.table[0, 1])
    assert np.allclose(nuA, expect)
    vg = VelocityGrid(6.0, 13)
    fr = collision_frequency(kern, sp, fs, vg)
    # the grid rule drops the coincident node; add it back to recover the constant
    mu = bi_maxwellian(fs, sp, vg)
    dropped = kern.angular_integral() * vg.weights * (kern.table[0, 0] * mu.F_A[0] + kern.table[0, 1] * mu.F_B[0])
    centre = np.linalg.norm(vg.nodes, axis=1) < 3
    assert np.allclose((fr.nu_A + dropped)[centre], expect, rtol=1e-4)


def test_frequency_hard_sphere_asymptotics(sp, hard_spheres):
    fs = FluidState(1.0, 1.0, 0.0, 1.0)
    speeds = np.array([20.0, 40.0, 80.0])
    nuA, _ = collision_frequency_exact(np.outer(speeds, [1.0, 0, 0]), hard_spheres, sp, fs)
    ratio = nuA / speeds
    limit = hard_spheres.angular_integral() * 2.0
    assert abs(ratio[2] - limit) < abs(ratio[0] - limit)
    assert np.isclose(ratio[2], limit, rtol=1e-3)


@pytest.mark.parametrize("gamma", [1.0, 0.0, -1.0, -2.0])
def test_frequency_bounds_positive(sp, gamma):
    fr = collision_frequency(CollisionKernel(gamma=gamma), sp, FluidState(1.0, 1.0, 0.0, 1.0), VelocityGrid(4.5, 7))
    assert 0 < fr.c_low <= fr.c_high


@pytest.fixture(scope="module")
def lin():
    return linearize(FluidState(1.0, 0.8, [0.2, 0.0, 0.0], 1.0), CollisionKernel(), SpeciesPair(), VelocityGrid(4.0, 5))


def test_linearized_kernel_symmetry_psd(lin, rng):
    assert np.max(np.abs(lin.apply(lin.basis))) < 1e-10 * np.max(np.abs(lin.matrix))
    assert np.max(np.abs(lin.apply(lin.formula_basis))) < 1e-10 * np.max(np.abs(lin.matrix))
    f, g = rng.normal(size=(2, 2 * lin.vg.size))
    assert abs(lin.inner(lin.apply(f), g) - lin.inner(f, lin.apply(g))) < 1e-12 * np.max(np.abs(lin.Q)) * 100
    for _ in range(100):
        h = rng.normal(size=2 * lin.vg.size)
        assert lin.inner(lin.apply(h), h) >= -1e-12 * np.max(np.abs(lin.Q)) * lin.inner(h, h)
    ev = np.sort(lin.spectrum)
    assert lin.null_gap() > 1e8
    assert np.sum(np.abs(ev) < 1e-9 * ev[-1]) == 6


def test_linearization_matches_finite_difference(lin, rng):
    sp, vg, kern = lin.sp, lin.vg, lin.kernel
    mu = bi_maxwellian(lin.state, sp, vg)
    sq = np.sqrt(np.concatenate([mu.F_A[0], mu.F_B[0]]))
    # relative perturbation mu * phi keeps the logarithms of the tail nodes finite
    g = sq * rng.normal(size=2 * vg.size)
    errs = []
    for h in (1e-3, 5e-4):
        d = DistributionPair.from_stacked(h * sq * g)
        plus = vector_collision(mu + d, kern, sp, vg).stacked()[0]
        minus = vector_collision(mu - d, kern, sp, vg).stacked()[0]
        fd = -(plus - minus) / (2 * h) / sq
        errs.append(np.max(np.abs(fd - lin.apply(g))) / np.max(np.abs(lin.apply(g))))
    assert errs[1] < errs[0] / 3
    assert errs[1] < 1e-4


def test_nu_and_K(lin):
    assert np.allclose(lin.K + np.diag(lin.nu), lin.matrix)
    assert np.all(lin.nu > 0)


def test_kernel_basis_gram_and_parity(sp):
    fs = FluidState(1.0, 0.8, 0.0, 1.0)
    vg = VelocityGrid(7.0, 25)
    X = kernel_basis(fs, sp, vg)
    assert np.max(np.abs(gram(X, vg) - np.eye(6))) < 1e-6
    flip = np.array([int(np.argmin(np.linalg.norm(vg.nodes + v, axis=1))) for v in vg.nodes])
    idx = np.concatenate([flip, flip + vg.size])
    for j in (2, 3, 4):
        assert np.allclose(X[j][idx], -X[j], atol=1e-14)
    for j in (0, 1, 5):
        assert np.allclose(X[j][idx], X[j], atol=1e-14)


def test_kernel_basis_gram_refines(sp):
    fs = FluidState(1.0, 0.8, [0.2, 0, 0], 1.0)
    errs = [np.max(np.abs(gram(kernel_basis(fs, sp, VelocityGrid(L, n)), VelocityGrid(L, n)) - np.eye(6)))
            for L, n in ((4.0, 7), (5.5, 13), (7.0, 25))]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_macro_project_properties(seed):
    vg = VelocityGrid(4.0, 5)
    lin_basis = _basis_cache(vg)
    g = np.random.default_rng(seed).normal(size=2 * vg.size)
    Pg, r = macro_project(g, lin_basis, vg)
    D = stacked_weights(vg)
    assert np.allclose(macro_project(Pg, lin_basis, vg)[0], Pg, atol=1e-12 * np.abs(g).max())
    assert np.allclose((r * D) @ lin_basis.T, 0.0, atol=1e-12 * np.abs(g).max())
    assert np.isclose(D @ g**2, D @ Pg**2 + D @ r**2, rtol=1e-12)


_BASES: dict = {}


def _basis_cache(vg):
    if vg not in _BASES:
        _BASES[vg] = linearize(FluidState(1.0, 0.8, 0.0, 1.0), CollisionKernel(), SpeciesPair(), vg).basis
    return _BASES[vg]


def test_macro_project_basis_element(lin):
    Pg, r = lin.project(lin.basis[3])
    assert np.allclose(Pg, lin.basis[3]) and np.max(np.abs(r)) < 1e-13


def test_solve_L_inverse(lin, rng):
    f = rng.normal(size=2 * lin.vg.size)
    _, f_mic = lin.project(f)
    g = solve_L_inverse(lin, lin.apply(f_mic))
    assert np.allclose(g, f_mic, atol=1e-8 * np.abs(f_mic).max())
    _, rbar = lin.project(rng.normal(size=2 * lin.vg.size))
    g = solve_L_inverse(lin, rbar)
    D = lin.D
    assert np.sqrt(D @ (lin.apply(g) - rbar) ** 2) <= 1e-8 * np.sqrt(D @ rbar**2)
    with pytest.raises(SolvabilityError) as exc:
        solve_L_inverse(lin, lin.basis[0])
    assert exc.value.residuals.shape == (6,)
