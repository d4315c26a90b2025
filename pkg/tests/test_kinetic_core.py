import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpbmix.kinetic_core import (
    DistributionPair,
    DomainError,
    FluidState,
    SpatialGrid1D,
    SpeciesPair,
    VelocityGrid,
    bi_maxwellian,
    global_maxwellian,
    maxwellian,
    moments,
    theta_M_of,
    velocity_derivative,
    weighted_norms,
)


def test_species_validation():
    with pytest.raises(DomainError):
        SpeciesPair(m_A=1.0, m_B=2.0)
    with pytest.raises(DomainError):
        SpeciesPair(sigma_A=0.0)
    assert SpeciesPair(e_A=-1.0).e_A == -1.0


@pytest.mark.parametrize("axisym", [False, True])
def test_velocity_grid_invariants(axisym):
    vg = VelocityGrid(3.0, 7, axisym)
    assert np.all(vg.weights > 0)
    assert np.isclose(vg.weights.sum(), 6.0**3, rtol=1e-13)
    full = vg.full_nodes
    assert np.allclose(np.sort(full, axis=0), np.sort(-full, axis=0))


def test_axisymmetric_grid_matches_full_on_even_data(sp):
    full, red = VelocityGrid(4.0, 9), VelocityGrid(4.0, 9, True)
    fs = FluidState(1.0, 0.5, [0.3, 0, 0], 0.9)
    mf, mr = moments(bi_maxwellian(fs, sp, full), full, sp), moments(bi_maxwellian(fs, sp, red), red, sp)
    assert np.allclose(mf.u, mr.u, atol=1e-14)
    assert np.allclose(mf.theta, mr.theta, rtol=1e-13)
    f = np.exp(-np.sum(red.nodes**2, axis=1))
    assert np.allclose(red.expand(f)[red.rep_full_index], f)


def test_bi_maxwellian_value_at_origin():
    vg = VelocityGrid(1.0, 3)
    sp = SpeciesPair(1.0, 1.0)
    mu = bi_maxwellian(FluidState(1.0, 1.0, 0.0, 1.0), sp, vg)
    centre = np.argmin(np.linalg.norm(vg.nodes, axis=1))
    assert np.isclose(mu.F_A[0, centre], (2 * np.pi) ** -1.5)
    assert np.isclose((2 * np.pi) ** -1.5, 0.0634936, atol=1e-7)


def test_bi_maxwellian_mass_ratio(sp, vg7):
    mu = bi_maxwellian(FluidState(1.0, 1.0, 0.0, 1.0), sp, vg7)
    c = np.argmin(np.linalg.norm(vg7.nodes, axis=1))
    assert np.isclose(mu.F_A[0, c] / mu.F_B[0, c], (sp.m_A / sp.m_B) ** 1.5)


def test_bi_maxwellian_rejects_nonpositive(sp, vg5):
    with pytest.raises(DomainError):
        bi_maxwellian(FluidState(-1.0, 1.0, 0.0, 1.0), sp, vg5)
    with pytest.raises(DomainError):
        bi_maxwellian(FluidState(1.0, 1.0, 0.0, 0.0), sp, vg5)


def test_moments_round_trip_converges(sp, state):
    errs = []
    for n in (9, 13, 17):
        vg = VelocityGrid(7.0, n)
        rec = moments(bi_maxwellian(state, sp, vg), vg, sp)
        errs.append(max(abs(rec.A.n[0] - 1.0), abs(rec.B.n[0] - 0.8), np.max(np.abs(rec.u[0] - state.u[0])),
                        abs(rec.theta[0] - 1.1)))
    assert errs[-1] < 1e-6
    assert errs[0] > errs[1] > errs[2]


def test_moments_species_energy_relation(sp, state):
    vg = VelocityGrid(7.0, 17)
    rec = moments(bi_maxwellian(state, sp, vg), vg, sp)
    for s, n, m in ((rec.A, 1.0, sp.m_A), (rec.B, 0.8, sp.m_B)):
        expect = n * np.sum(state.u[0] ** 2) + 3 * n * 1.1 / m
        assert np.isclose(s.energy[0], expect, rtol=1e-5)


def test_moments_of_zero_flag_theta(sp, vg5):
    z = np.zeros((2, vg5.size))
    rec = moments(DistributionPair(z, z), vg5, sp)
    assert np.all(rec.A.n == 0)
    assert np.all(np.isnan(rec.A.theta))
    assert rec.flags


def test_moments_match_independent_summation(sp, vg5, rng):
    F = DistributionPair(rng.uniform(0.1, 1, (3, vg5.size)), rng.uniform(0.1, 1, (3, vg5.size)))
    rec = moments(F, vg5, sp)
    for x in range(3):
        nA = sum(F.F_A[x, q] * vg5.weights[q] for q in range(vg5.size))
        pB = [sum(F.F_B[x, q] * vg5.weights[q] * vg5.nodes[q, d] for q in range(vg5.size)) for d in range(3)]
        assert np.isclose(rec.A.n[x], nA, rtol=1e-14)
        assert np.allclose(rec.B.momentum[x], pB, rtol=1e-13, atol=1e-15)


def test_odd_moments_of_even_data_vanish(sp, vg7):
    mu = bi_maxwellian(FluidState(1.0, 1.0, 0.0, 1.3), sp, vg7)
    rec = moments(mu, vg7, sp)
    assert np.max(np.abs(rec.A.momentum)) < 1e-15


def test_theta_M():
    assert np.isclose(theta_M_of(1.0, SpeciesPair(2.0, 1.0)), 0.8)
    assert np.isclose(theta_M_of(1.0, SpeciesPair(1.0, 1.0)), 2.0 / 3.0)
    with pytest.raises(DomainError):
        theta_M_of(0.0, SpeciesPair())


@given(st.floats(0.01, 100), st.floats(1.0, 30.0), st.floats(0.1, 1.0))
def test_theta_M_below_theta_bar(theta, mA, mB):
    assert theta_M_of(theta, SpeciesPair(mA, mB)) <= theta


def test_global_maxwellian(sp, vg7):
    tM = theta_M_of(1.0, sp)
    mu = global_maxwellian(tM, sp, vg7)
    c = np.argmin(np.linalg.norm(vg7.nodes, axis=1))
    assert np.isclose(mu.F_A[c], (2 * np.pi * tM) ** -1.5)
    assert np.all(mu.F_A <= mu.F_B)
    with pytest.raises(DomainError):
        global_maxwellian(-1.0, sp, vg7)


def test_global_maxwellian_unit_mass_under_refinement():
    sp = SpeciesPair(1.0, 1.0)
    errs = [abs(global_maxwellian(1.0, sp, VelocityGrid(L, n)).F_A @ VelocityGrid(L, n).weights - 1.0)
            for L, n in ((4.0, 7), (6.0, 13), (8.0, 21))]
    assert errs[2] < errs[1] < errs[0]
    assert errs[2] < 1e-8


def test_weighted_norms(vg5, rng):
    one = np.ones(vg5.size)
    assert np.isclose(weighted_norms(one, vg5, 0.0)["nu"] ** 2, vg5.weights.sum())
    f = rng.normal(size=vg5.size)
    for g in (1.0, -1.0, -2.5):
        n = weighted_norms(f, vg5, g)
        assert n["nu"] <= n["l2"] * np.max(vg5.bracket ** (g / 2)) * (1 + 1e-14)
    with pytest.raises(DomainError):
        weighted_norms(f, vg5, -3.0)


def test_weighted_norms_maxwellian_refinement():
    sp = SpeciesPair(1.0, 1.0)
    vals = {}
    for L, n in ((6.0, 13), (7.0, 21), (8.0, 31)):
        vg = VelocityGrid(L, n)
        mu = maxwellian(1.0, np.zeros(3), 1.0, 1.0, vg.nodes)
        vals[n] = (weighted_norms(mu, vg, 1.0)["nu"], weighted_norms(mu, vg, -1.0)["nu"])
    assert abs(vals[21][0] - vals[31][0]) < abs(vals[13][0] - vals[31][0]) + 1e-15
    assert vals[31][0] > vals[31][1]


def test_spatial_grid():
    g = SpatialGrid1D(2 * np.pi, 8)
    assert np.isclose(g.dx, np.pi / 4)
    assert np.allclose(np.diff(g.x), g.dx)


def test_distribution_validity(vg5):
    one = np.ones(vg5.size)
    assert DistributionPair(one, one).is_valid()
    assert not DistributionPair(np.full(vg5.size, np.nan), one).is_valid()
    assert not DistributionPair(-one, one).is_valid()
    with pytest.raises(ValueError):
        DistributionPair(one, one[:-1])


@pytest.mark.parametrize("axisym", [False, True])
def test_velocity_derivative_exact_on_linear(axisym):
    vg = VelocityGrid(3.0, 7, axisym)
    D = velocity_derivative(vg)
    f = vg.nodes[:, 0] ** 2
    interior = np.abs(vg.nodes[:, 0]) < vg.L_v - vg.h
    assert np.allclose((D @ f)[interior], 2 * vg.nodes[interior, 0])


@settings(max_examples=25, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(0.2, 3.0), st.floats(-0.5, 0.5), st.floats(0.5, 2.0))
def test_maxwellian_positive(nA, nB, u, theta):
    vg = VelocityGrid(6.0, 7)
    mu = bi_maxwellian(FluidState(nA, nB, [u, 0, 0], theta), SpeciesPair(), vg)
    assert np.all(mu.F_A > 0) and np.all(mu.F_B > 0)
