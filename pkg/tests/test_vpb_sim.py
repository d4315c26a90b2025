import warnings

import numpy as np
import pytest

from vpbmix.euler_poisson import CFLError
from vpbmix.kinetic_core import (
    DistributionPair,
    DomainError,
    FluidState,
    SpatialGrid1D,
    SpeciesPair,
    VelocityGrid,
    bi_maxwellian,
    maxwellian,
)
from vpbmix.vpb_sim import (
    KineticSolver,
    NegativityError,
    SimConfig,
    check_geometric,
    entropy,
    fit_slope,
    collision_substep,
    nu_max_of,
    run,
    vpb_step,
)

# a narrow box keeps tail values, and hence the collision stiffness, moderate
VG = VelocityGrid(3.0, 5, True)
GRID = SpatialGrid1D(2 * np.pi, 4)


def uniform(fs_kw=None):
    fs = FluidState(*(fs_kw or (1.0, 0.8, [0.0, 0.0, 0.0], 1.0)))
    mu = bi_maxwellian(fs, SpeciesPair(), VG)
    return DistributionPair(np.tile(mu.F_A, (GRID.cells, 1)), np.tile(mu.F_B, (GRID.cells, 1)))


def distorted():
    # bounded relative distortion keeps the entropic form away from its stiff tail regime
    mu = uniform()
    shape = 1 + 0.3 * np.cos(1.5 * VG.nodes[:, 0])
    return DistributionPair(mu.F_A * shape, mu.F_B * shape[::-1])


def test_config_validation():
    with pytest.raises(DomainError):
        SimConfig(epsilon=0.0, vg=VG, grid=GRID)
    with pytest.raises(ValueError):
        SimConfig(epsilon=0.1, vg=VG, grid=GRID, scheme="euler")


def test_free_transport_matches_shift():
    x, v1 = GRID.x, VG.nodes[:, 0]
    base = maxwellian(1.0, np.zeros(3), 1.0, 1.0, VG.nodes)
    F = DistributionPair((1 + 0.3 * np.cos(x))[:, None] * base, np.tile(base, (GRID.cells, 1)))
    cfg = SimConfig(epsilon=1.0, vg=VG, grid=GRID, collisions=False, field=False, dt=0.05)
    out = run(cfg, F).final
    exact = (1 + 0.3 * np.cos(x[:, None] - v1[None, :] * 0.5)) * base
    assert np.allclose(out.F_A, exact, atol=1e-13)
    assert np.allclose(out.F_B, F.F_B, atol=1e-15)


def test_uniform_bimaxwellian_is_steady():
    F = uniform((1.0, 0.8, [0.3, 0.0, 0.0], 1.1))
    for scheme in ("strang", "rk4"):
        cfg = SimConfig(epsilon=0.5, vg=VG, grid=GRID, scheme=scheme, t_end=0.02, output_dt=0.02)
        r = run(cfg, F)
        assert np.max(np.abs(r.final.F_A - F.F_A)) < 1e-12 * F.F_A.max()
        assert np.max(np.abs(r.final.F_B - F.F_B)) < 1e-12 * F.F_B.max()


def test_neutral_uniform_data_has_no_field():
    solver = KineticSolver(SimConfig(epsilon=0.1, vg=VG, grid=GRID))
    sp = SpeciesPair()
    fs = FluidState(1.0, 1.0, 0.0, 1.0)
    phi, g = solver.field(uniform((1.0, 1.0, [0.0, 0.0, 0.0], 1.0)))
    assert np.all(np.abs(phi) < 1e-14) and np.all(np.abs(g) < 1e-14)
    assert sp.e_A * fs.n_A == sp.e_B * fs.n_B


def test_zero_charge_gives_zero_field():
    sp = SpeciesPair(e_A=0.0, e_B=0.0)
    cfg = SimConfig(epsilon=0.1, vg=VG, grid=GRID, sp=sp)
    F = uniform()
    F = DistributionPair((1 + 0.2 * np.sin(GRID.x))[:, None] * F.F_A, F.F_B)
    phi, g = KineticSolver(cfg).field(F)
    assert not np.any(phi) and not np.any(g)


def test_mass_and_entropy_homogeneous_relaxation():
    cfg = SimConfig(epsilon=1.0, vg=VG, grid=GRID, t_end=0.06, output_dt=0.02, dt=0.02)
    r = run(cfg, distorted())
    dA, dB = r.mass_drift
    assert np.max(np.abs(dA)) < 1e-12 and np.max(np.abs(dB)) < 1e-12
    assert np.all(np.diff(r.entropy) <= 1e-12 * abs(r.entropy[0]))
    assert r.entropy[-1] < r.entropy[0]


def test_mass_with_field_under_step_halving():
    sp = SpeciesPair()
    F = uniform()
    F = DistributionPair((1 + 0.1 * np.cos(GRID.x))[:, None] * F.F_A, F.F_B)
    drift = []
    for dt in (0.02, 0.01):
        cfg = SimConfig(epsilon=1.0, vg=VG, grid=GRID, sp=sp, t_end=0.04, output_dt=0.02, dt=dt)
        dA, dB = run(cfg, F).mass_drift
        drift.append(max(np.abs(dA).max(), np.abs(dB).max()))
    assert drift[1] <= drift[0] + 1e-12
    assert drift[1] < 1e-3


def test_collision_substep_respects_stiffness():
    cfg = SimConfig(epsilon=0.3, vg=VG, grid=GRID)
    solver = KineticSolver(cfg)
    F = distorted()
    h = collision_substep(F, cfg, solver)
    assert h * solver.collision_radius(F) / cfg.epsilon <= 1.6 * (1 + 1e-12)
    assert h * nu_max_of(F, cfg) / cfg.epsilon <= 0.1 * (1 + 1e-12)
    # the radius exceeds the collision frequency, so stability is the binding limit
    assert solver.collision_radius(F) > nu_max_of(F, cfg)


def test_deterministic():
    cfg = SimConfig(epsilon=1.0, vg=VG, grid=GRID, t_end=0.02, output_dt=0.02, dt=0.02)
    F = uniform()
    F = DistributionPair((1 + 0.1 * np.cos(GRID.x))[:, None] * F.F_A, F.F_B)
    a, b = run(cfg, F).final, run(cfg, F).final
    assert np.array_equal(a.F_A, b.F_A) and np.array_equal(a.F_B, b.F_B)


def test_rk4_step_bound():
    cfg = SimConfig(epsilon=0.01, vg=VG, grid=GRID, scheme="rk4")
    solver = KineticSolver(cfg)
    assert solver.stiffness(uniform()) > solver.collision_radius(uniform()) / cfg.epsilon
    with pytest.raises(CFLError):
        vpb_step(uniform(), cfg, dt=1.0)
    with pytest.raises(ValueError):
        vpb_step(uniform(), cfg.with_(scheme="strang"))


def test_negativity_clip_and_abort():
    cfg = SimConfig(epsilon=0.1, vg=VG, grid=GRID, tol_neg=1e-3)
    solver = KineticSolver(cfg)
    F = uniform()
    A = F.F_A.copy()
    A[0, 0] = -1e-5 * A.max()
    out = solver.clip(DistributionPair(A, F.F_B))
    assert out.F_A.min() >= 0 and solver.clip_defect > 0
    A[0, 0] = -1e-2 * A.max()
    with pytest.raises(NegativityError):
        solver.clip(DistributionPair(A, F.F_B))


def test_entropy_of_zero_is_zero():
    z = np.zeros((GRID.cells, VG.size))
    assert entropy(DistributionPair(z, z), VG, GRID) == 0.0


def test_validity_warning():
    cfg = SimConfig(epsilon=0.5, vg=VG, grid=GRID, collisions=False, field=False, t_end=2.0, output_dt=1.0)
    with pytest.warns(UserWarning, match="validity time"):
        run(cfg, uniform())
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        run(cfg.with_(t_end=1.0), uniform())


def test_run_rejects_bad_output_grid():
    cfg = SimConfig(epsilon=0.5, vg=VG, grid=GRID, t_end=0.12, output_dt=0.05)
    with pytest.raises(ValueError):
        run(cfg, uniform())


def test_fit_slope_synthetic():
    eps = 0.2 / 2.0 ** np.arange(4)
    fit = fit_slope(eps, 3.0 * eps**2)
    assert np.isclose(fit.slope, 2.0) and fit.residual < 1e-12
    noisy = 3.0 * eps * np.array([1.0, 1.05, 0.97, 1.02])
    fit = fit_slope(eps, noisy)
    assert fit.ci_low < fit.slope < fit.ci_high and fit.ci_low < 1.0 < fit.ci_high


def test_check_geometric():
    check_geometric([0.2, 0.1, 0.05])
    with pytest.raises(ValueError):
        check_geometric([0.2, 0.1, 0.04])
    with pytest.raises(ValueError):
        check_geometric([0.2, 0.1])
