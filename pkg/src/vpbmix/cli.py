"""Command-line entry point: ``vpbmix <subcommand> [--config F] [--out D] [--seed S] [--threads N]``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, defaults, parse_config, seeded_rng

FLOAT = ".17g"


def _f(x) -> str:
    return format(float(x), FLOAT)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else _f(v) for v in r])


class Outcome:
    def __init__(self) -> None:
        self.checks: dict[str, bool] = {}
        self.files: list[Path] = []

    def check(self, name: str, ok: bool) -> None:
        self.checks[name] = bool(ok)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_validity_table(rc: RunConfig, out: Path, res: Outcome) -> None:
    from .remainder_analysis import validity_time

    rows = []
    for k in rc["validity.ks"]:
        for g in rc["validity.gammas"]:
            y, T = validity_time(g, k, rc["validity.epsilon"])
            rows.append([g, k, str(y), float(y), T])
    path = out / "validity_table.csv"
    _write_csv(path, ["gamma", "k", "y_exact", "y", "T"], rows)
    res.files.append(path)
    res.check("rows", len(rows) == len(rc["validity.ks"]) * len(rc["validity.gammas"]))


def cmd_characteristics(rc: RunConfig, out: Path, res: Outcome) -> None:
    from .remainder_analysis import PotentialField, integrate_characteristics

    sp = rc.species()
    grid = rc.spatial_grid()
    x = grid.x
    phi = rc["characteristics.phi_amplitude"] * np.cos(2 * np.pi * x / grid.L_x)
    field = PotentialField.static(x, phi, grid.L_x)
    anchor = (rc["characteristics.t"], rc["characteristics.x"], np.array(rc["characteristics.v"]))
    s = rc["characteristics.species"]
    m, e = (sp.m_A, sp.e_A) if s == "A" else (sp.m_B, sp.e_B)
    tr = integrate_characteristics(field, anchor, sp, s, rc["characteristics.tau_end"], rc["characteristics.dtau"])
    E = tr.energy(field, m, e)
    back = integrate_characteristics(field, (tr.tau[-1], tr.X[-1], tr.V[-1]), sp, s, anchor[0],
                                     rc["characteristics.dtau"])
    path = out / "characteristics.csv"
    _write_csv(path, ["tau", "X", "V1", "V2", "V3", "energy"],
               [[t, X, *V, en] for t, X, V, en in zip(tr.tau, tr.X, tr.V, E)])
    res.files.append(path)
    inv = max(abs(back.X[-1] - anchor[1]), float(np.max(np.abs(back.V[-1] - anchor[2]))))
    res.check("back_and_forth", inv <= 1e-8)
    res.check("energy_drift", float(np.max(np.abs(E - E[0]))) <= 1e-6 * max(1.0, abs(E[0])))


def cmd_euler_poisson(rc: RunConfig, out: Path, res: Outcome) -> None:
    from .euler_poisson import conservation_diagnostics, ep_run
    from .kinetic_core import FluidState

    cfg = rc.ep_config()
    x = cfg.grid.x
    a = rc["ep.amplitude"]
    kx = 2 * np.pi / cfg.grid.L_x
    bg = cfg.background()
    nA = bg.n_A * (1 + a * np.cos(kx * x))
    nB = bg.n_B * (1 + a * np.cos(kx * x))
    u = np.zeros((len(x), 3))
    u[:, 0] = a * np.sin(kx * x)
    theta = (cfg.c1 + cfg.c2 * cfg.C_p ** (2 / 3)) * nA ** (2 / 3)
    fs = FluidState(nA, nB, u, theta)
    hist = ep_run(fs, cfg, dt=rc["ep.dt"])
    diag = conservation_diagnostics(hist, cfg)
    rows = []
    for i, (t, st) in enumerate(zip(hist.times, hist.states)):
        rows.append([t, st.n_A.min(), st.n_A.max(), st.n_B.min(), st.n_B.max(), st.u[:, 0].min(), st.u[:, 0].max(),
                     st.theta.min(), st.theta.max(), diag["mass_A_drift"][i], diag["mass_B_drift"][i],
                     diag["momentum_drift"][i], diag["energy_drift"][i]])
    path = out / "euler_poisson.csv"
    _write_csv(path, ["t", "n_A_min", "n_A_max", "n_B_min", "n_B_max", "u1_min", "u1_max", "theta_min",
                      "theta_max", "mass_A_drift", "mass_B_drift", "momentum_drift", "energy_drift"], rows)
    res.files.append(path)
    res.check("mass_A", float(np.max(np.abs(diag["mass_A_drift"]))) <= 1e-8 * max(1.0, cfg.t_end))
    res.check("mass_B", float(np.max(np.abs(diag["mass_B_drift"]))) <= 1e-8 * max(1.0, cfg.t_end))


def cmd_hilbert(rc: RunConfig, out: Path, res: Outcome) -> None:
    from .hilbert import (
        DiscreteClosure,
        DiscreteEulerPoisson,
        conservative_residual,
        kernel_residuals,
        perturbed_primitive,
        solve_order_l,
    )

    sp, vg, grid, kern = rc.species(), rc.velocity_grid(), rc.spatial_grid(), rc.kernel()
    U0 = perturbed_primitive(grid, rc["expansion.amplitude"])
    bg = DiscreteEulerPoisson(DiscreteClosure(sp, vg), grid).run(U0, rc["expansion.tau"], rc["expansion.t_end"])
    term = solve_order_l(1, bg, [], kern, vg, output_every=rc["expansion.output_every"])
    r = conservative_residual(term, bg, vg)
    rows = []
    for i, t in enumerate(term.times):
        sv = np.nan if np.isnan(r[i]).any() else float(np.max(np.abs(kernel_residuals(r[i], term.U0[i], sp))))
        rows.append([1, t, np.max(np.abs(term.n_A[i])), np.max(np.abs(term.n_B[i])), np.max(np.abs(term.u[i])),
                     np.max(np.abs(term.theta[i])), np.max(np.abs(term.phi[i])), sv,
                     np.max(term.diagnostics["reprojection"][i])])
    path = out / "hilbert.csv"
    _write_csv(path, ["order", "t", "n_A", "n_B", "u", "theta", "phi", "solvability", "reprojection"], rows)
    res.files.append(path)
    res.check("reprojection", float(np.max(term.diagnostics["reprojection"])) <= 1e-8)


def cmd_collision_check(rc: RunConfig, out: Path, res: Outcome) -> None:
    from .collision import (
        collision_invariant_residual,
        collision_l1,
        entropy_production,
        gram,
        kernel_basis,
        linearize,
        vector_collision,
    )
    from .kinetic_core import DistributionPair, FluidState, bi_maxwellian

    sp, vg, kern = rc.species(), rc.velocity_grid(), rc.kernel()
    rng = seeded_rng(rc)
    n = rc["check.samples"]
    F = DistributionPair(rng.uniform(0.1, 1.0, (n, vg.size)), rng.uniform(0.1, 1.0, (n, vg.size)))
    CF = vector_collision(F, kern, sp, vg)
    resid = np.abs(collision_invariant_residual(F, kern, sp, vg, CF=CF)) / collision_l1(CF, vg)
    ent = entropy_production(F, kern, sp, vg)
    fs = FluidState(1.0, 0.8, [0.2, 0.0, 0.0], 1.0)
    lin = linearize(fs, kern, sp, vg)
    basis = lin.basis
    LX = np.max(np.abs(lin.apply(basis))) / np.max(np.abs(lin.matrix))
    sym = float(np.max(np.abs(lin.Q - lin.Q.T)) / np.max(np.abs(lin.Q)))
    G = gram(basis, vg)
    ev = np.sort(lin.spectrum)
    mu = bi_maxwellian(fs, sp, vg)
    eq = float(entropy_production(mu, kern, sp, vg)[0])
    rows = [["invariant_residual_max", float(resid.max())], ["entropy_production_max", float(ent.max())],
            ["equilibrium_entropy_production", eq], ["L_kernel_defect", float(LX)], ["symmetry_defect", sym],
            ["gram_defect", float(np.max(np.abs(G - np.eye(len(G)))))],
            ["null_dimension", float(np.sum(np.abs(ev) < 1e-8 * np.abs(ev).max()))],
            ["spectral_gap", float(ev[basis.shape[0]])]]
    path = out / "collision_check.csv"
    _write_csv(path, ["quantity", "value"], rows)
    res.files.append(path)
    res.check("invariants", resid.max() <= 1e-12)
    res.check("entropy", ent.max() <= 1e-12 * np.abs(ent).max() + 1e-300)
    res.check("kernel", LX <= 1e-6)
    res.check("symmetry", sym <= 1e-10)
    res.check("null_dimension", int(rows[6][1]) == basis.shape[0])
    res.check("gap", ev[basis.shape[0]] > 0)


def cmd_sweep(rc: RunConfig, out: Path, res: Outcome) -> None:
    from .hilbert import sweep_reference
    from .kinetic_core import SpatialGrid1D, VelocityGrid
    from .vpb_sim import SimConfig, epsilon_sweep

    sp, kern = rc.species(), rc.kernel()

    vg = VelocityGrid(rc["sweep.L_v"], rc["sweep.points"], True)
    grid = SpatialGrid1D(rc["space.L_x"], rc["sweep.cells"])
    base = SimConfig(epsilon=rc["sim.epsilon"], vg=vg, grid=grid, kernel=kern, sp=sp, t_end=rc["sim.t_end"],
                     output_dt=rc["sim.output_dt"], scheme=rc["sweep.scheme"], dt=rc["sim.dt"])
    F0, F1 = sweep_reference(base, rc["sweep.amplitude"])
    sw = epsilon_sweep(base, list(rc["sweep.epsilons"]), F0, F1)
    p1, p2 = out / "sweep.csv", out / "slope.json"
    sw.write_csv(p1)
    sw.write_slope_json(p2)
    res.files += [p1, p2]
    res.check("slope_k0", 0.8 <= sw.fits[0].slope <= 1.2)
    if 1 in sw.fits:
        res.check("slope_gain_k1", sw.fits[1].slope - sw.fits[0].slope >= 0.6)


COMMANDS: dict[str, Callable[[RunConfig, Path, Outcome], None]] = {
    "collision-check": cmd_collision_check,
    "euler-poisson": cmd_euler_poisson,
    "hilbert": cmd_hilbert,
    "characteristics": cmd_characteristics,
    "validity-table": cmd_validity_table,
    "sweep": cmd_sweep,
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict[str, str]:
    import numba
    import scipy

    return {"vpbmix": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vpbmix", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, default=None, help="flat key = value configuration file")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed (overrides run.seed)")
    p.add_argument("--threads", type=int, default=None, help="worker threads for compiled kernels")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = defaults() if args.config is None else parse_config(args.config)
        if args.seed is not None:
            rc = rc.with_(run__seed=args.seed)
    except (ConfigError, OSError) as exc:
        print(json.dumps({"status": "config-error", "problems": getattr(exc, "problems", [str(exc)])}),
              file=sys.stderr)
        return 2
    if args.threads is not None:
        import numba

        if not 1 <= args.threads <= numba.config.NUMBA_NUM_THREADS:
            print(json.dumps({"status": "config-error", "problems": [f"--threads must lie in "
                                                                   f"[1, {numba.config.NUMBA_NUM_THREADS}]"]}),
                  file=sys.stderr)
            return 2
        numba.set_num_threads(args.threads)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.txt").write_text(rc.text())
    res = Outcome()
    t0 = time.perf_counter()
    error = None
    try:
        COMMANDS[args.command](rc, out, res)
    except Exception as exc:  # reported in the manifest and summary
        error = f"{type(exc).__name__}: {exc}"
    wall = time.perf_counter() - t0
    manifest = {
        "command": args.command,
        "config_sha256": rc.sha256(),
        "seed": rc["run.seed"],
        "versions": _versions(),
        "wall_time_s": wall,
        "files": {p.name: _sha256(p) for p in res.files},
        "checks": res.checks,
        "error": error,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    ok = error is None and res.ok
    summary = {"status": "ok" if ok else "failed", "command": args.command,
               "failed": [k for k, v in res.checks.items() if not v], "error": error}
    print(json.dumps(summary), file=sys.stdout if ok else sys.stderr)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
