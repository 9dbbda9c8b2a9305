"""Experiment runner: JSON-configured, deterministic, CSV/JSON outputs.

Exit codes: 0 success, 2 configuration error, 3 a certified numerical
verdict failed, 4 internal solver failure.  Outputs are byte-identical for
identical (config, seed) pairs; every report row carries the config hash.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .lattice import LatticeDomain, PeriodicDeformation
from .mesh import (
    AtomisticMesh,
    RegionDecomposition,
    dump_mesh_csv,
    graded_block_mesh,
)
from .potentials import (
    PairPotential1D,
    harmonic_nn_diag_potential,
    harmonic_nn_potential,
    harmonic_scalar,
    morse_nn_diag_potential,
    quartic_scalar,
)
from .energy import (
    AtomisticEnergy,
    BondSplitInterface,
    CoupledEnergy,
    CutoutAsInterface,
    GCCInterface,
    NullPlaquetteTwist,
    QnlEnergy1D,
)
from .fields import random_smooth_deformation_2d, row_pinned_deformation_2d
from .consistency import (
    coarsening_check,
    counterexample_functional,
    dual_norm,
    model_error,
    modelling_error_lhs,
    qce_sharpness_1d,
    qnl_consistency_1d,
)
from .patch_test import default_strain_samples, patch_test_verdict
from .stress import dump_stress_csv, representation_residual, sigma_atomistic, \
    sigma_coupled
from .mesh import bond_density_residual, triangle_area2


class ConfigError(ValueError):
    pass


SCHEMA_VERSION = 1

_ALLOWED_KEYS = {
    "bond-density": {"trials", "max_span", "max_offset"},
    "patch-test": {"dimension", "N", "potential", "coupling", "region", "K"},
    "stress": {"N", "potential", "coupling", "region", "amplitude"},
    "consistency-2d": {"N", "potential", "coupling", "region", "p_values",
                       "n_fields", "amplitude"},
    "consistency-1d": {"N_values", "K_divisor", "potential", "p_values",
                       "strain", "amplitude"},
    "counterexample": {"N", "kind", "beta_values", "amplitude"},
    "coarsen": {"N_values", "fine_halfwidth", "potential", "region"},
}
_COMMON_KEYS = {"schema_version", "subcommand", "seed"}


def _config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path, subcommand):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config: {err}") from err
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    sub = cfg.get("subcommand", subcommand)
    if sub != subcommand:
        raise ConfigError(f"config is for subcommand {sub!r}, not {subcommand!r}")
    allowed = _ALLOWED_KEYS[subcommand] | _COMMON_KEYS
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def make_potential(spec, d):
    spec = dict(spec or {})
    name = spec.pop("name", None)
    if d == 2:
        if name == "harmonic_nn":
            return harmonic_nn_potential(d=2, **spec)
        if name in (None, "harmonic_nn_diag"):
            return harmonic_nn_diag_potential(**spec)
        if name == "morse_nn_diag":
            return morse_nn_diag_potential(**spec)
    else:
        if name in (None, "harmonic_quartic"):
            a1 = spec.pop("k1", 1.0)
            a2 = spec.pop("a2", 0.4)
            b2 = spec.pop("b2", 0.08)
            if spec:
                raise ConfigError(f"unknown potential params {sorted(spec)}")
            return PairPotential1D(harmonic_scalar(a1), quartic_scalar(a2, b2))
    raise ConfigError(f"unknown potential {name!r} for dimension {d}")


def make_region(mesh, stencil, spec):
    spec = dict(spec or {})
    core = int(spec.pop("core_halfwidth", 2))
    layers = int(spec.pop("interface_layers", 2))
    if spec:
        raise ConfigError(f"unknown region params {sorted(spec)}")
    return RegionDecomposition.from_block(mesh, stencil, core, layers)


def make_coupling(name, V, decomp, params):
    params = dict(params or {})
    if name in (None, "bond_split"):
        iface = BondSplitInterface(V, decomp)
    elif name == "bond_split_twist":
        cell = tuple(params.pop("cell", (decomp.mesh.domain.N // 2, 0)))
        vec = tuple(params.pop("vec", (0.15, -0.1)))
        iface = NullPlaquetteTwist(BondSplitInterface(V, decomp), cell, vec)
    elif name == "cutout":
        hw = int(params.pop("halfwidth", 3))
        idx = decomp.mesh.domain.index_grid()
        mask = np.max(np.abs(idx), axis=-1) <= hw
        iface = CutoutAsInterface(V, decomp, mask)
    elif name == "gcc":
        ring = int(params.pop("ring_offset", 1))
        ax = decomp.mesh.domain.axis_indexes()
        ix, iy = np.meshgrid(ax, ax, indexing="ij")
        core = _core_halfwidth_of(decomp)
        mask = np.maximum(np.abs(ix), np.abs(iy)) == core + ring
        sites = [tuple(s) for s in np.argwhere(mask)]
        iface = GCCInterface(V, decomp, sites)
    else:
        raise ConfigError(f"unknown coupling {name!r}")
    if params:
        raise ConfigError(f"unknown coupling params {sorted(params)}")
    return iface


def _core_halfwidth_of(decomp):
    from .mesh import A_LBL
    cells = np.argwhere(decomp.labels[0] == A_LBL)
    if cells.size == 0:
        return 0
    ax = decomp.mesh.domain.axis_indexes()
    return int(max(max(abs(ax[c[0]]), abs(ax[c[0]] + 1),
                       abs(ax[c[1]]), abs(ax[c[1]] + 1)) for c in cells))


def _write_report(outdir, rows, fieldnames):
    with open(outdir / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for row in rows:
            w.writerow(row)


def _write_summary(outdir, summary):
    with open(outdir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(x):
    return f"{x:.16e}"


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def run_bond_density(cfg, outdir, rng, quiet):
    trials = int(cfg.get("trials", 100))
    span = int(cfg.get("max_span", 5))
    reach = int(cfg.get("max_offset", 3))
    h = _config_hash(cfg)
    rows = []
    worst = 0.0
    for t in range(trials):
        while True:
            tri = rng.integers(-span, span + 1, size=(3, 2))
            if triangle_area2([tuple(v) for v in tri]) != 0:
                break
        while True:
            r = rng.integers(-reach, reach + 1, size=2)
            if r.any():
                break
        resid = bond_density_residual(tri, r)
        worst = max(worst, resid)
        rows.append({"config": h, "trial": t,
                     "triangle": " ".join(map(str, tri.reshape(-1))),
                     "offset": f"{r[0]} {r[1]}", "residual": _fmt(resid)})
    _write_report(outdir, rows, ["config", "trial", "triangle", "offset",
                                 "residual"])
    ok = worst <= 1e-12
    _write_summary(outdir, {"config": h, "trials": trials,
                            "max_residual": worst, "pass": ok})
    if not quiet:
        print(f"bond-density: {trials} trials, max residual {worst:.3e}")
    return 0 if ok else 3


def _setup_2d(cfg):
    N = int(cfg.get("N", 8))
    dom = LatticeDomain(2, N)
    mesh = AtomisticMesh(dom)
    V = make_potential(cfg.get("potential"), 2)
    decomp = make_region(mesh, V.stencil, cfg.get("region"))
    coupling_spec = dict(cfg.get("coupling") or {})
    name = coupling_spec.pop("name", None)
    iface = make_coupling(name, V, decomp, coupling_spec)
    return dom, mesh, V, decomp, iface


def run_patch_test(cfg, outdir, rng, quiet):
    h = _config_hash(cfg)
    if int(cfg.get("dimension", 2)) == 1:
        N = int(cfg.get("N", 64))
        dom = LatticeDomain(1, N)
        pair = make_potential(cfg.get("potential"), 1)
        K = int(cfg.get("K", N // 4))
        E = QnlEnergy1D(pair, dom, K)
        report = patch_test_verdict(E, pair)
    else:
        dom, mesh, V, decomp, iface = _setup_2d(cfg)
        E = CoupledEnergy(V, iface, decomp, validate=False)
        report = patch_test_verdict(E, V)
    rows = [{"config": h, **{k: (_fmt(v) if isinstance(v, float) else v)
                             for k, v in row.items()}}
            for row in report.rows()]
    _write_report(outdir, rows, ["config", "strain", "ghost_force",
                                 "energy_residual", "tolerance"])
    _write_summary(outdir, {"config": h, "consistent": report.consistent,
                            "energy_consistent": report.energy_consistent})
    if not quiet:
        print(report.text())
    return 0


def run_stress(cfg, outdir, rng, quiet):
    h = _config_hash(cfg)
    dom, mesh, V, decomp, iface = _setup_2d(cfg)
    decomp.validate()
    E_ac = CoupledEnergy(V, iface, decomp, validate=False)
    E_at = AtomisticEnergy(V, dom)
    amp = float(cfg.get("amplitude", 0.02))
    y, _ = random_smooth_deformation_2d(dom, rng, strain_scale=0.05, amp=amp)
    sig_a = sigma_atomistic(V, y, mesh)
    sig_ac = sigma_coupled(V, iface, y, decomp)
    fields = outdir / "fields"
    fields.mkdir(exist_ok=True)
    dump_stress_csv(sig_a, fields / "sigma_atomistic.csv")
    dump_stress_csv(sig_ac, fields / "sigma_coupled.csv")
    dump_mesh_csv(mesh, decomp, fields / "mesh.csv")
    rows = []
    worst = 0.0
    from .lattice import random_displacement
    for t in range(5):
        z = PeriodicDeformation(0.1 * rng.standard_normal((2, 2)),
                                random_displacement(dom, rng=rng, amplitude=0.3))
        ra, sa = representation_residual(E_at, y, z, sig_a, mesh)
        rc, sc = representation_residual(E_ac, y, z, sig_ac, mesh)
        rel_a = ra / (1 + sa)
        rel_c = rc / (1 + sc)
        worst = max(worst, rel_a, rel_c)
        rows.append({"config": h, "trial": t, "atomistic": _fmt(rel_a),
                     "coupled": _fmt(rel_c)})
    _write_report(outdir, rows, ["config", "trial", "atomistic", "coupled"])
    ok = worst <= 1e-10
    _write_summary(outdir, {"config": h, "max_relative_residual": worst,
                            "pass": ok})
    if not quiet:
        print(f"stress representation: worst relative residual {worst:.3e}")
    return 0 if ok else 3


def run_consistency_2d(cfg, outdir, rng, quiet):
    h = _config_hash(cfg)
    dom, mesh, V, decomp, iface = _setup_2d(cfg)
    decomp.validate()
    p_values = cfg.get("p_values", [2])
    n_fields = int(cfg.get("n_fields", 3))
    amp = float(cfg.get("amplitude", 0.02))
    from .corrector import CorrectorMap
    from .mesh import NeighborhoodTables
    psi_map = CorrectorMap(V, iface, decomp)
    tables = NeighborhoodTables(mesh, V.stencil)
    rows = []
    all_ok = True
    for t in range(n_fields):
        y, _ = random_smooth_deformation_2d(dom, rng, strain_scale=0.04, amp=amp)
        for p in p_values:
            p_num = np.inf if p in ("inf", "Infinity") else float(p)
            rep = model_error(V, iface, decomp, y, p_num,
                              psi_map=psi_map, tables=tables)
            all_ok &= rep.verdict and rep.elementwise_ok
            lhs = rep.lhs.value if rep.lhs.exact else rep.lhs.upper
            rows.append({"config": h, "N": dom.N, "field": t, "p": str(p),
                         "lhs": _fmt(lhs), "rhs": _fmt(rep.rhs),
                         "elementwise_ok": rep.elementwise_ok,
                         "verdict": rep.verdict})
    _write_report(outdir, rows, ["config", "N", "field", "p", "lhs", "rhs",
                                 "elementwise_ok", "verdict"])
    _write_summary(outdir, {"config": h, "pass": bool(all_ok)})
    if not quiet:
        print(f"consistency-2d: certified on {n_fields} fields: {all_ok}")
    return 0 if all_ok else 3


def run_consistency_1d(cfg, outdir, rng, quiet):
    h = _config_hash(cfg)
    pair = make_potential(cfg.get("potential"), 1)
    N_values = [int(n) for n in cfg.get("N_values", [32, 64, 128, 256])]
    divisor = int(cfg.get("K_divisor", 4))
    p_values = cfg.get("p_values", [1, 2, "inf"])
    A = float(cfg.get("strain", 1.15))
    amp = float(cfg.get("amplitude", 0.06))
    rows = []
    all_ok = True
    for N in N_values:
        dom = LatticeDomain(1, N)
        K = N // divisor
        from .fields import smooth_deformation_1d
        y = smooth_deformation_1d(dom, A, amp, 0.5 * amp, phase=0.6)
        for p in p_values:
            p_num = np.inf if p in ("inf", "Infinity") else float(p)
            rep = qnl_consistency_1d(pair, dom, y, K, p_num)
            sharp = qce_sharpness_1d(pair, dom, A, K, p_num)
            all_ok &= rep.verdict and sharp.bracket
            rows.append({
                "config": h, "N": N, "K": K, "p": str(p),
                "qnl_lhs": _fmt(rep.lhs), "qnl_rhs": _fmt(rep.rhs),
                "qnl_ok": rep.verdict,
                "ghost_norm": _fmt(sharp.exact_norm),
                "ghost_lower": _fmt(sharp.proof_value),
                "sharp_ok": sharp.bracket,
            })
    _write_report(outdir, rows, ["config", "N", "K", "p", "qnl_lhs", "qnl_rhs",
                                 "qnl_ok", "ghost_norm", "ghost_lower",
                                 "sharp_ok"])
    _write_summary(outdir, {"config": h, "pass": bool(all_ok)})
    if not quiet:
        print(f"consistency-1d: all bounds hold: {all_ok}")
    return 0 if all_ok else 3


def run_counterexample(cfg, outdir, rng, quiet):
    h = _config_hash(cfg)
    N = int(cfg.get("N", 16))
    dom = LatticeDomain(2, N)
    kinds = cfg.get("kind", ["locality", "scaling"])
    if isinstance(kinds, str):
        kinds = [kinds]
    betas = [float(b) for b in cfg.get("beta_values", [1.0, 2.0, 1.0 / dom.eps])]
    amp = float(cfg.get("amplitude", 0.05))
    y = row_pinned_deformation_2d(dom, amp=amp, drift=amp)
    rows = []
    all_ok = True
    for kind in kinds:
        for beta in betas:
            J, lower = counterexample_functional(kind, dom, beta=beta)
            ghost = max(J.force(
                PeriodicDeformation.from_strain(dom, F)).max_nodal_norm()
                for F in default_strain_samples(2))
            lb = lower(y)
            exact = dual_norm(J.force(y), 2).value
            all_ok &= ghost <= 1e-12 and lb <= exact * (1 + 1e-10)
            rows.append({"config": h, "kind": kind, "beta": _fmt(beta),
                         "ghost": _fmt(ghost), "lower_bound": _fmt(lb),
                         "dual_norm": _fmt(exact)})
    _write_report(outdir, rows, ["config", "kind", "beta", "ghost",
                                 "lower_bound", "dual_norm"])
    _write_summary(outdir, {"config": h, "pass": bool(all_ok)})
    if not quiet:
        for row in rows:
            print(f"{row['kind']}: beta={float(row['beta']):.3g} "
                  f"ghost={float(row['ghost']):.2e} "
                  f"lower={float(row['lower_bound']):.4f}")
    return 0 if all_ok else 3


def run_coarsen(cfg, outdir, rng, quiet):
    h = _config_hash(cfg)
    N_values = [int(n) for n in cfg.get("N_values", [8, 16])]
    fw = int(cfg.get("fine_halfwidth", 4))
    rows = []
    for N in N_values:
        dom = LatticeDomain(2, N)
        mesh = AtomisticMesh(dom)
        V = make_potential(cfg.get("potential"), 2)
        decomp = make_region(mesh, V.stencil, cfg.get("region") or
                             {"core_halfwidth": 1, "interface_layers": 2})
        iface = BondSplitInterface(V, decomp)
        coarse = graded_block_mesh(dom, fw)
        from .fields import smooth_deformation_2d
        y, _ = smooth_deformation_2d(dom, np.eye(2),
                                     amps=(0.04, 0.02, 0.03, 0.02),
                                     phases=(0.3, 1.1, 2.0, 0.7))
        rep = coarsening_check(V, iface, decomp, coarse, y, p=2)
        rows.append({"config": h, "N": N,
                     "lhs_coarse": _fmt(rep.lhs_coarse),
                     "lhs_fine": _fmt(rep.lhs_fine),
                     "coarsening_term": _fmt(rep.coarsening_term),
                     "measured_constant": _fmt(rep.measured_constant)})
    _write_report(outdir, rows, ["config", "N", "lhs_coarse", "lhs_fine",
                                 "coarsening_term", "measured_constant"])
    consts = [float(r["measured_constant"]) for r in rows]
    _write_summary(outdir, {"config": h, "measured_constants": consts,
                            "pass": True})
    if not quiet:
        print(f"coarsen: measured constants {consts}")
    return 0


_RUNNERS = {
    "bond-density": run_bond_density,
    "patch-test": run_patch_test,
    "stress": run_stress,
    "consistency-2d": run_consistency_2d,
    "consistency-1d": run_consistency_1d,
    "counterexample": run_counterexample,
    "coarsen": run_coarsen,
}


def run(argv=None):
    parser = argparse.ArgumentParser(
        prog="aclab",
        description="Coupled lattice energy laboratory: verification runs")
    parser.add_argument("subcommand", choices=sorted(_RUNNERS))
    parser.add_argument("--config", required=True, help="JSON config path")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="RNG seed (overrides the config)")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, args.subcommand)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    rng = np.random.default_rng(seed)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        return _RUNNERS[args.subcommand](cfg, outdir, rng, args.quiet)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # solver failure: report and signal
        print(f"internal failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 4


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
