"""Batch pipelines: generate, forward, inverse, roundtrip, perturb, verify,
render.

One JSON config document drives a run (no environment variables); every
numeric table lands in the RunRecord together with the config echo, seed,
iteration counts and wall-clock timings, and every acceptance criterion id
appears with a pass/fail/skip status. Exit status is nonzero exactly when a
hard invariant fails.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import io as artio
from .ambient import AmbientStructure, Density
from .config import Resolution, Tolerances, tolerances_from_dict
from .elliptic import assemble, fundamental_harmonic, kernel_report
from .fixtures import (CapFixture, barbell_fixture, cap_fixture, cap_levels,
                       line_fixture, line_family, orbit_boundaries,
                       orbit_isl_cylinder)
from .lagrangian import CallablePotential, positivity_report
from .mesh import annulus_mesh, flat_product_cylinder, segment_mesh
from .slc import solve_cylinder, solve_end_family
from .transform import (FamilyParameterization, TransformBundle,
                        end_seed_mesh, forward_transform, geodesic_residual,
                        inverse_transform, perturb_and_resolve,
                        polar_level_chart, relative_flux, roundtrip_distance)

AC_IDS = [f"AC{k}" for k in range(1, 9)]


DEFAULT_CONFIG = {
    "pipeline": "verify",
    "fixture": {"kind": "cap"},
    "density": {"type": "const"},
    "resolution": {"M": 48, "K": 24, "T": 16, "levels": 8},
    "tolerances": {},
    "seed": 1234,
    "out": "runs/out",
}


class RunError(RuntimeError):
    pass


def _apply_override(cfg: dict, key: str, value: str):
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    try:
        node[parts[-1]] = json.loads(value)
    except json.JSONDecodeError:
        node[parts[-1]] = value


def load_config(path, overrides):
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path:
        try:
            with open(path) as f:
                user = json.load(f)
        except json.JSONDecodeError as exc:
            raise RunError(f"config parse error in {path}: line "
                           f"{exc.lineno}, column {exc.colno}: {exc.msg}")
        cfg.update(user)
    for ov in overrides or []:
        if "=" not in ov:
            raise RunError(f"override {ov!r} is not key=value")
        k, v = ov.split("=", 1)
        _apply_override(cfg, k, v)
    res = cfg["resolution"]
    resolution = Resolution(res.get("M", 48), res.get("K", 24),
                            res.get("T", 16), res.get("levels", 8))
    tol = tolerances_from_dict(cfg.get("tolerances", {})) \
        if cfg.get("tolerances") else Tolerances()
    for nm, val in asdict(tol).items():
        if isinstance(val, float) and nm.startswith("tol") and val <= 0:
            raise RunError(f"tolerance {nm} must be positive")
    return cfg, resolution, tol


def new_record(cfg) -> dict:
    return {
        "config": cfg,
        "seed": cfg.get("seed", 0),
        "stages": [],
        "acceptance": {k: {"status": "skip"} for k in AC_IDS},
        "artifacts": [],
        "timings": {},
    }


def _stage(record, name, table):
    record["stages"].append({"stage": name, "table": table})


def _accept(record, ac, ok, **info):
    record["acceptance"][ac] = {"status": "pass" if ok else "fail", **info}


def _density_from_cfg(cfg) -> Density:
    return Density.from_json(cfg.get("density", {"type": "const"}))


def _build_fixture(cfg, resolution, tol):
    kind = cfg.get("fixture", {}).get("kind", "cap")
    params = {k: v for k, v in cfg.get("fixture", {}).items() if k != "kind"}
    if kind == "cap":
        dens = _density_from_cfg(cfg)
        return cap_fixture(resolution, density=None if dens.is_constant else dens,
                           tol=tol, **params)
    if kind == "barbell":
        return barbell_fixture(resolution, tol=tol, **params)
    if kind == "line":
        return line_fixture(N=resolution.M, T=resolution.T, **params)
    raise RunError(f"unknown fixture kind {kind!r}")


def _perturbation(eps, seed):
    rng = np.random.default_rng(seed)
    a, b = 2.0 + 0.3 * rng.random(), 1.7 + 0.3 * rng.random()
    pa, pb = float(rng.uniform(0, 2 * math.pi)), float(rng.uniform(0, 2 * math.pi))

    def f(x):
        return eps * np.sin(a * x[..., 0] + pa) * np.sin(b * x[..., 1] + pb)

    def g(x):
        return eps * np.stack([
            a * np.cos(a * x[..., 0] + pa) * np.sin(b * x[..., 1] + pb),
            b * np.sin(a * x[..., 0] + pa) * np.cos(b * x[..., 1] + pb)], axis=-1)

    def hss(x):
        s1 = np.sin(a * x[..., 0] + pa); c1 = np.cos(a * x[..., 0] + pa)
        s2 = np.sin(b * x[..., 1] + pb); c2 = np.cos(b * x[..., 1] + pb)
        H = np.empty(x.shape[:-1] + (2, 2))
        H[..., 0, 0] = -eps * a * a * s1 * s2
        H[..., 0, 1] = eps * a * b * c1 * c2
        H[..., 1, 0] = H[..., 0, 1]
        H[..., 1, 1] = -eps * b * b * s1 * s2
        return H

    pot = CallablePotential(f, g, hss)
    samp = rng.uniform(-1.2, 1.2, (400, 2))
    c2n = max(np.max(np.abs(pot.value(samp))), np.max(np.abs(pot.grad(samp))),
              np.max(np.abs(pot.hess(samp))))
    return pot, float(c2n)


# ----------------------------------------------------------- pipelines

def run_generate(cfg, resolution, tol, outdir, record):
    fix = _build_fixture(cfg, resolution, tol)
    res = geodesic_residual(fix.ambient, fix.path, tol)
    _stage(record, "generate", {"geodesic_residual": res,
                                "cone_points": len(fix.path.cone_images)})
    man = artio.save_geodesic(outdir, "geodesic", fix.path)
    record["artifacts"] += man["mesh_csv"] + [man["hamiltonian_csv"],
                                              "geodesic_manifest.json"]
    artio.render_slices_svg(fix.path, os.path.join(outdir, "slices.svg"))
    record["artifacts"].append("slices.svg")
    hard_ok = (res["horizontality"] < 100 * tol.tol_horiz
               and res["hamiltonian"] < 100 * tol.tol_geo)
    return fix, hard_ok


def _forward_family(fix, resolution, tol):
    if hasattr(fix.path.grid, "R"):      # disk fixtures
        levels = cap_levels(fix, resolution.levels)
    else:                                # n = 1 slab
        h = fix.path.h
        levels = np.linspace(np.max(h) - 0.1 * np.ptp(h),
                             np.min(h) + 0.1 * np.ptp(h), resolution.levels)
    tcyls = forward_transform(fix.path, levels, tol=tol)
    tcyls = [tc for tc in tcyls if tc is not None]
    return levels, tcyls


def run_forward(cfg, resolution, tol, outdir, record):
    fix, ok = run_generate(cfg, resolution, tol, outdir, record)
    levels, tcyls = _forward_family(fix, resolution, tol)
    table = [{"level": float(tc.level),
              "sup_F": tc.cylinder.truncation_norm,
              "sigma_laplacian": tc.sigma_laplacian_sup} for tc in tcyls]
    _stage(record, "forward", {"cylinders": table})
    cyls = [tc.cylinder for tc in tcyls]
    man = artio.save_family(outdir, "family", cyls)
    record["artifacts"] += man["mesh_csv"] + ["family_manifest.json"]
    artio.render_fan_svg(cyls, os.path.join(outdir, "fan.svg"))
    record["artifacts"].append("fan.svg")
    supF = max(t["sup_F"] for t in table) if table else math.inf
    return fix, tcyls, ok and supF < 0.1


def run_inverse(cfg, resolution, tol, outdir, record, input_dir=None):
    src = input_dir or cfg.get("input", outdir)
    cyls, man = artio.load_family(src, "family")
    fam = FamilyParameterization.from_cylinders(cyls)
    amb = cyls[0].mesh.ambient
    path = inverse_transform(amb, fam, anchor=man.get("anchor_station", 0),
                             tol=tol)
    res = geodesic_residual(amb, path, tol)
    _stage(record, "inverse", {"geodesic_residual": res,
                               "stations": len(cyls)})
    artio.save_geodesic(outdir, "reconstructed", path)
    record["artifacts"].append("reconstructed_manifest.json")
    return path, True


def run_roundtrip(cfg, resolution, tol, outdir, record):
    fix, tcyls, ok = run_forward(cfg, resolution, tol, outdir, record)
    amb = fix.ambient
    supF = max(tc.cylinder.truncation_norm for tc in tcyls)
    supL = 0.0
    for tc in tcyls:
        st = assemble(tc.cylinder.mesh)
        rowsum = np.asarray(np.abs(st.A).sum(axis=1)).ravel()
        mask = np.ones(st.n_nodes, bool)
        mask[st.boundary_nodes] = False
        supL = max(supL, float(np.max(
            (np.abs(st.A @ tc.sigma.values) / rowsum)[mask])))
    _accept(record, "AC4", supF < 5e-3 and supL < 5e-3,
            sup_F=supF, sup_laplacian=supL)

    fam = FamilyParameterization.from_cylinders(
        [tc.cylinder for tc in tcyls],
        s_values=np.arange(len(tcyls), dtype=float))
    levels = np.array([tc.level for tc in tcyls])
    flux_gap = 0.0
    for k in range(len(tcyls) - 1):
        fl = relative_flux(fam, k, k + 1)
        flux_gap = max(flux_gap, abs(fl["strip_integral"]
                                     - (levels[k + 1] - levels[k])))
    _accept(record, "AC5", flux_gap < 1e-3, flux_vs_gap=flux_gap)

    path2 = inverse_transform(amb, fam, anchor=0, tol=tol)
    dist = roundtrip_distance(path2, tcyls)
    verdict = "interior-regular"
    end_margin = None
    if len(fix.path.cone_images):
        from .slc import classify_regularity
        chart = polar_level_chart(fix.path, 0, radius_count=3, tol=tol)
        seed = end_seed_mesh(fix.path, chart, 0, tol)
        ends = solve_end_family(amb, (fix.lag0, fix.lag1),
                                fix.path.cone_images[0], seed,
                                [0.2, 0.1], tol)
        rep = classify_regularity([tc.cylinder for tc in tcyls], [ends], tol)
        verdict = rep["verdict"]
        end_margin = rep["ends"][0]["min_angle"] if rep["ends"] else None
    _stage(record, "roundtrip", {"distance": dist, "regularity": verdict,
                                 "euler_margin": end_margin})
    _accept(record, "AC6", dist < 1e-2 and verdict in ("regular",),
            distance=dist, verdict=verdict)
    artio.save_geodesic(outdir, "reconstructed", path2)
    return ok and record["acceptance"]["AC6"]["status"] == "pass"


def run_perturb(cfg, resolution, tol, outdir, record):
    fix, tcyls, ok = run_forward(cfg, resolution, tol, outdir, record)
    amb = fix.ambient
    pol = [solve_cylinder(amb, tc.cylinder.mesh, fix.lag0, fix.lag1, 0.0,
                          tol=tol) for tc in tcyls]
    for c, tc in zip(pol, tcyls):
        c.flux_coordinate = tc.level
    chart = polar_level_chart(fix.path, 0, radius_count=3, tol=tol)
    seed = end_seed_mesh(fix.path, chart, 0, tol)
    q = fix.path.cone_images[0]
    ends = solve_end_family(amb, (fix.lag0, fix.lag1), q, seed, [0.2, 0.1], tol)
    fam = FamilyParameterization.from_cylinders(pol)
    base = inverse_transform(amb, fam, anchor=0, end=ends, tol=tol)
    base.bundle = TransformBundle(fix.lag0, fix.lag1, pol,
                                  np.array([t.level for t in tcyls]), ends,
                                  chart, 0)
    _, rep0 = perturb_and_resolve(amb, base, None, tol)
    pot, c2n = _perturbation(1.0, cfg.get("seed", 0))
    eps0 = cfg.get("fixture", {}).get("perturbation_c2", 1e-2) / c2n
    from .lagrangian import ScaledPotential
    disp = []
    rows = []
    for k in range(4):
        _, repk = perturb_and_resolve(amb, base, ScaledPotential(pot, eps0 / 2 ** k),
                                      tol)
        disp.append(repk["displacement"])
        rows.append({"halving": k, "displacement": repk["displacement"],
                     "bc1": max(s["bc1_distance"] for s in repk["stations"])})
    ratios = [disp[i + 1] / disp[i] for i in range(3)]
    _stage(record, "perturb", {"baseline_reproduction": rep0["displacement"],
                               "rows": rows, "ratios": ratios})
    ok7 = (rep0["displacement"] < 1e-8
           and all(0.4 <= r <= 0.6 for r in ratios)
           and all(r["bc1"] < 1e-8 for r in rows))
    _accept(record, "AC7", ok7, ratios=ratios,
            reproduction=rep0["displacement"])
    return ok and ok7


def run_verify(cfg, resolution, tol, outdir, record):
    rng = np.random.default_rng(cfg.get("seed", 0))
    amb = AmbientStructure(2, _density_from_cfg(cfg))
    flat = AmbientStructure(2)
    # rho/phase kernel checks on the flat structure
    z = rng.standard_normal((1000, 2)) + 1j * rng.standard_normal((1000, 2))
    rho_exact = all(flat.rho_at(zz) == 1.0 for zz in z[:100])
    gap = 0.0
    from .ambient import OrientedLagrangianPlane
    for k in range(200):
        theta = rng.uniform(-math.pi / 2, math.pi / 2, 2)
        U = np.diag(np.exp(1j * theta))
        B = rng.standard_normal((2, 2))
        while abs(np.linalg.det(B)) < 0.2:
            B = rng.standard_normal((2, 2))
        pl = OrientedLagrangianPlane(z[k], B @ U.T, flat)
        gap = max(gap, pl.omega_vs_volume_gap() / max(1.0, abs(
            flat.omega_n_form(z[k], pl.basis))))
    _stage(record, "verify_ambient", {"rho_exact": rho_exact,
                                      "omega_vs_volume": gap})
    _accept(record, "AC1", rho_exact and gap < 1e-12,
            omega_vs_volume=gap)
    # elliptic: flat product cylinder invariants + kernel dimensions
    mesh = flat_product_cylinder(flat, resolution.M, resolution.K)
    st = assemble(mesh)
    ones = np.ones(st.n_nodes)
    rowsum = float(np.max(np.abs(st.A @ ones)))
    sig = fundamental_harmonic(mesh, st)
    _, tpar = mesh.grid.params()
    sig_err = float(np.max(np.abs(sig.values - tpar)))
    kr = kernel_report(st, True, tol)
    kr0 = kernel_report(st, False, tol)
    _stage(record, "verify_elliptic", {
        "row_sums": rowsum, "flat_sigma_error": sig_err,
        "kernel_dim": kr["dim_estimate"], "kernel_gap": kr["gap"],
        "dirichlet_dim": kr0["dim_estimate"]})
    okv = (rowsum < 1e-12 and sig_err < 1e-12 and kr["dim_estimate"] == 1
           and kr["gap"] > 1e6 and kr0["dim_estimate"] == 0)
    return okv


def run_render(cfg, resolution, tol, outdir, record, input_dir=None):
    src = input_dir or cfg.get("input", outdir)
    made = []
    if os.path.exists(os.path.join(src, "geodesic_manifest.json")):
        path = artio.load_geodesic(src, "geodesic")
        artio.render_slices_svg(path, os.path.join(outdir, "slices.svg"))
        made.append("slices.svg")
    if os.path.exists(os.path.join(src, "family_manifest.json")):
        cyls, _ = artio.load_family(src, "family")
        artio.render_fan_svg(cyls, os.path.join(outdir, "fan.svg"))
        made.append("fan.svg")
    if not made:
        artio.render_fan_svg([], os.path.join(outdir, "fan.svg"))
        made.append("fan.svg")
    _stage(record, "render", {"files": made})
    record["artifacts"] += made
    return True


PIPELINES = {
    "generate": lambda *a: run_generate(*a)[1],
    "forward": lambda *a: run_forward(*a)[2],
    "inverse": lambda *a: run_inverse(*a)[1],
    "roundtrip": run_roundtrip,
    "perturb": run_perturb,
    "verify": run_verify,
    "render": run_render,
}


def run(cfg: dict, resolution: Resolution, tol: Tolerances, outdir: str) -> dict:
    os.makedirs(outdir, exist_ok=True)
    record = new_record(cfg)
    name = cfg.get("pipeline", "verify")
    if name not in PIPELINES:
        raise RunError(f"unknown pipeline {name!r}")
    t0 = time.perf_counter()
    ok = PIPELINES[name](cfg, resolution, tol, outdir, record)
    record["timings"][name] = time.perf_counter() - t0
    record["hard_invariants_ok"] = bool(ok)
    with open(os.path.join(outdir, "run_record.json"), "w") as f:
        json.dump(record, f, indent=1, sort_keys=True, default=_jsonable)
    return record


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, complex):
        return [x.real, x.imag]
    return str(x)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="islag",
        description="special Lagrangian cylinder families and geodesics of "
                    "positive Lagrangians, batch pipelines")
    ap.add_argument("pipeline", choices=sorted(PIPELINES))
    ap.add_argument("--config", default=None, help="JSON config document")
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("--override", action="append", default=[],
                    metavar="KEY=VALUE", help="dotted config override")
    args = ap.parse_args(argv)
    try:
        cfg, resolution, tol = load_config(args.config, args.override)
        cfg["pipeline"] = args.pipeline
        outdir = args.out or cfg.get("out", "runs/out")
        record = run(cfg, resolution, tol, outdir)
    except RunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    status = "ok" if record["hard_invariants_ok"] else "FAILED"
    print(f"pipeline {args.pipeline}: {status} "
          f"({record['timings'][args.pipeline]:.1f}s) -> {outdir}")
    for ac, info in sorted(record["acceptance"].items()):
        if info["status"] != "skip":
            print(f"  {ac}: {info['status']}")
    return 0 if record["hard_invariants_ok"] else 1


if __name__ == "__main__":
    sys.exit(main())
