import math

import numpy as np
import pytest

from islag.ambient import AmbientStructure, Density
from islag.config import DEFAULT_TOL
from islag.elliptic import assemble, critical_point_scan, kernel_report
from islag.fixtures import orbit_boundaries, orbit_isl_cylinder
from islag.grids import CylGrid, SegmentGrid
from islag.lagrangian import LinearSubspace, PotentialGraph, QuadraticPotential
from islag.mesh import CylinderMesh, SegmentMesh, flat_product_cylinder, segment_mesh
from islag.slc import (ChartOverflow, NewtonDivergence, WeinsteinChart,
                       chart_embed, classify_regularity, continue_family,
                       euler_tangency_check, family_kernel_dims, make_isl,
                       newton_correct, omega_repair, sl_weak_residual,
                       solve_cylinder, special_residual, strip_flux,
                       tangent_direction, _interior_ids)


def vertical_segment(amb1, x0=0.0, y1=1.0, N=32):
    grid = SegmentGrid(N)
    t = grid.params()
    pts = (x0 + 1j * y1 * t).reshape(-1, 1)
    return SegmentMesh(grid, pts, amb1)


def test_special_residual_vertical_exact(amb1):
    mesh = vertical_segment(amb1)
    F = special_residual(amb1, mesh)
    assert np.max(np.abs(F.values)) < 1e-13


def test_special_residual_tilted_segment(amb1):
    alpha = 0.3
    grid = SegmentGrid(32)
    t = grid.params()
    direction = 1j * np.exp(-1j * alpha)     # tilted by alpha from vertical
    mesh = SegmentMesh(grid, (t * direction).reshape(-1, 1), amb1)
    F = special_residual(amb1, mesh)
    assert np.max(np.abs(F.values - math.sin(alpha))) < 1e-12


def test_special_residual_flat_slab(amb2):
    # a real 2d slab: Re Omega is the full volume form, so |F| = 1 at rho = 1
    grid = CylGrid(24, 8)
    p, t = grid.params()
    pts = np.stack([np.cos(p) * (1 + 0.3 * t), np.sin(p) * (1 + 0.3 * t)],
                   axis=-1).astype(complex)
    mesh = CylinderMesh(grid, pts, amb2)
    F = special_residual(amb2, mesh)
    assert np.max(np.abs(np.abs(F.values) - 1.0)) < 1e-12


def test_chart_embed_zero_is_base(hl_setup):
    mesh, lag0, lag1 = hl_setup
    chart = WeinsteinChart(mesh, lag0, lag1)
    out = chart_embed(chart, np.zeros(mesh.grid.n_nodes))
    assert np.max(np.abs(out.points - mesh.points)) < 1e-12


def test_chart_embed_vertical_offset(amb1):
    # flat R-grid in a C slice with vertical boundary lines: u linear in t
    # moves the interior rigidly by -J du
    grid = SegmentGrid(32)
    t = grid.params()
    mesh = SegmentMesh(grid, t.astype(complex).reshape(-1, 1), amb1)
    L0 = LinearSubspace(np.array([[1j]]), amb1)          # the line i R
    L1 = PotentialGraph(QuadraticPotential(np.zeros((1, 1)), np.array([-1.0])),
                        amb1, unitary=np.array([[1j]]))  # the line 1 + i R
    chart = WeinsteinChart(mesh, L0, L1)
    c = 0.01
    out = chart.embed(c * t)
    disp = out.points[:, 0] - mesh.points[:, 0]
    interior = np.arange(4, 29)
    assert np.max(np.abs(disp[interior] + 1j * c)) < 1e-6  # -J grad(u) = -ic
    assert np.max(np.abs(disp.real[interior])) < 1e-8


def test_chart_embed_boundary_stays_on_lagrangian(hl_setup):
    mesh, lag0, lag1 = hl_setup
    chart = WeinsteinChart(mesh, lag0, lag1)
    p, t = mesh.grid.params()
    u = 0.005 * (t ** 2)                     # zero on C0, constant on C1
    out = chart.embed(u)
    assert out.boundary_distance(0, lag0) < DEFAULT_TOL.tol_bc
    assert out.boundary_distance(1, lag1) < DEFAULT_TOL.tol_bc
    moved = np.abs(out.points[mesh.c1_nodes] - mesh.points[mesh.c1_nodes])
    assert np.max(moved) > 2e-4              # the C1 circle slid along Lambda_1


def test_chart_overflow_guard(hl_setup):
    mesh, lag0, lag1 = hl_setup
    chart = WeinsteinChart(mesh, lag0, lag1)
    _, t = mesh.grid.params()
    with pytest.raises(ChartOverflow):
        chart.embed(5.0 * t)


def test_newton_exact_start_needs_no_iterations(hl_setup, amb2):
    mesh, lag0, lag1 = hl_setup
    cyl = solve_cylinder(amb2, mesh, lag0, lag1, 0.0)
    again = solve_cylinder(amb2, cyl.mesh, lag0, lag1, 0.0)
    assert np.max(np.abs(again.mesh.points - cyl.mesh.points)) < 1e-9


def test_newton_quadratic_decay(hl_setup, amb2):
    mesh, lag0, lag1 = hl_setup
    base = solve_cylinder(amb2, mesh, lag0, lag1, 0.0).mesh
    chart = WeinsteinChart(base, lag0, lag1)
    p, t = base.grid.params()
    bump = 1e-3 * np.sin(2 * p) * np.sin(math.pi * t)
    res = newton_correct(amb2, chart, bump, 0.0)
    hist = res["residual_history"]
    assert res["iterations"] <= 6
    assert hist[-1] < 1e-11
    # quadratic decay: r_{k+1}/r_k^2 bounded while above roundoff
    ratios = [hist[k + 1] / hist[k] ** 2 for k in range(len(hist) - 1)
              if hist[k + 1] > 1e-13]
    assert all(r < 1e3 for r in ratios)


def test_newton_divergence_guard(hl_setup, amb2):
    mesh, lag0, lag1 = hl_setup
    chart = WeinsteinChart(mesh, lag0, lag1)
    p, t = mesh.grid.params()
    bad = 0.2 * np.sin(7 * p) * np.sin(math.pi * t)   # badly breaks positivity
    with pytest.raises((NewtonDivergence, ChartOverflow, ValueError)):
        newton_correct(amb2, chart, bad, 0.0,
                       DEFAULT_TOL.overridden(max_newton_iter=6))


def test_newton_local_uniqueness(hl_setup, amb2):
    mesh, lag0, lag1 = hl_setup
    base = solve_cylinder(amb2, mesh, lag0, lag1, 0.0).mesh
    rng = np.random.default_rng(5)
    p, t = base.grid.params()
    sols = []
    for _ in range(2):
        pert = sum(rng.standard_normal() * np.sin(k * p + rng.uniform(0, 6))
                   * np.sin(math.pi * t) for k in range(1, 4))
        pert *= 1e-3 / np.max(np.abs(pert))
        chart = WeinsteinChart(base, lag0, lag1)
        out = newton_correct(amb2, chart, pert, 0.0)
        sols.append(out["mesh"].points)
    assert np.max(np.abs(sols[0] - sols[1])) < 1e-9


def test_tangent_direction_properties(amb2, hl_setup):
    flat = flat_product_cylinder(amb2, 32, 16)
    sig = tangent_direction(make_isl(flat))
    _, t = flat.grid.params()
    assert np.max(np.abs(sig.values - t)) < 1e-12
    mesh, lag0, lag1 = hl_setup
    cyl = solve_cylinder(amb2, mesh, lag0, lag1, 0.0)
    kr = kernel_report(cyl.stiffness())
    assert kr["dim_estimate"] == 1
    # rescale invariance of the harmonic equation
    amb_s = AmbientStructure(2, rescale_s=0.5)
    scaled = CylinderMesh(mesh.grid, mesh.points / 0.5, amb_s)
    sig1 = tangent_direction(make_isl(scaled))
    sig0 = tangent_direction(cyl)
    assert np.max(np.abs(sig1.values - sig0.values)) < 5e-3


def test_continuation_zero_step_copies(amb2, hl_setup):
    mesh, lag0, lag1 = hl_setup
    seed = solve_cylinder(amb2, mesh, lag0, lag1, 0.0)
    fam, log = continue_family(amb2, seed, 0.0, 3, (lag0, lag1))
    assert len(fam) == 4
    for c in fam[1:]:
        assert np.array_equal(c.mesh.points, seed.mesh.points)


def test_continuation_hl_family(amb2, hl_setup):
    mesh, lag0, lag1 = hl_setup
    seed = solve_cylinder(amb2, mesh, lag0, lag1, 0.0)
    fam, log = continue_family(amb2, seed, 0.05, 5, (lag0, lag1))
    assert log.steps_taken == 5
    for cyl in fam:
        inv = cyl.invariants(lag0, lag1)
        assert inv["ok"], inv
        # members stay on the closed-form family Re(gamma^2) = const
        g2 = np.real(np.sum(cyl.mesh.points ** 2, axis=1))
        assert np.std(g2) < 5e-4
    assert family_kernel_dims(fam) == [1] * len(fam)
    # flux coordinates strictly monotone (negative direction for +ell steps)
    flux = [c.flux_coordinate for c in fam]
    assert all(flux[i + 1] < flux[i] for i in range(len(fam) - 1))


def test_continuation_station_family_n1(amb1):
    """Vertical segments between y = 0 and y = 1 + x: flux area law."""
    L0 = LinearSubspace(np.array([[1.0 + 0j]]), amb1)
    L1 = PotentialGraph(QuadraticPotential(np.array([[1.0]]), np.array([1.0])),
                        amb1)
    grid = SegmentGrid(32)
    t = grid.params()
    seed_mesh = SegmentMesh(grid, (1j * t).reshape(-1, 1), amb1)
    seed = solve_cylinder(amb1, seed_mesh, L0, L1, 0.0)
    fam, log = continue_family(amb1, seed, 0.05, 6, (L0, L1))
    assert log.steps_taken == 6
    for cyl in fam:
        x = cyl.mesh.points[:, 0].real
        y = cyl.mesh.points[:, 0].imag
        assert np.std(x) < 1e-9                       # vertical stations
        b = x.mean()
        assert abs(y[-1] - (1 + b)) < 1e-9            # top endpoint on y = 1+x
        # closed-form flux law: RelFlux(0 -> b) = -(b + b^2/2)
        assert cyl.flux_coordinate == pytest.approx(-(b + b * b / 2), abs=1e-6)


def test_euler_tangency_examples(amb2):
    grid = CylGrid(24, 8)
    p, t = grid.params()
    # radial ray surface: contains the Euler direction
    u = np.stack([np.cos(p), np.sin(p)], axis=-1).astype(complex)
    ray = CylinderMesh(grid, (0.5 + t)[:, None] * u, amb2)
    rep = euler_tangency_check(ray)
    assert not rep["nowhere_tangent"]
    assert rep["min_angle"] < 1e-10
    # sphere-contained cylinder: tangent planes orthogonal to position,
    # up to the O(h^2) of the difference frames
    grid2 = CylGrid(48, 16)
    p2, t2 = grid2.params()
    lat = 0.3 + 0.9 * t2
    pts = np.stack([np.cos(lat) * np.cos(p2) + 1j * np.sin(lat) * np.cos(p2),
                    np.cos(lat) * np.sin(p2) + 1j * np.sin(lat) * np.sin(p2)],
                   axis=-1)
    sph = CylinderMesh(grid2, pts, amb2)
    rep2 = euler_tangency_check(sph)
    assert rep2["min_angle"] > math.pi / 2 - 0.05
    # exact orbit cylinder: strictly transverse to the Euler field
    hl = orbit_isl_cylinder(1.0, 0.4, 1.2, 24, 8)
    rep3 = euler_tangency_check(hl)
    assert rep3["nowhere_tangent"]
    assert rep3["min_angle"] > 0.2


def test_omega_repair_reduces_defect(amb2, hl_setup):
    mesh, lag0, lag1 = hl_setup
    pts = mesh.points.copy()
    rng = np.random.default_rng(9)
    pts += 3e-4 * (rng.standard_normal(pts.shape)
                   + 1j * rng.standard_normal(pts.shape))
    pts[mesh.c0_nodes] = mesh.points[mesh.c0_nodes]
    pts[mesh.c1_nodes] = mesh.points[mesh.c1_nodes]
    noisy = mesh.copy_with_points(pts)
    before = np.max(np.abs(noisy.face_omega()))
    fixed = omega_repair(noisy, lag0, lag1)
    after = np.max(np.abs(fixed.face_omega()))
    assert after < 1e-3 * before


def test_classify_regularity_constructed_failure(amb2, hl_setup):
    mesh, lag0, lag1 = hl_setup
    seed = solve_cylinder(amb2, mesh, lag0, lag1, 0.0)
    fam, _ = continue_family(amb2, seed, 0.05, 3, (lag0, lag1))
    rep = classify_regularity(fam)
    assert rep["verdict"] == "interior-regular"
    # artificially insert a critical point into one harmonic
    victim = fam[1]
    p, t = victim.mesh.grid.params()
    tc = 7.5 / victim.mesh.grid.K              # an element-center level
    bad = (t - tc) ** 2                        # interior critical circle
    victim._harmonic = type(victim.harmonic())(bad, "free")
    rep2 = classify_regularity(fam)
    assert rep2["verdict"] == "not regular"
    assert any("harmonics" in c for c in rep2["causes"])


def test_strip_flux_between_matched_meshes(amb1):
    # two vertical segments at stations 0 and b: area = -(b + b^2/2) exact
    grid = SegmentGrid(16)
    t = grid.params()
    b = 0.3
    mesh_a = SegmentMesh(grid, (0 + 1j * t).reshape(-1, 1), amb1)
    mesh_b = SegmentMesh(grid, (b + 1j * t * (1 + b)).reshape(-1, 1), amb1)
    got = strip_flux(mesh_a, mesh_b)
    assert got == pytest.approx(-(b + b * b / 2), abs=1e-12)
