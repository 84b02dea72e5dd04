import math

import numpy as np
import pytest

from islag.ambient import AmbientStructure
from islag.config import DEFAULT_TOL, Resolution
from islag.elliptic import fundamental_harmonic
from islag.fixtures import barbell_fixture, cap_fixture, cap_levels, line_family
from islag.grids import CylGrid, DiskGrid, SegmentGrid
from islag.lagrangian import intersection_points
from islag.mesh import LagrangianMesh
from islag.transform import (FamilyParameterization, GeodesicPath,
                             compatibility_report, cone_hessian_check,
                             forward_transform, geodesic_ivp,
                             geodesic_residual, harmonize, inverse_transform,
                             polar_level_chart, relative_flux,
                             roundtrip_distance)


def test_ivp_constant_hamiltonian_is_static(amb2):
    grid = DiskGrid(24, 8)
    start = LagrangianMesh(grid, grid.xy().astype(complex), amb2)
    path = geodesic_ivp(amb2, start, np.full(grid.n_nodes, 0.3), 8)
    assert np.max(np.abs(path.points[-1] - path.points[0])) < 1e-14


def test_ivp_closed_form_slab(line_fix):
    path = line_fix.path
    x = path.points[0][:, 0].real
    for k, t in enumerate(path.times):
        exact = x + 1j * t * (1 + x)
        assert np.max(np.abs(path.points[k][:, 0] - exact)) < 1e-12
    res = geodesic_residual(line_fix.ambient, path)
    assert res["horizontality"] < 1e-12
    assert res["hamiltonian"] < 1e-12
    assert res["constancy"] == 0.0


def test_ivp_residual_scaling_dt4(cap_small):
    """Halving the time step scales the t-differencing residual by ~16."""
    from islag.fixtures import _gaussian_bump
    amb = cap_small.ambient
    grid = DiskGrid(32, 14)
    xy = grid.xy()
    start = LagrangianMesh(grid, xy.astype(complex), amb)
    h = _gaussian_bump(0.09, 0.6, (0.1, 0.06))(xy)
    r = {}
    for T in (8, 16):
        path = geodesic_ivp(amb, start, h, T)
        r[T] = geodesic_residual(amb, path)["horizontality"]
    assert r[8] / r[16] > 8.0     # between dt^3 and dt^4 at worst


def test_non_geodesic_interpolation_flagged(cap_small):
    path = cap_small.path
    lin = path.copy()
    # linear interpolation of endpoint meshes is generally not a geodesic
    for k, t in enumerate(path.times):
        lin.points[k] = (1 - t) * path.points[0] + t * path.points[-1]
    good = geodesic_residual(cap_small.ambient, path)
    bad = geodesic_residual(cap_small.ambient, lin)
    assert bad["horizontality"] > 50 * good["horizontality"]


def test_time_reversal_invariance(cap_small):
    path = cap_small.path
    rev = path.copy()
    rev.points = path.points[::-1].copy()
    rev.h = -path.h                       # reversal flips the Hamiltonian sign
    a = geodesic_residual(cap_small.ambient, path)
    b = geodesic_residual(cap_small.ambient, rev)
    assert b["horizontality"] == pytest.approx(a["horizontality"], rel=1e-10)
    assert b["hamiltonian"] == pytest.approx(a["hamiltonian"], rel=1e-10)


def test_ivp_endpoints_intersect_at_critical_images():
    fix = barbell_fixture(Resolution(48, 24, 16))
    path = fix.path
    assert len(path.cone_images) == 2
    hits = intersection_points(fix.ambient, fix.lag0, fix.lag1,
                               path.cone_images)
    good = [r for r in hits if r["converged"]]
    assert len(good) == 2
    for r, q in zip(good, path.cone_images):
        assert np.max(np.abs(r["point"] - q)) < 1e-6
        assert r["transverse"]


def test_forward_transform_n1_exact(line_fix):
    cyls = forward_transform(line_fix.path, [-0.3, -0.5, -5.0])
    assert cyls[2] is None                       # level outside the image
    tc = cyls[0]
    assert tc.cylinder.truncation_norm < 1e-12
    assert tc.sigma_laplacian_sup < 1e-10
    # station: h = -(x + x^2/2) = -0.3 -> x = sqrt(1.6) - 1
    x = tc.cylinder.mesh.points[:, 0].real
    assert np.std(x) < 1e-12
    # station located by linear marching interpolation: O(h^2) accurate
    assert x.mean() == pytest.approx(math.sqrt(1.6) - 1, abs=5e-5)


def test_forward_transform_critical_margin(cap_small):
    with pytest.raises(ValueError, match="critical margin"):
        forward_transform(cap_small.path, [cap_small.h_peak])


def test_forward_transform_isl_quality(cap_family):
    levels, tcyls = cap_family
    assert all(tc is not None for tc in tcyls)
    for tc in tcyls:
        assert tc.cylinder.truncation_norm < 2e-2
        inv = tc.cylinder.invariants()
        assert inv["im_omega_positive"]
        assert inv["immersion_gap"] > 0


def test_sigma_matches_solved_harmonic(cap_family):
    _, tcyls = cap_family
    worst = 0.0
    for tc in tcyls:
        sol = fundamental_harmonic(tc.cylinder.mesh)
        worst = max(worst, float(np.max(np.abs(sol.values - tc.sigma.values))))
    assert worst < 5e-3


def test_flux_constant_family_and_additivity(amb1):
    fam = line_family(32, 16, 0.8, 9)
    const = FamilyParameterization(fam.grid, fam.s_values,
                                   np.repeat(fam.points[:1], 9, axis=0),
                                   fam.ambient)
    fl = relative_flux(const, 0, 8)
    assert abs(fl["strip_integral"]) < 1e-15
    assert abs(fl["boundary_integral"]) < 1e-12
    a = relative_flux(fam, 0, 4)["strip_integral"]
    b = relative_flux(fam, 4, 8)["strip_integral"]
    c = relative_flux(fam, 0, 8)["strip_integral"]
    assert a + b == pytest.approx(c, abs=1e-10)


def test_flux_closed_form_law():
    fam = line_family(64, 32, 0.8, 17)
    fl = relative_flux(fam, 0, 16)
    b = 0.8
    assert fl["strip_integral"] == pytest.approx(-(b + b * b / 2), abs=1e-10)
    assert fl["mismatch"] < 1e-10


def test_flux_equals_hamiltonian_gap(cap_family):
    levels, tcyls = cap_family
    fam = FamilyParameterization.from_cylinders(
        [tc.cylinder for tc in tcyls],
        s_values=np.arange(len(tcyls), dtype=float))
    for k in range(len(tcyls) - 1):
        fl = relative_flux(fam, k, k + 1)
        gap = levels[k + 1] - levels[k]
        assert fl["strip_integral"] == pytest.approx(gap, abs=1e-3)


def test_harmonize_product_family_is_identity(amb2):
    from islag.mesh import flat_product_cylinder
    base = flat_product_cylinder(amb2, 24, 12)
    pts = np.stack([base.points, base.points + 0.1, base.points + 0.2])
    fam = FamilyParameterization(base.grid, np.arange(3.0), pts, amb2)
    out = harmonize(fam)
    assert np.max(np.abs(out.points - fam.points)) < 1e-10
    assert out.trace_error < 1e-9


def test_harmonize_restores_distortion(amb2):
    """A t-reparameterized interior is undone by harmonization."""
    from islag.mesh import flat_product_cylinder
    base = flat_product_cylinder(amb2, 24, 12)
    grid = base.grid
    p, t = grid.params()
    warp = t + 0.15 * np.sin(math.pi * t)     # fixes both boundaries
    pts = np.stack([np.exp(1j * p) * (2 * math.pi / 24)
                    / (2 * math.sin(math.pi / 24)), 1j * warp], axis=-1)
    distorted = np.stack([pts, pts + 0.1, pts + 0.2])
    fam = FamilyParameterization(grid, np.arange(3.0), distorted, amb2)
    out = harmonize(fam)
    rep = compatibility_report(out)
    # restoration is limited by the bilinear interpolation of sigma on the
    # distorted mesh, an O(h^2) floor for this strongly warped input
    assert out.trace_error < 5e-3
    assert np.max(np.abs(out.points[0][:, 1].imag - t)) < 5e-3
    assert rep["sigma_equals_t"] < 5e-3


def test_harmonize_forward_family_near_identity(cap_family):
    _, tcyls = cap_family
    fam = FamilyParameterization.from_cylinders(
        [tc.cylinder for tc in tcyls],
        s_values=np.arange(len(tcyls), dtype=float))
    out = harmonize(fam)
    assert np.max(np.abs(out.points - fam.points)) < 5e-3


def test_inverse_requires_family(amb2, cap_family):
    _, tcyls = cap_family
    single = FamilyParameterization.from_cylinders([tcyls[0].cylinder],
                                                   s_values=[0.0])
    with pytest.raises(ValueError, match="insufficient family"):
        inverse_transform(amb2, single)


def test_roundtrip_reproduces_path(cap_small, cap_family):
    levels, tcyls = cap_family
    fam = FamilyParameterization.from_cylinders(
        [tc.cylinder for tc in tcyls],
        s_values=np.arange(len(tcyls), dtype=float))
    path2 = inverse_transform(cap_small.ambient, fam, anchor=0)
    d = roundtrip_distance(path2, tcyls)
    assert d < 1e-2
    # the Hamiltonian is recovered from flux up to the anchor constant
    grid = path2.grid
    for k in range(len(tcyls)):
        ids = grid.level_nodes(k)
        got = path2.h[ids][0]
        assert got == pytest.approx(levels[k] - levels[0], abs=2e-3)


def test_roundtrip_n1_closed_form(line_fix):
    levels = [-0.25, -0.35, -0.45, -0.55, -0.65]
    tcyls = forward_transform(line_fix.path, levels)
    fam = FamilyParameterization.from_cylinders(
        [tc.cylinder for tc in tcyls], s_values=np.arange(5.0))
    path2 = inverse_transform(line_fix.ambient, fam, anchor=0)
    # slices must lie on y = t(1+x)
    for j in (0, 8, 16):
        z = path2.points[j][:, 0]
        t = path2.times[j]
        assert np.max(np.abs(z.imag - t * (1 + z.real))) < 1e-8


def test_cone_hessian_model_and_degenerate(amb2):
    # model h = |x|^2/2 on the flat disk: action identically 1
    grid = DiskGrid(32, 12)
    xy = grid.xy()
    start = LagrangianMesh(grid, xy.astype(complex), amb2)
    h = 0.5 * np.sum(xy ** 2, axis=1)
    path = GeodesicPath(grid, np.array([0.0, 1.0]),
                        np.stack([start.points, start.points]), h, amb2,
                        cone_params=[np.zeros(2)],
                        cone_images=[np.zeros(2, complex)])
    rep = cone_hessian_check(path, 0)
    assert rep["nondegenerate"]
    assert rep["min_action"] == pytest.approx(1.0, rel=1e-3)
    # quartic flattening: degenerate
    h4 = 0.25 * np.sum(xy ** 2, axis=1) ** 2
    path4 = GeodesicPath(grid, np.array([0.0, 1.0]),
                         np.stack([start.points, start.points]), h4, amb2,
                         cone_params=[np.zeros(2)],
                         cone_images=[np.zeros(2, complex)])
    rep4 = cone_hessian_check(path4, 0)
    assert not rep4["nondegenerate"]
    with pytest.raises(ValueError, match="degenerate"):
        polar_level_chart(path4, 0)


def test_cone_hessian_fixture(cap_small):
    rep = cone_hessian_check(cap_small.path, 0)
    assert rep["nondegenerate"]
    # oracle: Hessian of the Gaussian bump at its peak is -(A/w^2) I
    expect = 0.09 / 0.6 ** 2
    ev = np.linalg.eigvalsh(rep["hessian"])
    assert np.max(np.abs(-ev - expect)) < 5e-3


def test_polar_chart_model_circles(amb2):
    grid = DiskGrid(48, 20)
    xy = grid.xy()
    start = LagrangianMesh(grid, xy.astype(complex), amb2)
    h = 0.5 * np.sum(xy ** 2, axis=1)
    path = GeodesicPath(grid, np.array([0.0, 1.0]),
                        np.stack([start.points, start.points]), h, amb2,
                        cone_params=[np.zeros(2)],
                        cone_images=[np.zeros(2, complex)])
    chart = polar_level_chart(path, 0, radius_count=3)
    assert chart["level_sign"] == 1.0          # minimum: h = s^2
    for s, samp in zip(chart["s_values"], chart["samplings"]):
        loop = samp.interpolate(path.points[0])
        radii = np.abs(loop[:, 0] + 0j) ** 2 + np.abs(loop[:, 1]) ** 2
        # |x| = s sqrt(2) on the level h = s^2
        assert np.max(np.abs(np.sqrt(radii) - s * math.sqrt(2))) < 2e-3


def test_polar_chart_matches_forward_levels(cap_small):
    chart = polar_level_chart(cap_small.path, 0, radius_count=2)
    hq = chart["h_critical"]
    for s, samp in zip(chart["s_values"], chart["samplings"]):
        c = hq - s ** 2
        tc = forward_transform(cap_small.path, [c])[0]
        loop_a = samp.interpolate(cap_small.path.points[0])
        loop_b = tc.cylinder.mesh.points[tc.cylinder.mesh.grid.level_nodes(0)]
        from islag.transform import point_polyline_distance
        d = point_polyline_distance(loop_a, loop_b)
        assert np.max(d) < 5e-3
