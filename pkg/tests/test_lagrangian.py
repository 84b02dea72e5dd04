import math

import numpy as np
import pytest

from islag.ambient import AmbientStructure
from islag.grids import DiskGrid
from islag.lagrangian import (CallablePotential, LinearSubspace,
                              ParametricSphere, PotentialGraph,
                              QuadraticPotential, TubularChart, ZeroPotential,
                              intersection_points, perturb_graph,
                              positivity_report, principal_angle_gap,
                              profile_sphere)


def test_positivity_linear_cases(amb2):
    R2 = LinearSubspace(np.eye(2), amb2)
    rep = positivity_report(amb2, R2, 64)
    assert rep["positive"] and rep["max_phase"] == 0.0
    assert rep["worst_omega_residual"] == 0.0
    rot = LinearSubspace(np.exp(1j * math.pi / 3) * np.eye(2), amb2)
    rep2 = positivity_report(amb2, rot, 64)
    assert not rep2["positive"]
    assert max(abs(rep2["min_phase"]), abs(rep2["max_phase"])) == pytest.approx(
        2 * math.pi / 3, abs=1e-12)


def test_positivity_graph_of_zero_is_reference(amb2):
    R2 = LinearSubspace(np.eye(2), amb2)
    same = perturb_graph(R2, ZeroPotential())
    assert same is R2
    const = perturb_graph(R2, QuadraticPotential(np.zeros((2, 2)), None, 3.0))
    assert const is R2


def test_perturb_graph_quadratic(amb2):
    R2 = LinearSubspace(np.eye(2), amb2)
    A = np.array([[0.3, 0.1], [0.1, 0.2]])
    G = perturb_graph(R2, QuadraticPotential(A))
    x = np.array([[0.5, -0.3], [0.1, 0.2]])
    expect = x + 1j * (x @ A)
    assert np.max(np.abs(G.point(x) - expect)) < 1e-14
    assert G.omega_residual(64) < 1e-12


def test_perturb_graph_continuity_at_zero(amb2):
    """Hausdorff-type distance to the base decays linearly in ||h||_C1."""
    R2 = LinearSubspace(np.eye(2), amb2)
    A = np.array([[0.2, 0.05], [0.05, 0.15]])
    xs = np.random.default_rng(0).uniform(-1, 1, (200, 2))
    dists = []
    for k in range(4):
        h = QuadraticPotential(A / 2 ** k)
        G = perturb_graph(R2, h)
        pts = G.point(xs)
        d = np.max(np.abs(pts.imag))    # distance to R^2
        dists.append(d)
    ratios = [dists[i + 1] / dists[i] for i in range(3)]
    assert all(0.4 < r < 0.6 for r in ratios)


def test_profile_sphere_cases(amb2):
    flat = profile_sphere([1.0], 2, amb2)        # gamma(s) = s
    rep = positivity_report(amb2, flat, 64)
    assert rep["positive"] and abs(rep["max_phase"]) < 1e-14
    curved = profile_sphere([1.0, 0.1j], 2, amb2)
    rep2 = positivity_report(amb2, curved, 128)
    assert rep2["positive"]
    assert rep2["worst_omega_residual"] < 1e-10
    imag = profile_sphere([1j], 2, amb2)         # gamma(s) = i s
    rep3 = positivity_report(amb2, imag, 64)
    assert not rep3["positive"]
    assert abs(rep3["max_phase"]) == pytest.approx(math.pi, abs=1e-12)
    with pytest.raises(ValueError, match="dimension"):
        profile_sphere([1.0], 3, amb2)


def test_profile_sphere_mesh(amb2):
    orbit = profile_sphere([1.0, 0.1j], 2, amb2)
    # sampled meshes of curved Lagrangians carry an O(h^2)-relative discrete
    # face omega (the solver's own cylinders are driven to the tolerance
    # gate instead); assert the level and its second-order decay
    rels = []
    for (M, R) in ((24, 9), (48, 18)):
        mesh = orbit.sample_mesh(DiskGrid(M, R))
        rep = positivity_report(amb2, mesh, 200)
        assert rep["positive"]
        rels.append(rep["worst_omega_residual"] / rep["omega_scale"])
    assert rels[0] < 5e-2
    assert rels[1] < rels[0]


def test_parametric_sphere_kind(amb2):
    # a torus-like Fourier immersion; the kind exists for diagnostics
    coeffs = np.zeros((4, 3, 3))
    coeffs[0, 1, 0] = 1.0     # x1 = cos u
    coeffs[1, 2, 0] = 1.0     # y1 = sin u
    coeffs[2, 0, 1] = 0.4     # x2 = 0.4 cos v
    coeffs[3, 0, 2] = 0.4     # y2 = 0.4 sin v
    sph = ParametricSphere(coeffs, amb2)
    rep = positivity_report(amb2, sph, 64)
    assert "min_phase" in rep and "worst_omega_residual" in rep
    assert sph.to_json()["kind"] == "parametric_sphere"


def test_intersections_linear_and_graph(amb2):
    R2 = LinearSubspace(np.eye(2), amb2)
    B = np.array([[0.4, 0.0], [0.0, 0.25]])
    G = PotentialGraph(QuadraticPotential(B), amb2)
    res = intersection_points(amb2, R2, G, [np.zeros(2, complex),
                                            np.array([1 + 0.3j, 0.5j])])
    pts = [r for r in res if r["converged"]]
    assert len(pts) == 1                       # dedup to the single origin
    assert np.max(np.abs(pts[0]["point"])) < 1e-10
    assert pts[0]["transverse"]
    # oracle: smallest principal angle between R^2 and (I + iB) R^2
    gap = principal_angle_gap(np.eye(2), np.eye(2) + 1j * B)
    assert pts[0]["transversality_gap"] == pytest.approx(gap, abs=1e-9)


def test_intersection_self_is_degenerate(amb2):
    R2 = LinearSubspace(np.eye(2), amb2)
    res = intersection_points(amb2, R2, R2, [np.zeros(2, complex)])
    assert res[0]["transversality_gap"] == pytest.approx(0.0, abs=1e-12)
    assert not res[0]["transverse"]


def test_projection_and_distance(amb2):
    R2 = LinearSubspace(np.eye(2), amb2)
    z = np.array([0.3 + 0.2j, -0.1 + 0.5j])
    assert R2.distance(z) == pytest.approx(math.hypot(0.2, 0.5), rel=1e-12)
    A = np.array([[0.3, 0.1], [0.1, 0.2]])
    G = PotentialGraph(QuadraticPotential(A), amb2)
    x0 = np.array([0.4, -0.2])
    on = G.point(x0[None, :])[0]
    assert G.distance(on) < 1e-10
    xi = G.project(on + 0.05j * np.array([1.0, 1.0]))
    assert np.all(np.isfinite(xi))


def test_tubular_chart_split(amb2):
    R2 = LinearSubspace(np.eye(2), amb2)
    tc = TubularChart(R2)
    z = np.array([0.3 + 0.1j, 0.2 - 0.2j])
    xi, c, foot = tc.split(z)
    assert np.max(np.abs(foot - np.array([0.3, 0.2]))) < 1e-12
    assert tc.tube_norm(z) == pytest.approx(math.hypot(0.1, 0.2), rel=1e-12)
    z2 = tc.assemble(xi, c)
    assert np.max(np.abs(z2 - z)) < 1e-12


def test_linear_subspace_rejects_non_lagrangian(amb2):
    frame = np.array([[1.0, 0.0], [1j, 0.0]])   # omega(e1, i e1) = 1
    with pytest.raises(ValueError, match="Lagrangian"):
        LinearSubspace(frame, amb2)
