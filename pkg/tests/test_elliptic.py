import math

import numpy as np
import pytest

from islag.ambient import AmbientStructure, Density
from islag.elliptic import (ScalarField, assemble, critical_point_scan,
                            fundamental_harmonic, gradient_field,
                            kernel_report, self_adjointness_gap,
                            solve_dirichlet)
from islag.mesh import annulus_mesh, flat_product_cylinder, segment_mesh


def test_flat_product_row_sums_and_stencil(amb2):
    mesh = flat_product_cylinder(amb2, 24, 12)
    st = assemble(mesh)
    assert np.max(np.abs(st.A @ np.ones(st.n_nodes))) < 1e-13
    # closed-form bilinear element stiffness for the flat product metric on
    # a hp x ht rectangle (corner order as in the grid quads)
    hp, ht = 2 * math.pi / 24, 1.0 / 12
    kxx = np.array([[2, -2, -1, 1], [-2, 2, 1, -1],
                    [-1, 1, 2, -2], [1, -1, -2, 2]]) / 6.0 * (ht / hp)
    kyy = np.array([[2, 1, -1, -2], [1, 2, -2, -1],
                    [-1, -2, 2, 1], [-2, -1, 1, 2]]) / 6.0 * (hp / ht)
    Kel = kxx + kyy
    import scipy.sparse as sp
    quads = mesh.grid.quads()
    rows = np.repeat(quads, 4, axis=1).ravel()
    cols = np.tile(quads, (1, 4)).ravel()
    data = np.tile(Kel.ravel(), len(quads))
    ref = sp.coo_matrix((data, (rows, cols)), shape=(st.n_nodes,) * 2).tocsr()
    gap = np.max(np.abs((st.A - ref).toarray()))
    assert gap < 1e-13 * np.max(np.abs(ref.toarray()))


def test_segment_weighted_tridiagonal_oracle():
    amb = AmbientStructure(1, Density.exp_poly({(1,): 1.0}))
    N = 50
    mesh = segment_mesh(amb, N)
    st = assemble(mesh)
    # symbolic element integrals of e^t: K_e = (e^{t1} - e^{t0})/h^2
    h = 1.0 / N
    t = np.arange(N + 1) * h
    diag_exact = np.zeros(N + 1)
    off_exact = np.zeros(N)
    for e in range(N):
        w = (math.exp(t[e + 1]) - math.exp(t[e])) / h ** 2
        diag_exact[e] += w
        diag_exact[e + 1] += w
        off_exact[e] = -w
    A = st.A.toarray()
    scale = np.max(np.abs(diag_exact))
    assert np.max(np.abs(np.diag(A) - diag_exact)) / scale < 1e-9
    assert np.max(np.abs(np.diag(A, 1) - off_exact)) / scale < 1e-9


def test_solve_dirichlet_examples(amb2):
    mesh = flat_product_cylinder(amb2, 24, 12)
    st = assemble(mesh)
    u0 = solve_dirichlet(st, None, 0.0, 0.0)
    assert np.max(np.abs(u0.values)) == 0.0
    u1 = solve_dirichlet(st, None, 0.0, 1.0)
    _, t = mesh.grid.params()
    assert np.max(np.abs(u1.values - t)) < 1e-12


def test_solve_dirichlet_weighted_segment():
    amb = AmbientStructure(1, Density.exp_poly({(1,): 1.0}))
    mesh = segment_mesh(amb, 100)
    st = assemble(mesh)
    sig = solve_dirichlet(st, None, 0.0, 1.0)
    t = mesh.grid.params()
    exact = (1 - np.exp(-t)) / (1 - math.exp(-1))
    # P1 with near-exact quadrature is nodally superconvergent here; the
    # interpolant error is the O(h^2) quantity
    assert np.max(np.abs(sig.values - exact)) < 1e-3
    dense = np.linspace(0, 1, 1001)
    interp = np.interp(dense, t, sig.values)
    err = np.max(np.abs(interp - (1 - np.exp(-dense)) / (1 - math.exp(-1))))
    assert err < 1e-3


def test_solve_dirichlet_manufactured_rhs():
    amb = AmbientStructure(1, Density.exp_poly({(1,): 1.0}))
    errs = []
    for N in (50, 100):
        mesh = segment_mesh(amb, N)
        st = assemble(mesh)
        t = mesh.grid.params()
        # Delta_rho u = (e^t u')' with u = sin(pi t)
        f = np.exp(t) * (-math.pi ** 2 * np.sin(math.pi * t)
                         + math.pi * np.cos(math.pi * t))
        u = solve_dirichlet(st, ScalarField(f), 0.0, 0.0)
        errs.append(np.max(np.abs(u.values - np.sin(math.pi * t))))
    assert errs[0] < 2e-3
    assert errs[0] / errs[1] > 3.2       # second order


def test_fundamental_harmonic_cases(amb2):
    mesh = flat_product_cylinder(amb2, 32, 16)
    sig = fundamental_harmonic(mesh)
    _, t = mesh.grid.params()
    assert np.max(np.abs(sig.values - t)) < 1e-12
    assert np.all(sig.values[mesh.c0_nodes] == 0.0)
    assert np.all(sig.values[mesh.c1_nodes] == 1.0)
    ann = annulus_mesh(amb2, 64, 32)
    siga = fundamental_harmonic(ann)
    _, ta = ann.grid.params()
    r = 1.0 + ta
    assert np.max(np.abs(siga.values - np.log(r) / math.log(2))) < 2e-3
    assert siga.values.min() >= -1e-10 and siga.values.max() <= 1 + 1e-10


def test_convergence_order_both_cases(amb2):
    # e^t segment: measure the FE-function sup error on a dense sample
    amb1 = AmbientStructure(1, Density.exp_poly({(1,): 1.0}))
    errs = []
    for N in (25, 50, 100):
        mesh = segment_mesh(amb1, N)
        sig = fundamental_harmonic(mesh)
        t = mesh.grid.params()
        dense = np.linspace(0, 1, 2001)
        interp = np.interp(dense, t, sig.values)
        errs.append(np.max(np.abs(interp - (1 - np.exp(-dense)) / (1 - math.exp(-1)))))
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert min(orders) >= 1.8
    errs2 = []
    for (M, K) in ((16, 8), (32, 16), (64, 32)):
        ann = annulus_mesh(amb2, M, K)
        siga = fundamental_harmonic(ann)
        _, ta = ann.grid.params()
        errs2.append(np.max(np.abs(siga.values - np.log(1 + ta) / math.log(2))))
    orders2 = [math.log2(errs2[i] / errs2[i + 1]) for i in range(2)]
    assert min(orders2) >= 1.8


def test_kernel_report(amb2):
    mesh = flat_product_cylinder(amb2, 32, 16)
    st = assemble(mesh)
    kr = kernel_report(st, constrained=True)
    assert kr["dim_estimate"] == 1
    assert kr["gap"] > 1e6
    kr0 = kernel_report(st, constrained=False)
    assert kr0["dim_estimate"] == 0


def test_gradient_field(amb2):
    mesh = flat_product_cylinder(amb2, 32, 16)
    _, t = mesh.grid.params()
    centers, grads, norms = gradient_field(mesh, ScalarField(t.copy()))
    # sigma = t has unit gradient in the t-direction (0, i) everywhere
    assert np.max(np.abs(norms - 1.0)) < 1e-12
    assert np.max(np.abs(grads[:, 0])) < 1e-12
    _, _, n0 = gradient_field(mesh, ScalarField(np.ones(mesh.grid.n_nodes)))
    assert np.max(n0) < 1e-13
    ann = annulus_mesh(amb2, 48, 24)
    _, ta = ann.grid.params()
    r = 1.0 + ta
    centers, grads, norms = gradient_field(ann, ScalarField(np.log(r)))
    rc = np.sqrt(np.sum(np.abs(centers) ** 2, axis=1))
    assert np.max(np.abs(norms - 1.0 / rc)) < 0.05 / rc.min()  # O(h)


def test_critical_point_scan(amb2):
    mesh = flat_product_cylinder(amb2, 32, 16)
    _, t = mesh.grid.params()
    clean = critical_point_scan(mesh, ScalarField(t.copy()))
    assert not clean["has_critical_points"]
    # odd K puts an element-center row exactly at t = 1/2
    mesh2 = flat_product_cylinder(amb2, 32, 17)
    _, t2 = mesh2.grid.params()
    band = critical_point_scan(mesh2, ScalarField((t2 - 0.5) ** 2))
    assert band["has_critical_points"]
    lev = band["flagged_elements"] // 32
    assert np.all(np.abs(lev - 8) <= 1)       # band around t = 1/2


def test_self_adjointness(amb2):
    mesh = annulus_mesh(amb2, 32, 16)
    st = assemble(mesh)
    assert self_adjointness_gap(st) < 1e-13


def test_degenerate_element_raises(amb2):
    mesh = flat_product_cylinder(amb2, 16, 8)
    pts = mesh.points.copy()
    g = mesh.grid
    # collapse a whole cell onto a segment: the pullback metric degenerates
    pts[g.node(3, 4)] = pts[g.node(4, 4)]
    pts[g.node(3, 5)] = pts[g.node(4, 5)]
    bad = mesh.copy_with_points(pts)
    with pytest.raises(ValueError, match="degenerate"):
        assemble(bad)
