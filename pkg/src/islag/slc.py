"""Imaginary special Lagrangian cylinders with positive Lagrangian boundary.

The solver works in boundary-adapted charts around a reference cylinder: a
potential u that vanishes on C0 and is constant on C1 moves each node by

    -(J + a) grad(u),

where grad is the surface gradient of the nodal interpolant and a is the
real boundary adaptation that turns the J-rotated frame into one containing
a direction tangent to the boundary Lagrangian (a = 0 in the interior,
blended smoothly). Boundary nodes are then projected exactly onto their
Lagrangians, so charted meshes satisfy the boundary condition to projection
accuracy regardless of chart order.

The scalar equation is the vanishing of the pullback of Re(Omega); its weak
residual against nodal hat functions has derivative -A at charted meshes,
with A the rho-weighted stiffness of the current embedding, which is what
the Newton corrector factors. The chart is first order, so the omega
defect of a charted mesh is quadratic in u; a minimal-norm Gauss-Newton
repair on the exact per-face symplectic areas removes it after each
accepted corrector solve, and accepted cylinders are certified a
posteriori by their own invariants (weak residual, face omega, boundary
distance, positivity of the Im(Omega) pullback), none of which mention the
chart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .ambient import AmbientStructure, metric_form, omega_form
from .config import DEFAULT_TOL
from .elliptic import (ScalarField, assemble, critical_point_scan,
                       fundamental_harmonic, kernel_report)
from .grids import CylGrid, fd_matrices, surface_gradient
from .lagrangian import BoundaryLagrangian, LinearSubspace, _gram_schmidt_real
from .mesh import CylinderMesh, SegmentMesh, grid_frames, shoelace_omega


class ChartOverflow(RuntimeError):
    pass


class NewtonDivergence(RuntimeError):
    pass


# ------------------------------------------------------------- weak residual

def sl_weak_residual(mesh, order: int = 2):
    """Weak Re(Omega) residual vector and lumped volume weights.

    R[a] = integral phi_a * (pullback of Re Omega), assembled per element by
    Gauss quadrature; vol[a] is the matching lumped Riemannian volume, so
    R/vol is a nodal average of the pointwise quotient *Re Omega.
    """
    if isinstance(mesh, SegmentMesh):
        return _sl_weak_residual_segment(mesh)
    q = mesh.quadrature(order)
    vals = _re_omega_2form(mesh.ambient, q["pos"], q["tau1"], q["tau2"])
    w, N = q["w"], q["N"]
    Re = np.einsum("q,qa,eq->ea", w, N, vals)
    Ve = np.einsum("q,qa,eq->ea", w, N, np.sqrt(q["detG"]))
    R = np.zeros(mesh.grid.n_nodes)
    V = np.zeros(mesh.grid.n_nodes)
    np.add.at(R, q["quads"].ravel(), Re.ravel())
    np.add.at(V, q["quads"].ravel(), Ve.ravel())
    return R, V


def _re_omega_2form(ambient, pos, tau1, tau2):
    det = tau1[..., 0] * tau2[..., 1] - tau1[..., 1] * tau2[..., 0]
    dens = ambient._eff_density()
    if dens.is_constant:
        return np.real(det)
    if ambient.deformation is not None:
        raise NotImplementedError("deformed ambients evaluate forms pointwise")
    return np.real(np.exp(dens.log_at(pos)) * det)


def _sl_weak_residual_segment(mesh: SegmentMesh):
    # Re(dz) pulled back to elements; P1 hat weights
    z = mesh.points[:, 0]
    dz = np.diff(z)
    dens = mesh.ambient._eff_density()
    if dens.is_constant:
        re = dz.real
    else:
        mid = 0.5 * (z[:-1] + z[1:])
        re = np.real(np.exp(dens.log_at(mid[:, None])) * dz)
    ell = np.abs(dz)
    R = np.zeros(mesh.grid.n_nodes)
    V = np.zeros(mesh.grid.n_nodes)
    np.add.at(R, np.arange(len(dz)), 0.5 * re)
    np.add.at(R, np.arange(1, len(dz) + 1), 0.5 * re)
    np.add.at(V, np.arange(len(dz)), 0.5 * ell)
    np.add.at(V, np.arange(1, len(dz) + 1), 0.5 * ell)
    return R, V


def special_residual(ambient: AmbientStructure, mesh, base=None,
                     order: int = 2) -> ScalarField:
    """Nodal field of (pullback Re Omega) / (volume form of the base metric)."""
    mesh.check_immersed()
    R, _ = sl_weak_residual(mesh, order)
    V = _lumped_volume(mesh if base is None else base, order)
    return ScalarField(R / V, "free")


def _lumped_volume(mesh, order: int = 2):
    if isinstance(mesh, SegmentMesh):
        ell = np.abs(np.diff(mesh.points[:, 0]))
        V = np.zeros(mesh.grid.n_nodes)
        np.add.at(V, np.arange(len(ell)), 0.5 * ell)
        np.add.at(V, np.arange(1, len(ell) + 1), 0.5 * ell)
        return V
    q = mesh.quadrature(order)
    Ve = np.einsum("q,qa,eq->ea", q["w"], q["N"], np.sqrt(q["detG"]))
    V = np.zeros(mesh.grid.n_nodes)
    np.add.at(V, q["quads"].ravel(), Ve.ravel())
    return V


def im_omega_element_signs(mesh, order: int = 2) -> np.ndarray:
    """Element means of the Im(Omega) pullback 2-form (orientation check)."""
    q = mesh.quadrature(order)
    det = q["tau1"][..., 0] * q["tau2"][..., 1] - q["tau1"][..., 1] * q["tau2"][..., 0]
    dens = mesh.ambient._eff_density()
    if dens.is_constant:
        vals = np.imag(det)
    else:
        vals = np.imag(np.exp(dens.log_at(q["pos"])) * det)
    return np.einsum("q,eq->e", q["w"], vals)


# ------------------------------------------------------------------ charts

@dataclass
class WeinsteinChart:
    """Boundary-adapted first-order chart around a reference cylinder.

    The displacement operator D is assembled once as a sparse matrix from
    the 4th-order nodal derivative stencils, so the map u -> mesh points is
    exactly linear (before boundary projection) and the Newton corrector
    can chain an exact residual Jacobian through it.
    """

    base: CylinderMesh
    lag0: BoundaryLagrangian
    lag1: BoundaryLagrangian
    tol: object = field(default_factory=lambda: DEFAULT_TOL)

    def __post_init__(self):
        mesh = self.base
        grid = mesh.grid
        ids, raw = grid_frames(grid, mesh.points, mesh.orientation)
        assert len(ids) == grid.n_nodes
        N = grid.n_nodes
        self.frames = np.zeros((N,) + raw.shape[1:], dtype=complex)
        for k in range(N):
            self.frames[k] = _gram_schmidt_real(raw[k])
        a0 = self._boundary_adaptation(mesh.c0_nodes, self.lag0)
        a1 = self._boundary_adaptation(mesh.c1_nodes, self.lag1)
        params = grid.params()
        tpar = params[1] if isinstance(params, tuple) else params
        blend = tpar * tpar * (3.0 - 2.0 * tpar)
        reps = N // len(a0)
        self.a = (np.tile(a0, reps) * (1.0 - blend) + np.tile(a1, reps) * blend)
        edge = float(np.linalg.norm((mesh.points[1] - mesh.points[0]).view(float)))
        self.chart_radius = self.tol.chart_radius_rel * max(
            edge, 1e-3 * mesh.diameter())
        self._rings = mesh.rings
        self._build_displacement_operator()

    def _build_displacement_operator(self):
        """Sparse real matrix D: nodal potential -> point displacements.

        displacement_i = -(J + a_i) grad(u)_i with grad from the tensor
        stencils; rows are the interleaved real components of the points
        array (node-major), columns are nodal values of u.
        """
        mesh = self.base
        grid = mesh.grid
        n = mesh.ambient.n
        N = grid.n_nodes
        stencils = fd_matrices(grid)
        taus = [S @ mesh.points for S in stencils]       # (N, n) each
        k = len(taus)
        G = np.empty((N, k, k))
        for aa in range(k):
            for bb in range(k):
                G[:, aa, bb] = np.real(np.sum(np.conj(taus[aa]) * taus[bb], axis=-1))
        Ginv = np.linalg.inv(G)
        jfac = (1j + self.a)[:, None]
        W = []
        for aa in range(k):
            acc = np.zeros((N, n), dtype=complex)
            for bb in range(k):
                acc += Ginv[:, aa, bb, None] * taus[bb]
            W.append(-jfac * acc)
        blocks = []
        for aa in range(k):
            Wr = W[aa].view(float).reshape(N, 2 * n)      # interleaved re/im
            diags = [sp.diags(Wr[:, comp]) for comp in range(2 * n)]
            blocks.append(sp.vstack([d @ stencils[aa] for d in diags]))
        D = blocks[0]
        for aa in range(1, k):
            D = D + blocks[aa]
        # rows are comp-major (comp * N + node); reorder to node-major
        old = np.arange(2 * n * N)
        new = (old % N) * 2 * n + old // N
        perm = sp.coo_matrix((np.ones(2 * n * N), (new, old)),
                             shape=(2 * n * N,) * 2)
        self.D = (perm @ D).tocsr()

    def _boundary_adaptation(self, ids, lag) -> np.ndarray:
        """Real a with (J + a) frame meeting the boundary Lagrangian tangent."""
        mesh = self.base
        out = np.zeros(len(ids))
        for k, i in enumerate(ids):
            z = mesh.points[i]
            nu = self.frames[i, -1]            # across the boundary, in-surface
            T = lag.tangent_at(z)
            lam = _gram_schmidt_real(T)
            if self.frames.shape[1] > 1:
                tau_c = self.frames[i, 0]      # along the boundary circle
                p = sum(metric_form(tau_c, lam[j]) * lam[j] for j in range(len(lam)))
                w = None
                for j in range(len(lam)):
                    cand = lam[j] - metric_form(lam[j], _unit(p)) * _unit(p) \
                        if metric_form(p, p) > 1e-20 else lam[j]
                    if metric_form(cand, cand) > 1e-12:
                        w = _unit(cand)
                        break
                if w is None:
                    raise ValueError("boundary Lagrangian tangent to the circle")
            else:
                w = _unit(lam[0])
            alpha = metric_form(w, nu)
            beta = metric_form(w, 1j * nu)
            if abs(beta) < 1e-10:
                raise ValueError("cylinder tangent to boundary Lagrangian "
                                 "(adaptation undefined)")
            out[k] = alpha / beta
        return out

    def boundary_projector(self, points) -> sp.csr_matrix:
        """Derivative of the boundary projection at the given node set:
        identity at interior nodes, tangent-plane projector of the target
        Lagrangian at boundary nodes."""
        mesh = self.base
        n = mesh.ambient.n
        N = mesh.grid.n_nodes
        rows, cols, data = [], [], []
        special = {}
        for ids, lag in ((mesh.c0_nodes, self.lag0), (mesh.c1_nodes, self.lag1)):
            for i in ids:
                lam = _gram_schmidt_real(lag.tangent_at(points[i]))
                L = np.stack([np.ascontiguousarray(v).view(float) for v in lam])
                special[i] = L.T @ L
        for i in range(N):
            base_idx = 2 * n * i
            if i in special:
                P = special[i]
                for r in range(2 * n):
                    for c in range(2 * n):
                        if P[r, c] != 0.0:
                            rows.append(base_idx + r)
                            cols.append(base_idx + c)
                            data.append(P[r, c])
            else:
                for r in range(2 * n):
                    rows.append(base_idx + r)
                    cols.append(base_idx + r)
                    data.append(1.0)
        return sp.coo_matrix((data, (rows, cols)),
                             shape=(2 * n * N,) * 2).tocsr()

    def displacement(self, u: np.ndarray) -> np.ndarray:
        flat = self.D @ np.asarray(u, float)
        n = self.base.ambient.n
        comp = flat.reshape(-1, 2 * n)
        return comp[:, 0::2] + 1j * comp[:, 1::2]

    def embed(self, u, project: bool = True) -> CylinderMesh:
        u = np.asarray(u, float)
        disp = self.displacement(u)
        step = np.linalg.norm(disp.view(float).reshape(len(disp), -1), axis=1)
        if np.max(step) > self.chart_radius:
            raise ChartOverflow(
                f"displacement {np.max(step):.3e} exceeds chart radius "
                f"{self.chart_radius:.3e}")
        pts = self.base.points + disp
        if project:
            pts[self.base.c0_nodes] = _project_rows(self.lag0, pts[self.base.c0_nodes])
            pts[self.base.c1_nodes] = _project_rows(self.lag1, pts[self.base.c1_nodes])
        return self.base.copy_with_points(pts)


def _unit(v):
    nrm = math.sqrt(metric_form(v, v))
    return v / nrm if nrm > 0 else v


def _project_rows(lag, pts):
    xi = lag.project(pts)
    return lag.point(np.atleast_2d(np.asarray(xi, float)))


def chart_embed(chart: WeinsteinChart, u: ScalarField | np.ndarray) -> CylinderMesh:
    vals = u.values if isinstance(u, ScalarField) else np.asarray(u, float)
    return chart.embed(vals)


# ------------------------------------------------------------ ISL cylinders

@dataclass
class IslCylinder:
    mesh: CylinderMesh
    residual_norm: float = math.inf        # normalized algebraic (weak) residual
    truncation_norm: float = math.inf      # nodal strong-form sup |*ReOmega|
    flux_coordinate: float = 0.0
    _harmonic: Optional[ScalarField] = None
    _stiffness: object = None

    @property
    def ambient(self):
        return self.mesh.ambient

    def stiffness(self):
        if self._stiffness is None:
            self._stiffness = assemble(self.mesh)
        return self._stiffness

    def harmonic(self) -> ScalarField:
        if self._harmonic is None:
            self._harmonic = fundamental_harmonic(self.mesh, self.stiffness())
        return self._harmonic

    def invariants(self, lag0=None, lag1=None, tol=DEFAULT_TOL) -> dict:
        mesh = self.mesh
        out = {
            "residual_weak": self.residual_norm,
            "residual_strong": self.truncation_norm,
            "face_omega_max": float(np.max(np.abs(mesh.face_omega()))),
            "face_area_scale": mesh.face_area_scale(),
            "immersion_gap": mesh.immersion_gap(),
        }
        signs = im_omega_element_signs(mesh)
        flip = -1.0 if np.mean(np.sign(signs)) < 0 else 1.0
        out["im_omega_positive"] = bool(np.all(flip * signs > 0))
        if lag0 is not None:
            out["bc0_distance"] = mesh.boundary_distance(0, lag0)
        if lag1 is not None:
            out["bc1_distance"] = mesh.boundary_distance(1, lag1)
        out["ok"] = (out["residual_weak"] < tol.tol_isl
                     and out["face_omega_max"] < tol.tol_lag_mesh * out["face_area_scale"]
                     and out["im_omega_positive"]
                     and out["immersion_gap"] > 0
                     and out.get("bc0_distance", 0.0) < tol.tol_bc
                     and out.get("bc1_distance", 0.0) < tol.tol_bc)
        return out


def tangent_direction(isl: IslCylinder) -> ScalarField:
    """Unique (up to scale) tangent to the solution family: the fundamental
    harmonic, normalized to boundary value one on C1."""
    return isl.harmonic()


def make_isl(mesh, order: int = 2) -> IslCylinder:
    R, V = sl_weak_residual(mesh, order)
    interior = _interior_ids(mesh)
    cyl = IslCylinder(mesh)
    cyl.residual_norm = float(np.max(np.abs(R[interior] / V[interior]))) \
        if len(interior) else 0.0
    cyl.truncation_norm = float(np.max(np.abs(R / V)))
    return cyl


def _interior_ids(mesh):
    mask = np.ones(mesh.grid.n_nodes, dtype=bool)
    mask[mesh.c0_nodes] = False
    mask[mesh.c1_nodes] = False
    return np.where(mask)[0]


# ------------------------------------------------------------------ Newton

def sl_jacobian_points(mesh, order: int = 2) -> sp.csr_matrix:
    """Exact derivative of the weak residual with respect to node positions.

    Rows are test nodes, columns the interleaved real components of the
    points array. The Re(Omega) pullback is multilinear in the corner
    positions, so the derivative is available in closed form (including the
    holomorphic density term).
    """
    if isinstance(mesh, SegmentMesh):
        return _segment_jacobian_points(mesh)
    q = mesh.quadrature(order)
    N, dN, w = q["N"], q["dN"], q["w"]
    tau1, tau2, pos = q["tau1"], q["tau2"], q["pos"]
    quads = q["quads"]
    nn = mesh.grid.n_nodes
    n = mesh.ambient.n
    dens = mesh.ambient._eff_density()
    if dens.is_constant:
        dval = np.ones(pos.shape[:2], dtype=complex)
        gl = None
    else:
        dval = np.exp(dens.log_at(pos))
        gl = dens.grad_log_at(pos)
    det = tau1[..., 0] * tau2[..., 1] - tau1[..., 1] * tau2[..., 0]
    rows, cols, data = [], [], []
    for c in range(4):
        for k in range(n):
            for unit in (1.0, 1j):
                # derivative of the 2-form value at each quad point for a
                # unit perturbation of corner c in coordinate k
                if k == 0:
                    ddet = (dN[None, :, c, 0] * unit * tau2[..., 1]
                            - dN[None, :, c, 1] * unit * tau1[..., 1])
                else:
                    ddet = (-dN[None, :, c, 0] * unit * tau2[..., 0]
                            + dN[None, :, c, 1] * unit * tau1[..., 0])
                term = dval * ddet
                if gl is not None:
                    term = term + N[None, :, c] * gl[..., k] * unit * dval * det
                dR = np.einsum("q,qa,eq->ea", w, N, np.real(term))  # (E, 4)
                comp = 2 * k + (0 if unit == 1.0 else 1)
                rows.append(quads.ravel())
                cols.append(np.repeat(2 * n * quads[:, c] + comp, 4))
                data.append(dR.ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    data = np.concatenate(data)
    return sp.coo_matrix((data, (rows, cols)), shape=(nn, 2 * n * nn)).tocsr()


def _segment_jacobian_points(mesh: SegmentMesh) -> sp.csr_matrix:
    z = mesh.points[:, 0]
    nn = mesh.grid.n_nodes
    dens = mesh.ambient._eff_density()
    mid = 0.5 * (z[:-1] + z[1:])
    if dens.is_constant:
        dv = np.ones(len(mid), dtype=complex)
        gl = np.zeros(len(mid), dtype=complex)
    else:
        dv = np.exp(dens.log_at(mid[:, None]))
        gl = dens.grad_log_at(mid[:, None])[:, 0]
    dz = np.diff(z)
    rows, cols, data = [], [], []
    for e in range(len(dz)):
        for node, sgn in ((e, -1.0), (e + 1, 1.0)):
            for unit, comp in ((1.0, 0), (1j, 1)):
                d = np.real(dv[e] * sgn * unit + 0.5 * gl[e] * unit * dv[e] * dz[e])
                for a in (e, e + 1):
                    rows.append(a)
                    cols.append(2 * node + comp)
                    data.append(0.5 * d)
    return sp.coo_matrix((data, (rows, cols)), shape=(nn, 2 * nn)).tocsr()


def newton_correct(ambient: AmbientStructure, chart: WeinsteinChart,
                   u0, fixed_component: float, tol=DEFAULT_TOL,
                   order: int = 2, return_mesh: bool = True) -> dict:
    """Newton solve of the weak Re(Omega) equation at a fixed ell station.

    The ell coordinate is the constant boundary value on C1; every Newton
    update vanishes on both boundary circles. The linear system is the
    rho-weighted Laplacian in weak form evaluated through the chart (the
    exact discrete Jacobian: residual point-derivative chained with the
    displacement operator and the boundary-projection derivative), so the
    iteration is genuinely quadratic down to roundoff.
    """
    grid = chart.base.grid
    u = np.zeros(grid.n_nodes) if u0 is None else np.array(
        u0.values if isinstance(u0, ScalarField) else u0, float)
    u[chart.base.c0_nodes] = 0.0
    u[chart.base.c1_nodes] = fixed_component
    interior = _interior_ids(chart.base)

    mesh = chart.embed(u)
    R, V = sl_weak_residual(mesh, order)
    res = float(np.max(np.abs(R[interior] / V[interior])))
    history = [res]
    iters = 0
    while res > tol.tol_newton and iters < tol.max_newton_iter:
        JR = sl_jacobian_points(mesh, order)
        P = chart.boundary_projector(mesh.points)
        J = (JR @ P @ chart.D).tocsr()
        JII = J[interior][:, interior].tocsc()
        delta = spla.spsolve(JII, -R[interior])
        scale = 1.0
        improved = False
        for _ in range(tol.max_backtracks + 1):
            trial = u.copy()
            trial[interior] += scale * delta
            try:
                trial_mesh = chart.embed(trial)
            except ChartOverflow:
                scale *= 0.5
                continue
            Rt, Vt = sl_weak_residual(trial_mesh, order)
            rt = float(np.max(np.abs(Rt[interior] / Vt[interior])))
            if rt < res or rt < tol.tol_newton:
                u, mesh, R, V, res = trial, trial_mesh, Rt, Vt, rt
                improved = True
                break
            scale *= 0.5
        iters += 1
        history.append(res)
        if not improved:
            raise NewtonDivergence(
                f"no residual decrease after {tol.max_backtracks} backtracks "
                f"(residual {res:.3e})")
    if res > tol.tol_newton:
        raise NewtonDivergence(f"Newton stalled at residual {res:.3e}")
    out = {"u": ScalarField(u, "zero_C0_const_C1"), "iterations": iters,
           "residual_history": history, "residual": res}
    if return_mesh:
        out["mesh"] = mesh
    return out


# -------------------------------------------------------------- omega repair

def omega_repair(mesh: CylinderMesh, lag0, lag1, tol=DEFAULT_TOL,
                 sweeps: int = 2) -> CylinderMesh:
    """Remove the quadratic omega defect of charted meshes.

    Minimal-norm Gauss-Newton on the exact face symplectic areas; interior
    nodes move in the J-rotated tangent frame, boundary nodes slide inside
    their Lagrangians (and are re-projected exactly).
    """
    grid = mesh.grid
    quads = grid.quads()
    N = grid.n_nodes
    interior = _interior_ids(mesh)
    bmask = np.zeros(N, dtype=bool)
    bmask[mesh.c0_nodes] = True
    bmask[mesh.c1_nodes] = True

    current = mesh
    for _ in range(sweeps):
        pts = current.points
        areas = shoelace_omega(pts[quads])
        scale = current.face_area_scale()
        if np.max(np.abs(areas)) < 0.02 * tol.tol_lag_mesh * scale:
            break
        ids, raw = grid_frames(grid, pts, current.orientation)
        dirs = np.zeros((N, 2, current.ambient.n), dtype=complex)
        ndof = np.zeros(N, dtype=int)
        for k in range(N):
            O = _gram_schmidt_real(raw[k])
            if bmask[k]:
                lag = lag0 if k in set(mesh.c0_nodes) else lag1
                T = lag.tangent_at(pts[k])
                lam = _gram_schmidt_real(T)
                tau_c = O[0]
                w = lam[1] - metric_form(lam[1], tau_c) * tau_c
                if metric_form(w, w) < 1e-12:
                    w = lam[0] - metric_form(lam[0], tau_c) * tau_c
                dirs[k, 0] = _unit(w)
                ndof[k] = 1
            else:
                dirs[k, 0] = 1j * O[0]
                dirs[k, 1] = 1j * O[1]
                ndof[k] = 2
        offsets = np.concatenate([[0], np.cumsum(ndof)])
        total = offsets[-1]
        rows, cols, data = [], [], []
        corners = pts[quads]
        for f, quad in enumerate(quads):
            for c, nd in enumerate(quad):
                zn = corners[f, (c + 1) % 4] - corners[f, (c - 1) % 4]
                for d in range(ndof[nd]):
                    rows.append(f)
                    cols.append(offsets[nd] + d)
                    data.append(0.5 * omega_form(dirs[nd, d], zn))
        J = sp.coo_matrix((data, (rows, cols)), shape=(len(quads), total)).tocsr()
        sol = spla.lsqr(J, -areas, damp=1e-9 * scale, atol=1e-14, btol=1e-14,
                        iter_lim=400)[0]
        disp = np.zeros_like(pts)
        for k in range(N):
            for d in range(ndof[k]):
                disp[k] += sol[offsets[k] + d] * dirs[k, d]
        new_pts = pts + disp
        new_pts[mesh.c0_nodes] = _project_rows(lag0, new_pts[mesh.c0_nodes])
        new_pts[mesh.c1_nodes] = _project_rows(lag1, new_pts[mesh.c1_nodes])
        current = current.copy_with_points(new_pts)
    return current


def _displacement_dofs(mesh: CylinderMesh, lag0, lag1):
    """Per-node displacement directions used by the geometric stages.

    Interior nodes move in the J-rotated orthonormal tangent frame (two
    directions); boundary nodes get the single in-Lagrangian direction
    transverse to their circle, so slides stay on the boundary condition to
    first order. Returns (dirs (N, 2, n), ndof (N,), offsets (N+1,)).
    """
    grid = mesh.grid
    N = grid.n_nodes
    pts = mesh.points
    bset0 = set(mesh.c0_nodes.tolist())
    bset1 = set(mesh.c1_nodes.tolist())
    ids, raw = grid_frames(grid, pts, mesh.orientation)
    dirs = np.zeros((N, 2, mesh.ambient.n), dtype=complex)
    ndof = np.zeros(N, dtype=int)
    for k in range(N):
        O = _gram_schmidt_real(raw[k])
        if k in bset0 or k in bset1:
            lag = lag0 if k in bset0 else lag1
            T = lag.tangent_at(pts[k])
            lam = _gram_schmidt_real(T)
            tau_c = O[0]
            w = lam[1] - metric_form(lam[1], tau_c) * tau_c
            if metric_form(w, w) < 1e-12:
                w = lam[0] - metric_form(lam[0], tau_c) * tau_c
            dirs[k, 0] = _unit(w)
            ndof[k] = 1
        else:
            dirs[k, 0] = 1j * O[0]
            dirs[k, 1] = 1j * O[1]
            ndof[k] = 2
    offsets = np.concatenate([[0], np.cumsum(ndof)])
    return dirs, ndof, offsets


def combined_polish(mesh: CylinderMesh, lag0, lag1, tol=DEFAULT_TOL,
                    order: int = 2, max_iter: int = 32) -> CylinderMesh:
    """Gauss-Newton on the coupled system: weak Re(Omega) residual at
    interior nodes, exact face symplectic areas, and one station row pinning
    the mean C1 slide, all in the displacement degrees of freedom.

    This is the stage that certifies cylinders: the scalar Newton leaves an
    omega defect quadratic in its own update which an alternating repair
    cannot remove, while the coupled system converges to the intersection
    of both zero sets at the pinned station.
    """
    grid = mesh.grid
    quads = grid.quads()
    interior = _interior_ids(mesh)
    current = mesh
    for _ in range(max_iter):
        pts = current.points
        R, V = sl_weak_residual(current, order)
        areas = shoelace_omega(pts[quads])
        scale = current.face_area_scale()
        res_f = float(np.max(np.abs(R[interior] / V[interior])))
        res_o = float(np.max(np.abs(areas))) / scale
        if res_f < tol.tol_newton and res_o < 0.2 * tol.tol_lag_mesh:
            break
        dirs, ndof, offsets = _displacement_dofs(current, lag0, lag1)
        total = offsets[-1]
        # face-omega rows, normalized by the face area scale
        rows, cols, data = [], [], []
        corners = pts[quads]
        for f, quad in enumerate(quads):
            for c, nd in enumerate(quad):
                zn = corners[f, (c + 1) % 4] - corners[f, (c - 1) % 4]
                for d in range(ndof[nd]):
                    rows.append(f)
                    cols.append(offsets[nd] + d)
                    data.append(0.5 * omega_form(dirs[nd, d], zn) / scale)
        Jo = sp.coo_matrix((data, (rows, cols)),
                           shape=(len(quads), total)).tocsr()
        # weak residual rows through the displacement directions
        JR = sl_jacobian_points(current, order)
        n = current.ambient.n
        rows, cols, data = [], [], []
        for k in range(grid.n_nodes):
            base = 2 * n * k
            for d in range(ndof[k]):
                vec = np.ascontiguousarray(dirs[k, d]).view(float)
                for comp in range(2 * n):
                    if vec[comp] != 0.0:
                        rows.append(base + comp)
                        cols.append(offsets[k] + d)
                        data.append(vec[comp])
        Dmat = sp.coo_matrix((data, (rows, cols)),
                             shape=(2 * n * grid.n_nodes, total)).tocsr()
        Jf = (JR @ Dmat)[interior].multiply(1.0 / V[interior, None]).tocsr()
        # station row: mean slide over C1
        c1 = mesh.c1_nodes
        svals = np.zeros(total)
        for k in c1:
            svals[offsets[k]] = 1.0 / len(c1)
        Js = sp.csr_matrix(svals)
        J = sp.vstack([Jf, Jo, Js]).tocsr()
        rhs = np.concatenate([-R[interior] / V[interior], -areas / scale, [0.0]])
        JtJ = (J.T @ J).tocsc()
        Jtr = J.T @ rhs
        dmax = float(JtJ.diagonal().max())
        step_cap = 1.0 * math.sqrt(scale)
        norm0 = float(np.linalg.norm(rhs))
        accepted = False
        lam = getattr(current, "_lm_lambda", 1e-9) * dmax
        for _ in range(12):
            sol = spla.splu(JtJ + lam * sp.identity(total, format="csc")).solve(Jtr)
            smax = float(np.max(np.abs(sol)))
            if smax > step_cap:
                lam *= 8.0
                continue
            disp = np.zeros_like(pts)
            for k in range(grid.n_nodes):
                for d in range(ndof[k]):
                    disp[k] += sol[offsets[k] + d] * dirs[k, d]
            new_pts = pts + disp
            new_pts[mesh.c0_nodes] = _project_rows(lag0, new_pts[mesh.c0_nodes])
            new_pts[mesh.c1_nodes] = _project_rows(lag1, new_pts[mesh.c1_nodes])
            trial = current.copy_with_points(new_pts)
            Rt, Vt = sl_weak_residual(trial, order)
            at = shoelace_omega(new_pts[quads])
            nt = float(np.linalg.norm(np.concatenate(
                [Rt[interior] / Vt[interior], at / scale])))
            if nt < norm0:
                current = trial
                current._lm_lambda = max(lam / dmax / 16.0, 1e-12)
                accepted = True
                break
            lam *= 8.0
        if not accepted:
            break
    return current


def solve_cylinder(ambient, base_mesh, lag0, lag1, ell: float = 0.0,
                   u0=None, tol=DEFAULT_TOL, order: int = 2,
                   repair: bool = True, max_cycles: int = 3) -> IslCylinder:
    """Full corrector: scalar Newton at the fixed station, then the coupled
    displacement polish that drives the face omega defect to tolerance
    without disturbing the weak residual or the station."""
    mesh = base_mesh
    if u0 is None and ell == 0.0:
        probe = make_isl(mesh, order)
        scale = mesh.face_area_scale() if isinstance(mesh, CylinderMesh) else 1.0
        fo = (float(np.max(np.abs(mesh.face_omega())))
              if isinstance(mesh, CylinderMesh) else 0.0)
        if (probe.residual_norm < tol.tol_newton
                and fo < tol.tol_lag_mesh * scale
                and mesh.boundary_distance(0, lag0) < tol.tol_bc
                and mesh.boundary_distance(1, lag1) < tol.tol_bc):
            return probe
    chart = WeinsteinChart(mesh, lag0, lag1, tol)
    result = newton_correct(ambient, chart, u0, ell, tol, order)
    mesh = result["mesh"]
    if isinstance(mesh, CylinderMesh) and repair:
        scale = mesh.face_area_scale()
        if float(np.max(np.abs(mesh.face_omega()))) >= tol.tol_lag_mesh * scale:
            mesh = combined_polish(mesh, lag0, lag1, tol, order)
    cyl = make_isl(mesh, order)
    return cyl


# ------------------------------------------------------------- continuation

@dataclass
class FamilyLog:
    reason: str = "completed"
    steps_taken: int = 0
    details: str = ""


def continue_family(ambient, seed: IslCylinder, step: float, count: int,
                    boundary_condition: Tuple[BoundaryLagrangian, BoundaryLagrangian],
                    tol=DEFAULT_TOL, order: int = 2) -> Tuple[List[IslCylinder], FamilyLog]:
    """Predictor-corrector continuation of the one-parameter cylinder family.

    The predictor moves by step * (fundamental harmonic); the corrector is
    the fixed-station Newton solve in the chart of the last accepted
    cylinder, with adaptive step halving on divergence (floor: min_step).
    Each accepted cylinder is annotated with its relative flux coordinate
    (exact discrete strip area from the previous cylinder).
    """
    lag0, lag1 = boundary_condition
    family = [seed]
    log = FamilyLog()
    if step == 0.0:
        for _ in range(count):
            dup = IslCylinder(seed.mesh, seed.residual_norm, seed.truncation_norm,
                              seed.flux_coordinate)
            family.append(dup)
        log.steps_taken = count
        return family, log
    initial_diam = seed.mesh.diameter()
    current_step = step
    k = 0
    while k < count:
        cur = family[-1]
        if cur.mesh.diameter() < tol.end_threshold * initial_diam:
            log.reason = "end_threshold"
            log.details = "cylinder diameter below end threshold; hand off to the end solver"
            break
        sigma = tangent_direction(cur).values
        try:
            nxt = solve_cylinder(ambient, cur.mesh, lag0, lag1,
                                 ell=current_step, u0=current_step * sigma,
                                 tol=tol, order=order)
        except (NewtonDivergence, ChartOverflow) as exc:
            if abs(current_step) * 0.5 >= tol.min_step:
                current_step *= 0.5
                continue
            log.reason = "corrector_divergence"
            log.details = str(exc)
            break
        nxt.flux_coordinate = cur.flux_coordinate + strip_flux(cur.mesh, nxt.mesh)
        family.append(nxt)
        k += 1
        log.steps_taken = k
        if abs(current_step) < abs(step):
            current_step = math.copysign(min(abs(current_step) * 2, abs(step)), step)
    return family, log


def strip_flux(mesh_a: CylinderMesh, mesh_b: CylinderMesh, p_index: int = 0) -> float:
    """Exact symplectic area of the bilinear strip between matched t-lines."""
    if isinstance(mesh_a, SegmentMesh):
        za = mesh_a.points[:, 0]
        zb = mesh_b.points[:, 0]
        tot = 0.0
        for j in range(len(za) - 1):
            quad = np.array([[za[j]], [za[j + 1]], [zb[j + 1]], [zb[j]]])
            tot += shoelace_omega(quad[None, :, :])[0]
        return float(tot)
    grid = mesh_a.grid
    ia = [grid.node(p_index, j) for j in range(grid.K + 1)]
    za = mesh_a.points[ia]
    zb = mesh_b.points[ia]
    tot = 0.0
    for j in range(grid.K):
        quad = np.stack([za[j], za[j + 1], zb[j + 1], zb[j]])
        tot += shoelace_omega(quad[None, :, :])[0]
    return float(tot)


# ------------------------------------------------------------ end machinery

def euler_tangency_check(mesh, tol=DEFAULT_TOL) -> dict:
    """Minimum angle between the position (Euler) vector and tangent planes.

    Meaningful for cylinders in a linear ambient centered at the cone point.
    """
    ids, raw = grid_frames(mesh.grid, mesh.points, mesh.orientation)
    min_angle = math.pi / 2
    for k, i in enumerate(ids):
        z = mesh.points[i]
        nrm = math.sqrt(metric_form(z, z))
        if nrm < 1e-14:
            continue
        O = _gram_schmidt_real(raw[k])
        proj = sum(metric_form(z, O[j]) * O[j] for j in range(len(O)))
        perp = z - proj
        s = min(1.0, math.sqrt(max(metric_form(perp, perp), 0.0)) / nrm)
        min_angle = min(min_angle, math.asin(s))
    return {"nowhere_tangent": bool(min_angle > tol.tol_euler),
            "min_angle": float(min_angle)}


@dataclass
class EndSolution:
    """Rescaled solutions about an intersection point q.

    ``cone`` is the s -> 0 solution in the tangent space (cone coordinates);
    ``scaled`` maps s to the tangent-space solution Psi_s, so the ambient
    mesh at s is q + s * Psi_s.
    """

    q: np.ndarray
    s_values: List[float]
    cone: IslCylinder
    scaled: List[IslCylinder]

    def ambient_mesh(self, idx: int) -> CylinderMesh:
        s = self.s_values[idx]
        m = self.scaled[idx].mesh
        return m.copy_with_points(self.q[None, :] + s * m.points)


def end_rescale_solve(ambient: AmbientStructure, boundary_condition, q,
                      s: float, seed_direction: CylinderMesh,
                      tol=DEFAULT_TOL, order: int = 2) -> IslCylinder:
    """Solve the rescaled problem at parameter s with linearized boundaries.

    The ambient is recentered at q with density(q + s z); the boundary
    Lagrangians are the tangent planes T_q Lambda_i; the seed lives in the
    tangent space. Returns the tangent-space solution Psi_s (multiply by s
    and translate by q for the ambient cylinder).
    """
    lag0, lag1 = boundary_condition
    q = np.asarray(q, dtype=complex)
    if s < 0 or s > tol.end_s_max:
        raise ValueError(f"s = {s} outside [0, end_s_max]")
    amb_s = ambient.recentered(q, s)
    P0 = LinearSubspace(lag0.tangent_at(q), amb_s)
    P1 = LinearSubspace(lag1.tangent_at(q), amb_s)
    seed = CylinderMesh(seed_direction.grid, seed_direction.points, amb_s,
                        seed_direction.orientation)
    return solve_cylinder(amb_s, seed, P0, P1, ell=0.0, tol=tol, order=order)


def solve_end_family(ambient, boundary_condition, q, seed_direction,
                     s_values: Sequence[float], tol=DEFAULT_TOL) -> EndSolution:
    cone = end_rescale_solve(ambient, boundary_condition, q, 0.0,
                             seed_direction, tol)
    scaled = [end_rescale_solve(ambient, boundary_condition, q, s,
                                cone.mesh, tol) for s in s_values]
    return EndSolution(np.asarray(q, complex), list(s_values), cone, scaled)


# --------------------------------------------------------------- regularity

def classify_regularity(family: Sequence[IslCylinder],
                        ends: Sequence[EndSolution] = (),
                        tol=DEFAULT_TOL) -> dict:
    """Interior and end regularity of an ordered cylinder family.

    Checks: (i) regular harmonics on every cylinder; (ii) consecutive
    boundary circles disjoint and advancing monotonically; (iii) each end's
    cone solution nowhere tangent to the Euler field, an immersion, with
    regular harmonics (the cross-check of the tangency criterion).
    """
    causes = []
    for idx, cyl in enumerate(family):
        scan = critical_point_scan(cyl.mesh, cyl.harmonic(), tol)
        if scan["has_critical_points"]:
            causes.append(f"harmonics: critical point on cylinder {idx}")
            break
    for which in (0, 1):
        for idx in range(len(family) - 1):
            ma, mb = family[idx].mesh, family[idx + 1].mesh
            ids = ma.c0_nodes if which == 0 else ma.c1_nodes
            la, lb = ma.points[ids], mb.points[ids]
            gap = _polyline_gap(la, lb)
            if gap <= 0:
                causes.append(f"boundary {which}: circles {idx},{idx+1} touch")
                break
            if not _loops_nested(la, lb):
                causes.append(f"boundary {which}: non-monotone advance at {idx}")
                break
    end_reports = []
    for e in ends:
        rep = euler_tangency_check(e.cone.mesh, tol)
        rep["immersion_gap"] = e.cone.mesh.immersion_gap()
        scan = critical_point_scan(e.cone.mesh, e.cone.harmonic(), tol)
        rep["regular_harmonics"] = not scan["has_critical_points"]
        rep["ok"] = (rep["nowhere_tangent"] and rep["immersion_gap"] > 0
                     and rep["regular_harmonics"])
        if not rep["ok"]:
            causes.append("end: " + ("euler tangency" if not rep["nowhere_tangent"]
                                     else "irregular end"))
        end_reports.append(rep)
    if causes:
        verdict = "not regular"
    elif ends:
        verdict = "regular"
    else:
        verdict = "interior-regular"
    return {"verdict": verdict, "causes": causes, "ends": end_reports,
            "n_cylinders": len(family)}


def _polyline_gap(la: np.ndarray, lb: np.ndarray) -> float:
    """Minimum distance between two closed polylines (point-to-segment)."""
    def one_way(A, B):
        seg = np.roll(B, -1, axis=0) - B
        seglen2 = np.sum(np.abs(seg) ** 2, axis=-1)
        worst = math.inf
        for z in A:
            w = z[None, :] - B
            t = np.clip(np.real(np.sum(np.conj(seg) * w, -1))
                        / np.maximum(seglen2, 1e-300), 0.0, 1.0)
            d = w - t[:, None] * seg
            worst = min(worst, float(np.min(np.sum(np.abs(d) ** 2, -1))))
        return math.sqrt(worst)
    return min(one_way(la, lb), one_way(lb, la))


def _loops_nested(la: np.ndarray, lb: np.ndarray) -> bool:
    """Whether one loop encloses the other in its dominant 2-plane.

    Projects both loops onto the two leading principal directions of their
    union and tests containment by winding numbers; monotone advance of the
    boundary circles along the Lagrangian means consecutive circles are
    strictly nested (either way around).
    """
    both = np.concatenate([la, lb]).view(float).reshape(len(la) + len(lb), -1)
    ctr = both.mean(axis=0)
    _, _, vt = np.linalg.svd(both - ctr, full_matrices=False)
    A = (la.view(float).reshape(len(la), -1) - ctr) @ vt[:2].T
    B = (lb.view(float).reshape(len(lb), -1) - ctr) @ vt[:2].T

    def inside(pts, poly):
        x, y = pts[:, 0:1], pts[:, 1:2]
        px, py = poly[:, 0], poly[:, 1]
        qx, qy = np.roll(px, -1), np.roll(py, -1)
        cross = (qx - px) * (y - py) - (qy - py) * (x - px)
        cond = ((py <= y) & (qy > y) & (cross > 0)) | ((py > y) & (qy <= y) & (cross < 0))
        wind = np.sum(np.where(cond, np.sign(cross), 0), axis=1)
        return wind != 0

    a_in_b = inside(A, B)
    b_in_a = inside(B, A)
    return bool(np.all(a_in_b) and not np.any(b_in_a)) or         bool(np.all(b_in_a) and not np.any(a_in_b))


# ------------------------------------------------------------ one-dim check

def family_kernel_dims(family: Sequence[IslCylinder], tol=DEFAULT_TOL) -> List[int]:
    return [kernel_report(c.stiffness(), True, tol)["dim_estimate"] for c in family]
