"""Geodesics of positive Lagrangians and the cylinder correspondence.

The generator integrates the horizontal flow

    dPsi/dt = -J grad(h) - tan(theta) grad(h),

with the gradient and phase recomputed on the current node set each stage
and the nodal Hamiltonian h carried unchanged, which makes all three
equations of the geodesic system hold by construction up to integration
error. The forward transform slices the static Hamiltonian at regular
values, sweeps each level loop through time into a cylinder, and checks
that the time function is harmonic for the weighted Laplacian of the
extracted cylinder. The inverse direction reparameterizes a cylinder family
compatibly with its fundamental harmonics (tracing grad(sigma)/|grad
sigma|^2 from the C0 boundary), stacks t-slices into Lagrangians, and
recovers the Hamiltonian from relative flux.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .ambient import AmbientStructure, metric_form, omega_form, wrap_angle
from .config import DEFAULT_TOL, Resolution
from .elliptic import ScalarField, assemble, fundamental_harmonic
from .grids import (CylGrid, DiskGrid, SegmentGrid, _axis_derivative,
                    disk_fit, disk_gradient_frames, fd_matrices, level_loops,
                    resample_loop, LoopSampling)
from .lagrangian import (BoundaryLagrangian, Potential, ScaledPotential,
                         intersection_points, perturb_graph)
from .mesh import CylinderMesh, LagrangianMesh, SegmentMesh, shoelace_omega
from .slc import (EndSolution, IslCylinder, _interior_ids, _lumped_volume,
                  classify_regularity, make_isl, sl_weak_residual,
                  solve_cylinder, solve_end_family)


# ------------------------------------------------------------ velocity law

def frames_and_gradient(grid, points, values):
    """Oriented node frames and surface gradient for any supported grid."""
    if isinstance(grid, DiskGrid):
        return disk_gradient_frames(grid, points, values)
    if isinstance(grid, CylGrid):
        S = fd_matrices(grid)
        taus = [Si @ points for Si in S]
        frames = np.stack(taus, axis=1)
        from .grids import cyl_gradient
        return frames, cyl_gradient(grid, points, values)
    if isinstance(grid, SegmentGrid):
        (St,) = fd_matrices(grid)
        tau = St @ points
        from .grids import segment_gradient
        return tau[:, None, :], segment_gradient(grid, points, values)
    raise TypeError(f"unsupported grid {type(grid).__name__}")


def node_phases(ambient: AmbientStructure, frames: np.ndarray) -> np.ndarray:
    """Phases of oriented node frames (N, n, n) -> (N,), vectorized for the
    flat form; falls back to per-node evaluation under deformations."""
    if ambient.deformation is not None:
        return np.array([wrap_angle(np.angle(ambient.omega_n_form(
            np.zeros(ambient.n), f))) for f in frames])
    n = ambient.n
    if n == 1:
        det = frames[:, 0, 0]
    else:
        det = (frames[:, 0, 0] * frames[:, 1, 1]
               - frames[:, 0, 1] * frames[:, 1, 0])
    dens = ambient._eff_density()
    if not dens.is_constant:
        # evaluated at the frame basepoints by the caller's convention:
        # phases shift by the density argument
        raise ValueError("node_phases needs basepoints under a density; "
                         "use node_phases_at")
    return wrap_angle(np.angle(det))


def node_phases_at(ambient: AmbientStructure, points, frames) -> np.ndarray:
    n = ambient.n
    if n == 1:
        det = frames[:, 0, 0]
    else:
        det = (frames[:, 0, 0] * frames[:, 1, 1]
               - frames[:, 0, 1] * frames[:, 1, 0])
    dens = ambient._eff_density()
    if dens.is_constant:
        return wrap_angle(np.angle(det))
    return wrap_angle(np.angle(np.exp(dens.log_at(points)) * det))


def horizontal_velocity(ambient, grid, points, h, tol=DEFAULT_TOL):
    """-J grad(h) - tan(theta) grad(h) on the current node set."""
    frames, grad = frames_and_gradient(grid, points, h)
    theta = node_phases_at(ambient, points, frames)
    worst = float(np.max(np.abs(theta)))
    if worst > math.pi / 2 - tol.delta_phase:
        raise RuntimeError(
            f"phase blow-up: |theta| reached {worst:.4f} "
            f"(limit {math.pi / 2 - tol.delta_phase:.4f})")
    return -(1j + np.tan(theta))[:, None] * grad


# ------------------------------------------------------------ geodesic path

@dataclass
class GeodesicPath:
    """A t-indexed family of Lagrangian meshes with shared node indexing."""

    grid: object
    times: np.ndarray                  # (T+1,)
    points: np.ndarray                 # (T+1, N, n) complex, the lifting
    h: np.ndarray                      # (N,) static nodal Hamiltonian
    ambient: AmbientStructure
    cone_params: List[np.ndarray] = field(default_factory=list)
    cone_images: List[np.ndarray] = field(default_factory=list)
    orientation: int = 1
    bundle: Optional[object] = None    # attached transform data (pipelines)

    @property
    def T(self) -> int:
        return len(self.times) - 1

    def mesh_at(self, k: int) -> LagrangianMesh:
        return LagrangianMesh(self.grid, self.points[k], self.ambient,
                              self.orientation)

    def copy(self) -> "GeodesicPath":
        return GeodesicPath(self.grid, self.times.copy(), self.points.copy(),
                            self.h.copy(), self.ambient,
                            [np.array(c) for c in self.cone_params],
                            [np.array(c) for c in self.cone_images],
                            self.orientation, self.bundle)


def geodesic_ivp(ambient: AmbientStructure, start: LagrangianMesh,
                 h, T: int, tol=DEFAULT_TOL) -> GeodesicPath:
    """Integrate the horizontal flow of a nodal Hamiltonian (RK4, T steps).

    The nodal values of h ride along with the nodes, so h o Psi_t is
    constant exactly; horizontality and the Hamiltonian equation hold by
    the algebra of the velocity law, quantified by geodesic_residual.
    """
    hvals = np.asarray(h.values if isinstance(h, ScalarField) else h, float)
    grid = start.grid
    pts = start.points.copy()
    dt = 1.0 / T
    out = np.empty((T + 1,) + pts.shape, dtype=complex)
    out[0] = pts
    for k in range(T):
        y = out[k]
        k1 = horizontal_velocity(ambient, grid, y, hvals, tol)
        k2 = horizontal_velocity(ambient, grid, y + 0.5 * dt * k1, hvals, tol)
        k3 = horizontal_velocity(ambient, grid, y + 0.5 * dt * k2, hvals, tol)
        k4 = horizontal_velocity(ambient, grid, y + dt * k3, hvals, tol)
        out[k + 1] = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    path = GeodesicPath(grid, np.arange(T + 1) / T, out, hvals, ambient,
                        orientation=start.orientation)
    _mark_critical_points(path, tol)
    return path


def _mark_critical_points(path: GeodesicPath, tol=DEFAULT_TOL):
    """Locate interior critical points of h in the parameter chart."""
    grid = path.grid
    if not isinstance(grid, DiskGrid):
        return
    xy = grid.xy()
    sol = _h_coeffs(path)                     # local grad/hess of h
    gn = np.linalg.norm(sol[:, :2], axis=1)
    rim = np.max(np.abs(xy))
    interior = np.where(np.linalg.norm(xy, axis=1) < 0.8 * rim)[0]
    order = interior[np.argsort(gn[interior])]
    by_value = interior[np.argsort(path.h[interior])]
    cand = np.concatenate([order[:max(8, grid.M // 2)],
                           by_value[:8], by_value[-8:]])
    found = []
    for i in cand:
        x = xy[i].copy()
        ok = True
        for _ in range(40):
            g, H = _h_fit_at(path, x)
            try:
                step = np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                ok = False
                break
            x = x - step
            if np.linalg.norm(step) < 1e-12:
                break
        if not ok or np.linalg.norm(x - xy[i]) > 0.5 \
                or np.linalg.norm(x) > 0.85 * rim:
            continue
        if any(np.linalg.norm(x - f) < 1e-4 for f in found):
            continue
        g, H = _h_fit_at(path, x)
        evals = np.linalg.eigvalsh(H)
        if np.all(evals < 0) or np.all(evals > 0):   # extrema only
            found.append(x)
    order = np.argsort([-_h_value_at(path, x) for x in found])
    path.cone_params = [found[i] for i in order]
    path.cone_images = [_position_at(path, 0, x) for x in path.cone_params]


def _h_coeffs(path: GeodesicPath):
    key = path.h.tobytes()
    cache = getattr(path, "_hfit", None)
    if cache is None or cache[0] != key:
        sol = disk_fit(path.grid).fit(path.h[:, None])[:, :, 0]
        path._hfit = (key, sol)
    return path._hfit[1]


def _h_fit_at(path: GeodesicPath, x):
    """Gradient and Hessian of the h-interpolant at chart point x."""
    grid = path.grid
    xy = grid.xy()
    i = int(np.argmin(np.sum((xy - x) ** 2, axis=1)))
    sol = _h_coeffs(path)[i]
    d = x - xy[i]
    g = np.array([sol[0] + sol[2] * d[0] + sol[3] * d[1],
                  sol[1] + sol[3] * d[0] + sol[4] * d[1]])
    H = np.array([[sol[2], sol[3]], [sol[3], sol[4]]])
    return g, H


def _h_value_at(path: GeodesicPath, x):
    grid = path.grid
    xy = grid.xy()
    i = int(np.argmin(np.sum((xy - x) ** 2, axis=1)))
    sol = _h_coeffs(path)[i]
    d = x - xy[i]
    return float(path.h[i] + sol[0] * d[0] + sol[1] * d[1]
                 + 0.5 * sol[2] * d[0] ** 2 + sol[3] * d[0] * d[1]
                 + 0.5 * sol[4] * d[1] ** 2)


def _position_at(path: GeodesicPath, k: int, x):
    """Interpolated ambient position of chart point x at time level k."""
    grid = path.grid
    xy = grid.xy()
    i = int(np.argmin(np.sum((xy - x) ** 2, axis=1)))
    pts = path.points[k]
    sol = disk_fit(grid).fit(pts.view(float).reshape(len(pts), -1))[i]
    d = x - xy[i]
    val = (pts.view(float).reshape(len(pts), -1)[i]
           + sol[0] * d[0] + sol[1] * d[1]
           + 0.5 * sol[2] * d[0] ** 2 + sol[3] * d[0] * d[1]
           + 0.5 * sol[4] * d[1] ** 2)
    return val[0::2] + 1j * val[1::2]


def geodesic_residual(ambient: AmbientStructure, path: GeodesicPath,
                      tol=DEFAULT_TOL) -> dict:
    """Sup norms of the three geodesic equations by 4th-order t-stencils."""
    pts = path.points
    dt = path.times[1] - path.times[0]
    vel = _axis_derivative(pts, dt, periodic=False)
    horiz = 0.0
    ham = 0.0
    for k in range(len(path.times)):
        frames, grad = frames_and_gradient(path.grid, pts[k], path.h)
        v = vel[k]
        rho = path.ambient.rho_at(pts[k])
        if np.ndim(rho) == 0:
            rho = np.full(len(pts[k]), float(rho))
        for j in range(frames.shape[1]):
            tau = frames[:, j]
            if ambient.n == 1:
                re = np.real(_dens_det1(ambient, pts[k], v))
                sc = rho * _norms(v) + 1e-300
            else:
                re = np.real(_dens_det2(ambient, pts[k], v, tau))
                sc = rho * _norms(v) * _norms(tau) + 1e-300
            horiz = max(horiz, float(np.max(np.abs(re) / sc)))
            dh_tau = np.real(np.sum(np.conj(grad) * tau, axis=-1))
            ww = omega_form(v, tau)
            scale = _norms(v) * _norms(tau) + 1e-300
            ham = max(ham, float(np.max(np.abs(ww - dh_tau) / scale)))
            if ambient.n == 1:
                break
    return {"horizontality": horiz, "hamiltonian": ham, "constancy": 0.0}


def _norms(v):
    return np.sqrt(np.sum(np.abs(v) ** 2, axis=-1))


def _dens_det1(ambient, pts, v):
    dens = ambient._eff_density()
    d = v[:, 0]
    return d if dens.is_constant else np.exp(dens.log_at(pts)) * d


def _dens_det2(ambient, pts, v, tau):
    det = v[:, 0] * tau[:, 1] - v[:, 1] * tau[:, 0]
    dens = ambient._eff_density()
    return det if dens.is_constant else np.exp(dens.log_at(pts)) * det


# ------------------------------------------------------- forward transform

@dataclass
class TransformedCylinder:
    level: float
    cylinder: IslCylinder
    sigma: ScalarField                 # time function on the cylinder
    sigma_laplacian_sup: float
    sampling: LoopSampling


def critical_margin(path: GeodesicPath) -> float:
    """Minimum distance of usable levels from critical values: 3 h_mesh^2
    scaled by the largest Hessian eigenvalue of h at the critical points."""
    grid = path.grid
    if isinstance(grid, DiskGrid):
        h_mesh = 1.0 / grid.R
    elif isinstance(grid, SegmentGrid):
        h_mesh = 1.0 / grid.N
    else:
        h_mesh = 1.0 / grid.K
    hess_scale = 1.0
    for x in path.cone_params:
        _, H = _h_fit_at(path, x)
        hess_scale = max(hess_scale, float(np.max(np.abs(np.linalg.eigvalsh(H)))))
    return 3.0 * h_mesh ** 2 * hess_scale


def forward_transform(path: GeodesicPath, levels: Sequence[float],
                      M_out: Optional[int] = None, tol=DEFAULT_TOL,
                      order: int = 2) -> List[Optional[TransformedCylinder]]:
    """Extract the level cylinders of the Hamiltonian along the path.

    Returns one entry per requested level (None when the level has no
    compact loop in the mesh). Levels within the critical margin of a
    critical value are rejected.
    """
    if isinstance(path.grid, SegmentGrid):
        return _forward_transform_segment(path, levels, tol)
    hvals = path.h
    margin = critical_margin(path)
    crit_values = [_h_value_at(path, x) for x in path.cone_params]
    if M_out is None:
        M_out = path.grid.M
    out = []
    for c in levels:
        for cv in crit_values:
            if abs(c - cv) < margin:
                raise ValueError(
                    f"level {c} within the critical margin {margin:.3e} of {cv:.6f}")
        loops = level_loops(path.grid, hvals, c)
        if not loops:
            out.append(None)
            continue
        out.append(_loop_to_cylinder(path, loops[0], c, M_out, order, tol))
    return out


def _loop_to_cylinder(path, loop, c, M_out, order, tol) -> TransformedCylinder:
    sampling = resample_loop(loop, path.points[0], M_out).smoothed()
    T = path.T
    grid = CylGrid(M_out, T)
    pts = np.empty((T + 1, M_out, path.ambient.n), dtype=complex)
    for k in range(T + 1):
        pts[k] = sampling.interpolate(path.points[k])
    mesh = CylinderMesh(grid, pts.reshape(-1, path.ambient.n), path.ambient)
    from .slc import im_omega_element_signs
    if np.mean(im_omega_element_signs(mesh, order)) < 0:
        # reverse the angular direction so Im(Omega) orients positively
        idx = np.arange(M_out)[::-1]
        sampling = LoopSampling(sampling.node_ids[idx], sampling.weights[idx])
        for k in range(T + 1):
            pts[k] = sampling.interpolate(path.points[k])
        mesh = CylinderMesh(grid, pts.reshape(-1, path.ambient.n), path.ambient)
    cyl = make_isl(mesh, order)
    cyl.flux_coordinate = c
    sigma = ScalarField(np.repeat(path.times, M_out), "zero_C0_const_C1")
    st = assemble(mesh, order)
    lap = st.A @ sigma.values
    V = _lumped_volume(mesh, order)
    interior = _interior_ids(mesh)
    sup = float(np.max(np.abs(lap[interior] / V[interior])))
    return TransformedCylinder(c, cyl, sigma, sup, sampling)


def _forward_transform_segment(path, levels, tol):
    """n = 1: level sets are points on the segment; cylinders are curves in t."""
    hvals = path.h
    out = []
    xs = np.arange(len(hvals))
    for c in levels:
        sgn = np.sign(hvals - c)
        crossings = np.where(sgn[:-1] * sgn[1:] < 0)[0]
        if len(crossings) == 0:
            out.append(None)
            continue
        i = crossings[0]
        w = (c - hvals[i]) / (hvals[i + 1] - hvals[i])
        T = path.T
        pts = ((1 - w) * path.points[:, i, :] + w * path.points[:, i + 1, :])
        mesh = SegmentMesh(SegmentGrid(T), pts.reshape(T + 1, path.ambient.n),
                           path.ambient)
        cyl = make_isl(mesh)
        cyl.flux_coordinate = c
        sigma = ScalarField(path.times.copy(), "zero_C0_const_C1")
        st = assemble(mesh)
        lap = st.A @ sigma.values
        V = _lumped_volume(mesh)
        sup = float(np.max(np.abs(lap[1:-1] / V[1:-1]))) if T > 1 else 0.0
        samp = LoopSampling(np.array([[i, i + 1, i, i]]),
                            np.array([[1 - w, w, 0.0, 0.0]]))
        out.append(TransformedCylinder(c, cyl, sigma, sup, samp))
    return out


# -------------------------------------------------------------- flux

@dataclass
class FamilyParameterization:
    """Grid (p, t, s): stacked cylinder meshes sharing one CylGrid."""

    grid: object                       # CylGrid or SegmentGrid
    s_values: np.ndarray               # (S,)
    points: np.ndarray                 # (S, N, n)
    ambient: AmbientStructure
    compatible: bool = False

    @property
    def S(self) -> int:
        return len(self.s_values)

    def cylinder(self, k: int):
        cls = SegmentMesh if isinstance(self.grid, SegmentGrid) else CylinderMesh
        return cls(self.grid, self.points[k], self.ambient)

    @staticmethod
    def from_cylinders(cyls: Sequence[IslCylinder], s_values=None,
                       compatible=False) -> "FamilyParameterization":
        grid = cyls[0].mesh.grid
        pts = np.stack([c.mesh.points for c in cyls])
        if s_values is None:
            s_values = np.array([c.flux_coordinate for c in cyls])
        return FamilyParameterization(grid, np.asarray(s_values, float), pts,
                                      cyls[0].mesh.ambient, compatible)


def relative_flux(family: FamilyParameterization, s0: int, s1: int,
                  p_index: int = 0) -> dict:
    """Relative Lagrangian flux between stations s0 and s1 (grid indices).

    ``strip_integral`` is the exact symplectic area of the bilinear strip
    swept by the cross-path at p_index. ``boundary_integral`` is
    -int A_s ds with A_s recovered independently: the variation potential is
    integrated along t at every p (4th-order stencils in s, Simpson in t)
    and averaged over the C1 circle. The two must agree up to the
    discretization of the family.
    """
    if not (0 <= s0 < s1 < family.S):
        raise ValueError("need 0 <= s0 < s1 < S")
    seg = isinstance(family.grid, SegmentGrid)
    K = family.grid.N if seg else family.grid.K
    M = 1 if seg else family.grid.M

    def tline(k):
        if seg:
            return family.points[k]
        ids = [family.grid.node(p_index, j) for j in range(K + 1)]
        return family.points[k][ids]

    strip = 0.0
    for k in range(s0, s1):
        za, zb = tline(k), tline(k + 1)
        for j in range(K):
            quad = np.stack([za[j], za[j + 1], zb[j + 1], zb[j]])
            strip += shoelace_omega(quad[None, :, :])[0]

    # independent route: variation field by s-stencils, potential by t-Simpson
    s = family.s_values
    Y = _s_derivative(family.points, s)                  # (S, N, n)
    A_of_s = np.empty(family.S)
    for k in range(family.S):
        pts = family.points[k].reshape(K + 1, M, -1)
        vel = Y[k].reshape(K + 1, M, -1)
        taut = _axis_derivative(pts, 1.0 / K, periodic=False)
        integrand = omega_form(vel, taut)               # (K+1, M)
        u = _simpson_cumulative(integrand, 1.0 / K)
        A_of_s[k] = float(np.mean(u[-1]))
    boundary = -np.trapezoid(A_of_s[s0:s1 + 1], s[s0:s1 + 1])
    return {"strip_integral": float(strip), "boundary_integral": float(boundary),
            "mismatch": float(abs(strip - boundary))}


def _s_derivative(pts, s):
    """d(points)/ds: 4th-order stencils on uniform station grids (the usual
    case), 3-point non-uniform differences otherwise."""
    S = len(s)
    out = np.empty_like(pts)
    if S == 2:
        d = (pts[1] - pts[0]) / (s[1] - s[0])
        out[0] = out[1] = d
        return out
    ds = np.diff(s)
    if S >= 5 and np.max(np.abs(ds - ds[0])) < 1e-12 * max(abs(ds[0]), 1e-300):
        return _axis_derivative(pts, ds[0], periodic=False)
    for k in range(S):
        if 0 < k < S - 1:
            h1, h2 = s[k] - s[k - 1], s[k + 1] - s[k]
            out[k] = (pts[k + 1] * h1 / (h2 * (h1 + h2))
                      - pts[k - 1] * h2 / (h1 * (h1 + h2))
                      + pts[k] * (h2 - h1) / (h1 * h2))
        elif k == 0:
            h1, h2 = s[1] - s[0], s[2] - s[1]
            out[0] = (-pts[0] * (2 * h1 + h2) / (h1 * (h1 + h2))
                      + pts[1] * (h1 + h2) / (h1 * h2)
                      - pts[2] * h1 / (h2 * (h1 + h2)))
        else:
            h1, h2 = s[-2] - s[-1], s[-3] - s[-2]
            out[-1] = (-pts[-1] * (2 * h1 + h2) / (h1 * (h1 + h2))
                       + pts[-2] * (h1 + h2) / (h1 * h2)
                       - pts[-3] * h1 / (h2 * (h1 + h2)))
    return out


def _simpson_cumulative(f, h):
    """Cumulative integral along axis 0 (Simpson on pairs, trapezoid tail)."""
    K = f.shape[0] - 1
    out = np.zeros_like(f)
    for j in range(1, K + 1):
        if j >= 2:
            out[j] = out[j - 2] + h / 3.0 * (f[j - 2] + 4 * f[j - 1] + f[j])
        else:
            out[j] = out[j - 1] + h / 2.0 * (f[j - 1] + f[j])
    return out


# ----------------------------------------------------------- harmonization

def harmonize(family: FamilyParameterization, tol=DEFAULT_TOL,
              substeps: int = 4) -> FamilyParameterization:
    """Reparameterize so the fundamental harmonic equals the t coordinate.

    For each station the harmonic sigma is solved, the field
    Y = grad(sigma)/|grad sigma|^2 is traced from every C0 node (RK4 in the
    parameter domain, sigma itself is the time of the flow), and the mesh is
    resampled at sigma = t_j. The C0 trace is unchanged.
    """
    if isinstance(family.grid, SegmentGrid):
        return _harmonize_segment(family, tol, substeps)
    grid: CylGrid = family.grid
    M, K = grid.M, grid.K
    new_pts = np.empty_like(family.points)
    worst_trace = 0.0
    for k in range(family.S):
        mesh = family.cylinder(k)
        sigma = fundamental_harmonic(mesh)
        sig = sigma.values.reshape(K + 1, M)
        pos = family.points[k].reshape(K + 1, M, -1)
        traj, trace_err = _trace_harmonic_flow(mesh, sig, pos, substeps)
        worst_trace = max(worst_trace, trace_err)
        new_pts[k] = traj.reshape(-1, family.points.shape[-1])
    out = FamilyParameterization(grid, family.s_values.copy(), new_pts,
                                 family.ambient, compatible=True)
    out.trace_error = worst_trace
    return out


def _trace_harmonic_flow(mesh: CylinderMesh, sig, pos, substeps):
    """Integrate dq/dsigma = Y in the parameter square from each C0 node."""
    grid = mesh.grid
    M, K = grid.M, grid.K
    hp, ht = 2 * math.pi / M, 1.0 / K

    def interp(field2d, p, t):
        """periodic-bilinear interpolation of a (K+1, M, ...) array."""
        pi = (p / hp) % M
        ti = np.clip(t / ht, 0.0, K - 1e-12)
        i0 = np.floor(pi).astype(int) % M
        j0 = np.floor(ti).astype(int)
        fi, fj = pi - np.floor(pi), ti - j0
        i1 = (i0 + 1) % M
        j1 = np.minimum(j0 + 1, K)
        w00 = (1 - fi) * (1 - fj); w10 = fi * (1 - fj)
        w01 = (1 - fi) * fj; w11 = fi * fj
        shape = (len(p),) + (1,) * (field2d.ndim - 2)
        return (w00.reshape(shape) * field2d[j0, i0]
                + w10.reshape(shape) * field2d[j0, i1]
                + w01.reshape(shape) * field2d[j1, i0]
                + w11.reshape(shape) * field2d[j1, i1])

    # parameter-space field Y = Ginv grad_xi sigma / |grad sigma|^2
    P = pos
    tau_p = np.moveaxis(_axis_derivative(np.moveaxis(P, 1, 0), hp, True), 0, 1)
    tau_t = _axis_derivative(P, ht, False)
    dsig_p = np.moveaxis(_axis_derivative(np.moveaxis(sig, 1, 0), hp, True), 0, 1)
    dsig_t = _axis_derivative(sig, ht, False)
    g11 = np.real(np.sum(np.conj(tau_p) * tau_p, -1))
    g12 = np.real(np.sum(np.conj(tau_p) * tau_t, -1))
    g22 = np.real(np.sum(np.conj(tau_t) * tau_t, -1))
    det = g11 * g22 - g12 ** 2
    c1 = (g22 * dsig_p - g12 * dsig_t) / det
    c2 = (-g12 * dsig_p + g11 * dsig_t) / det
    norm2 = c1 * dsig_p + c2 * dsig_t           # |grad sigma|^2
    Yp = np.stack([c1 / norm2, c2 / norm2], axis=-1)   # (K+1, M, 2)

    p = hp * np.arange(M)
    t = np.zeros(M)
    trace_err = 0.0
    traj = np.empty((K + 1, M, pos.shape[-1]), dtype=complex)
    traj[0] = pos[0]
    dtau = (1.0 / K) / substeps
    for j in range(K):
        for _ in range(substeps):
            def f(pp, tt):
                v = interp(Yp, pp, tt)
                return v[:, 0], v[:, 1]
            a1, b1 = f(p, t)
            a2, b2 = f(p + 0.5 * dtau * a1, t + 0.5 * dtau * b1)
            a3, b3 = f(p + 0.5 * dtau * a2, t + 0.5 * dtau * b2)
            a4, b4 = f(p + dtau * a3, t + dtau * b3)
            p = p + dtau / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
            t = t + dtau / 6 * (b1 + 2 * b2 + 2 * b3 + b4)
        traj[j + 1] = interp(pos, p, t)
        sig_at = interp(sig[..., None], p, t)[:, 0]
        trace_err = max(trace_err, float(np.max(np.abs(sig_at - (j + 1) / K))))
    return traj, trace_err


def _harmonize_segment(family, tol, substeps):
    """n = 1: reparameterize each curve so sigma(t) = t."""
    grid: SegmentGrid = family.grid
    K = grid.N
    new_pts = np.empty_like(family.points)
    for k in range(family.S):
        mesh = family.cylinder(k)
        sigma = fundamental_harmonic(mesh).values
        tgt = np.arange(K + 1) / K
        # invert the monotone sigma by interpolation
        params = np.interp(tgt, sigma, np.arange(K + 1) / K)
        old = family.points[k][:, 0]
        new_pts[k][:, 0] = np.interp(params, np.arange(K + 1) / K, old.real) \
            + 1j * np.interp(params, np.arange(K + 1) / K, old.imag)
    return FamilyParameterization(grid, family.s_values.copy(), new_pts,
                                  family.ambient, compatible=True)


def compatibility_report(family: FamilyParameterization, tol=DEFAULT_TOL) -> dict:
    """Check sigma(Phi(p, t, s)) = t and t-derivative orthogonality."""
    worst_sigma = 0.0
    worst_orth = 0.0
    for k in range(family.S):
        mesh = family.cylinder(k)
        sigma = fundamental_harmonic(mesh).values
        tpar = (mesh.grid.params()[1] if not isinstance(family.grid, SegmentGrid)
                else family.grid.params())
        worst_sigma = max(worst_sigma, float(np.max(np.abs(sigma - tpar))))
        if not isinstance(family.grid, SegmentGrid):
            grid = family.grid
            pos = family.points[k].reshape(grid.K + 1, grid.M, -1)
            tau_t = _axis_derivative(pos, 1.0 / grid.K, False)
            tau_p = np.moveaxis(_axis_derivative(
                np.moveaxis(pos, 1, 0), 2 * math.pi / grid.M, True), 0, 1)
            sig2 = sigma.reshape(grid.K + 1, grid.M)
            dsig_p = np.moveaxis(_axis_derivative(
                np.moveaxis(sig2, 1, 0), 2 * math.pi / grid.M, True), 0, 1)
            # level-set direction: tau_p - (dsig_p / dsig_t avoided): the
            # t-level curve direction is tau_p along constant-t lines after
            # compatibility, so orthogonality is g(tau_t, tau_p) small
            num = np.abs(np.real(np.sum(np.conj(tau_t) * tau_p, -1)))
            den = _norms(tau_t) * _norms(tau_p) + 1e-300
            worst_orth = max(worst_orth, float(np.max(num / den)))
    return {"sigma_equals_t": worst_sigma, "orthogonality": worst_orth,
            "compatible": bool(worst_sigma < 1e-4)}


# --------------------------------------------------------- inverse transform

def inverse_transform(ambient: AmbientStructure,
                      family: FamilyParameterization,
                      anchor: int = 0,
                      end: Optional[EndSolution] = None,
                      end_side: str = "inner",
                      tol=DEFAULT_TOL) -> GeodesicPath:
    """Reconstruct the geodesic swept by a cylinder family.

    The family is harmonized, t-slices across stations become the
    Lagrangians, and the Hamiltonian at station k is the relative flux from
    the anchor station. With end data, the cone point is appended as the
    pole of a disk grid on the given side ("inner" = station 0 nearest the
    cone). Positivity of every slice is asserted.
    """
    if family.S < 2:
        raise ValueError("insufficient family: need at least two cylinders")
    fam = family if family.compatible else harmonize(family, tol)
    if isinstance(fam.grid, SegmentGrid):
        return _inverse_transform_segment(ambient, fam, anchor, tol)
    grid: CylGrid = fam.grid
    M, K, S = grid.M, grid.K, fam.S

    hvals_s = np.empty(S)
    for k in range(S):
        lo, hi = (anchor, k) if anchor <= k else (k, anchor)
        if lo == hi:
            hvals_s[k] = 0.0
            continue
        fl = relative_flux(fam, lo, hi)
        hvals_s[k] = math.copysign(1.0, k - anchor) * fl["strip_integral"] \
            if anchor <= k else -fl["strip_integral"]
    # station order: make the h-sequence correspond to ring order
    pts_slices = fam.points.reshape(S, K + 1, M, -1)

    if end is not None:
        if end_side == "inner":
            ring_order = np.arange(S)          # station 0 closest to the cone
        else:
            ring_order = np.arange(S)[::-1]
        dgrid = DiskGrid(M, S)
        N = dgrid.n_nodes
        times = np.arange(K + 1) / K
        points = np.empty((K + 1, N, fam.points.shape[-1]), dtype=complex)
        q = end.q
        for j in range(K + 1):
            points[j, 0] = q
            for r, st in enumerate(ring_order):
                points[j, dgrid.ring_nodes(r + 1)] = pts_slices[st, j]
        h_nodal = np.empty(N)
        ordered_h = hvals_s[ring_order]
        # quadratic extrapolation of h to the cone along the s^2 law
        h_nodal[0] = _extrapolate_pole(ordered_h)
        for r in range(S):
            h_nodal[dgrid.ring_nodes(r + 1)] = ordered_h[r]
        path = GeodesicPath(dgrid, times, points, h_nodal, ambient,
                            cone_params=[np.zeros(2)],
                            cone_images=[np.asarray(q, complex)])
    else:
        if S < 2:
            raise ValueError("insufficient family")
        cgrid = CylGrid(M, S - 1)
        times = np.arange(K + 1) / K
        N = cgrid.n_nodes
        points = np.empty((K + 1, N, fam.points.shape[-1]), dtype=complex)
        for j in range(K + 1):
            for st in range(S):
                points[j, cgrid.level_nodes(st)] = pts_slices[st, j]
        h_nodal = np.repeat(hvals_s, M).reshape(S, M).reshape(-1)
        path = GeodesicPath(cgrid, times, points, h_nodal, ambient)
    # the stacking order fixes frames only up to a global flip; orient so the
    # first slice is positive, then assert positivity of every tested slice
    rep = _slice_positivity(path, 0, tol)
    if abs(rep["min_phase"]) > math.pi / 2 and abs(rep["max_phase"]) > math.pi / 2:
        path.orientation = -1
    for j in (0, len(path.times) // 2, len(path.times) - 1):
        rep = _slice_positivity(path, j, tol)
        if not rep["positive"]:
            raise RuntimeError(
                f"positivity failure on the reconstructed slice t index {j}: "
                f"phases in [{rep['min_phase']:.3f}, {rep['max_phase']:.3f}]")
    return path


def _extrapolate_pole(hs: np.ndarray) -> float:
    k = np.arange(1, min(4, len(hs)) + 1, dtype=float)
    vals = hs[:len(k)]
    # h(r) ~ a + b r^2 with r proportional to ring index
    A = np.column_stack([np.ones_like(k), k ** 2])
    sol, *_ = np.linalg.lstsq(A, vals, rcond=None)
    return float(sol[0])


def _slice_positivity(path: GeodesicPath, j: int, tol=DEFAULT_TOL) -> dict:
    from .lagrangian import positivity_report
    mesh = path.mesh_at(j)
    return positivity_report(path.ambient, mesh, 400, tol)


def _inverse_transform_segment(ambient, fam, anchor, tol):
    grid: SegmentGrid = fam.grid
    K, S = grid.N, fam.S
    hvals_s = np.empty(S)
    for k in range(S):
        lo, hi = (anchor, k) if anchor <= k else (k, anchor)
        hvals_s[k] = 0.0 if lo == hi else (
            math.copysign(1.0, k - anchor)
            * relative_flux(fam, lo, hi)["strip_integral"])
    sgrid = SegmentGrid(S - 1)
    times = np.arange(K + 1) / K
    points = np.moveaxis(fam.points, 0, 1)   # (K+1, S, n)
    return GeodesicPath(sgrid, times, points, hvals_s, ambient)


# ------------------------------------------------------------- cone checks

def cone_hessian_check(path: GeodesicPath, which: int = 0,
                       directions: int = 24, tol=DEFAULT_TOL) -> dict:
    """Nondegeneracy of the critical point via polar ray stencils.

    Along rays (s, angle) about the critical point, the action of the
    second derivative on a direction v has components d2h/ds2 (one-sided
    4-point stencil in s, exact through cubics) and (1/2) d3h/(ds2 dangle)
    (central difference of the former across directions). Nondegenerate
    means the minimum action over directions exceeds tol_hess times the
    field's own curvature scale, range(h)/diameter^2.
    """
    if which >= len(path.cone_params):
        raise ValueError("no such cone point")
    x0 = path.cone_params[which]
    grid = path.grid
    h_mesh = 1.0 / grid.R if isinstance(grid, DiskGrid) else 1.0 / grid.K
    rim = float(np.max(np.abs(grid.xy()))) if isinstance(grid, DiskGrid) else 1.0
    ds = 1.5 * h_mesh * rim
    angles = 2 * math.pi * np.arange(directions) / directions
    f0 = _h_value_at(path, x0)
    d2 = np.empty(directions)
    for m, a in enumerate(angles):
        u = np.array([math.cos(a), math.sin(a)])
        f = [f0] + [_h_value_at(path, x0 + k * ds * u) for k in (1, 2, 3)]
        d2[m] = (2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]) / ds ** 2
    if len(path.cone_params) and len(path.h):
        rng = float(np.ptp(path.h))
    else:
        rng = 1.0
    diam = path.mesh_at(0).diameter()
    scale = rng / max(diam ** 2, 1e-300) + 1e-300
    dalpha = angles[1] - angles[0]
    d3 = 0.5 * (np.roll(d2, -1) - np.roll(d2, 1)) / (2 * dalpha)
    actions = np.hypot(d2, d3)
    min_action = float(np.min(actions))
    # report the fitted Hessian too (used by the polar chart sign choice)
    _, H = _h_fit_at(path, x0)
    return {"nondegenerate": bool(min_action > tol.tol_hess * scale),
            "min_action": min_action, "curvature_scale": scale,
            "hessian": H}


def polar_level_chart(path: GeodesicPath, which: int = 0,
                      radius_count: int = 4, ds: Optional[float] = None,
                      M_out: Optional[int] = None, tol=DEFAULT_TOL) -> dict:
    """Level loops of h around a nondegenerate extremum, indexed by s with
    h = h(q) -/+ s^2 (sign by extremum type). Seeds the end solver."""
    chk = cone_hessian_check(path, which, tol=tol)
    if not chk["nondegenerate"]:
        raise ValueError("cone point is degenerate; no polar chart")
    x0 = path.cone_params[which]
    hq = _h_value_at(path, x0)
    evals = np.linalg.eigvalsh(chk["hessian"])
    if not (np.all(evals < 0) or np.all(evals > 0)):
        raise ValueError("cone point is not a local extremum")
    sgn = -1.0 if evals[0] < 0 else 1.0     # max: h decreases outward
    margin = critical_margin(path)
    if ds is None:
        smin = math.sqrt(margin * 1.5)
        smax = math.sqrt(margin * 6.0)
        svals = np.linspace(smin, smax, radius_count)
    else:
        svals = ds * np.arange(1, radius_count + 1)
    if M_out is None:
        M_out = path.grid.M if hasattr(path.grid, "M") else 32
    samplings, kept = [], []
    for s in svals:
        c = hq + sgn * s ** 2
        loops = level_loops(path.grid, path.h, c)
        if not loops:
            continue
        # take the loop enclosing x0: smallest mean distance to it
        xy = path.grid.xy()

        def loop_dist(lp):
            px = lp.interpolate(xy)
            return np.mean(np.linalg.norm(px - x0, axis=1))
        loop = min(loops, key=loop_dist)
        samplings.append(resample_loop(loop, path.points[0], M_out))
        kept.append(s)
    return {"s_values": np.array(kept), "samplings": samplings,
            "level_sign": sgn, "h_critical": hq}


def end_seed_mesh(path: GeodesicPath, chart: dict, idx: int = 0,
                  tol=DEFAULT_TOL) -> CylinderMesh:
    """Rescaled near-cone cylinder: (Phi(loop, t) - q)/s as the cone seed."""
    q = path.cone_images[0]
    s = chart["s_values"][idx]
    samp = chart["samplings"][idx]
    T = path.T
    M = len(samp)
    pts = np.empty((T + 1, M, path.ambient.n), dtype=complex)
    for k in range(T + 1):
        pts[k] = (samp.interpolate(path.points[k]) - q) / s
    mesh = CylinderMesh(CylGrid(M, T), pts.reshape(-1, path.ambient.n),
                        path.ambient.recentered(q, 0.0))
    from .slc import im_omega_element_signs
    if np.mean(im_omega_element_signs(mesh)) < 0:
        idx2 = np.arange(M)[::-1]
        pts = pts[:, idx2]
        mesh = CylinderMesh(CylGrid(M, T), pts.reshape(-1, path.ambient.n),
                            path.ambient.recentered(q, 0.0))
    return mesh


def point_polyline_distance(pts: np.ndarray, poly: np.ndarray,
                            closed: bool = True) -> np.ndarray:
    """Distance from each point to a polyline (exact per-segment)."""
    A = poly
    B = np.roll(poly, -1, axis=0) if closed else poly[1:]
    A = A if closed else poly[:-1]
    seg = B - A                                     # (S, n)
    seglen2 = np.sum(np.abs(seg) ** 2, axis=-1)
    out = np.empty(len(pts))
    for i, z in enumerate(pts):
        w = z[None, :] - A
        t = np.clip(np.real(np.sum(np.conj(seg) * w, -1)) / np.maximum(seglen2, 1e-300),
                    0.0, 1.0)
        d = w - t[:, None] * seg
        out[i] = math.sqrt(float(np.min(np.sum(np.abs(d) ** 2, axis=-1))))
    return out


def roundtrip_distance(reconstructed: GeodesicPath,
                       transformed: Sequence[TransformedCylinder]) -> float:
    """Sup over stations, times and nodes of the distance between the
    reconstructed slices and the forward-transform level loops."""
    grid = reconstructed.grid
    worst = 0.0
    S = len(transformed)
    for k, tc in enumerate(transformed):
        cyl = tc.cylinder.mesh
        Mc = cyl.grid.M
        if isinstance(grid, DiskGrid):
            ids = grid.ring_nodes(k + 1)
        else:
            ids = grid.level_nodes(k)
        for j in range(0, reconstructed.T + 1, max(1, reconstructed.T // 8)):
            jj = int(round(j * cyl.grid.K / reconstructed.T))
            loop = cyl.points[cyl.grid.level_nodes(jj)]
            d = point_polyline_distance(reconstructed.points[j][ids], loop)
            worst = max(worst, float(np.max(d)))
    return worst


# -------------------------------------------------- perturbation pipeline

@dataclass
class TransformBundle:
    """Everything the perturbation pipeline needs alongside a path."""

    lag0: BoundaryLagrangian
    lag1: BoundaryLagrangian
    family: List[IslCylinder]
    levels: np.ndarray
    end: Optional[EndSolution] = None
    end_chart: Optional[dict] = None
    anchor: int = 0


def _resolve_with_homotopy(ambient, mesh, lag0, lag1_base, h_pert, tol, order,
                           min_step: float = 1.0 / 64.0):
    """March the boundary perturbation adaptively from 0 to 1.

    Shallow cylinders near the cone can see boundary moves larger than an
    element, outside the Newton basin; sub-stepping the perturbation
    restores the basin at every stage.
    """
    if h_pert is None:
        return solve_cylinder(ambient, mesh, lag0, lag1_base, 0.0,
                              tol=tol, order=order)
    lam, step = 0.0, 1.0
    current = mesh
    result = None
    while lam < 1.0:
        target = min(1.0, lam + step)
        lag1_t = perturb_graph(lag1_base, ScaledPotential(h_pert, target))
        try:
            result = solve_cylinder(ambient, current, lag0, lag1_t, 0.0,
                                    tol=tol, order=order)
        except Exception:
            step *= 0.5
            if step < min_step:
                raise
            continue
        current = result.mesh
        lam = target
        step = min(2 * step, 1.0)
    return result


def perturb_and_resolve(ambient: AmbientStructure, path: GeodesicPath,
                        h_pert: Optional[Potential], tol=DEFAULT_TOL,
                        end_s_values: Sequence[float] = (),
                        order: int = 2) -> Tuple[GeodesicPath, dict]:
    """Re-solve the attached cylinder family against a moved Lambda_1.

    Replaces Lambda_1 by the graph of dh_pert, corrects every family
    cylinder by the fixed-station Newton march, refreshes the intersection
    point and its end data, and reassembles the geodesic by the inverse
    transform. Returns the new path and a report (per-station residuals,
    displacement, boundary distances, perturbed intersection points).
    """
    if path.bundle is None:
        raise ValueError("path carries no transform bundle; run the forward "
                         "pipeline first")
    bundle: TransformBundle = path.bundle
    lag1h = perturb_graph(bundle.lag1, h_pert)
    new_family = []
    report = {"stations": [], "failed_station": None}
    for k, cyl in enumerate(bundle.family):
        try:
            nxt = _resolve_with_homotopy(ambient, cyl.mesh, bundle.lag0,
                                         bundle.lag1, h_pert, tol, order)
        except Exception as exc:
            report["failed_station"] = k
            raise RuntimeError(
                f"corrector divergence at station {k} (perturbation too "
                f"large): {exc}") from exc
        nxt.flux_coordinate = cyl.flux_coordinate
        new_family.append(nxt)
        report["stations"].append({
            "residual": nxt.residual_norm,
            "bc1_distance": nxt.mesh.boundary_distance(1, lag1h),
        })
    disp = max(float(np.max(np.abs(a.mesh.points - b.mesh.points)))
               for a, b in zip(new_family, bundle.family))
    report["displacement"] = disp

    end = None
    if bundle.end is not None and len(path.cone_images):
        seeds = [path.cone_images[0]]
        pts = intersection_points(ambient, bundle.lag0, lag1h, seeds, tol)
        good = [p for p in pts if p["converged"]]
        if good:
            q_h = good[0]["point"]
            report["perturbed_intersection"] = q_h
            report["transversality_gap"] = good[0]["transversality_gap"]
            svals = list(end_s_values) or list(bundle.end.s_values)
            end = solve_end_family(ambient, (bundle.lag0, lag1h), q_h,
                                   bundle.end.cone.mesh, svals, tol)
    fam = FamilyParameterization.from_cylinders(new_family)
    new_path = inverse_transform(ambient, fam, bundle.anchor,
                                 end=end, tol=tol)
    new_path.bundle = TransformBundle(bundle.lag0, lag1h, new_family,
                                      bundle.levels, end, bundle.end_chart,
                                      bundle.anchor)
    return new_path, report
