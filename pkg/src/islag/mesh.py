"""Embedded meshes: Lagrangian patches, cylinders, segments.

A mesh pairs a parameter grid with an embedding ``points`` (complex array of
shape (N, n)) into a fixed ambient structure. The discrete omega-pullback of
a face is the exact symplectic area of the bilinear (resp. affine) face,
computed by the shoelace identity

    area_omega(a, b, c, d) = 1/2 [omega(a,b) + omega(b,c) + omega(c,d) + omega(d,a)],

which vanishes on straight-edged faces inscribed in a Lagrangian plane and
is the certificate used by every Lagrangian-quality invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ambient import AmbientStructure, omega_form, wrap_angle
from .grids import CylGrid, DiskGrid, SegmentGrid

_GAUSS_1D = {
    2: (np.array([-1.0, 1.0]) / math.sqrt(3.0), np.array([1.0, 1.0])),
    3: (np.array([-math.sqrt(3.0 / 5.0), 0.0, math.sqrt(3.0 / 5.0)]),
        np.array([5.0, 8.0, 5.0]) / 9.0),
    4: (np.array([-0.8611363115940526, -0.3399810435848563,
                  0.3399810435848563, 0.8611363115940526]),
        np.array([0.3478548451374538, 0.6521451548625461,
                  0.6521451548625461, 0.3478548451374538])),
}


def shoelace_omega(corners: np.ndarray) -> np.ndarray:
    """Exact symplectic area of straight-edged polygons (..., k, n)."""
    rolled = np.roll(corners, -1, axis=-2)
    return 0.5 * np.sum(omega_form(corners, rolled), axis=-1)


def grid_frames(grid, points: np.ndarray, orientation: int = 1):
    """Grid-oriented tangent frames by central/one-sided differences.

    Returns (node_ids, frames) where frames[k] is a (2, n) oriented pair for
    node node_ids[k]. The disk pole has no distinguished frame and is
    skipped. Cylinder frames are (angular, axial); disk frames are
    (radial, angular), the order that orients a flat disk in R^2 positively.
    """
    from .grids import CylGrid, DiskGrid, SegmentGrid

    if isinstance(grid, SegmentGrid):
        ids = np.arange(grid.n_nodes)
        tang = np.gradient(points, axis=0)
        return ids, tang[:, None, :] * orientation

    if isinstance(grid, CylGrid):
        M, K = grid.M, grid.K
        P = points.reshape(K + 1, M, -1)
        tp = (np.roll(P, -1, axis=1) - np.roll(P, 1, axis=1))
        tt = np.empty_like(P)
        tt[1:-1] = P[2:] - P[:-2]
        tt[0] = P[1] - P[0]
        tt[-1] = P[-1] - P[-2]
        frames = np.stack([tp, tt], axis=2).reshape(-1, 2, points.shape[1])
        if orientation < 0:
            frames = frames[:, ::-1]
        return np.arange(grid.n_nodes), frames

    if isinstance(grid, DiskGrid):
        M, R = grid.M, grid.R
        ids = np.arange(1, grid.n_nodes)
        P = points[1:].reshape(R, M, -1)
        ta = (np.roll(P, -1, axis=1) - np.roll(P, 1, axis=1))
        tr = np.empty_like(P)
        if R > 1:
            tr[1:-1] = P[2:] - P[:-2]
            tr[-1] = P[-1] - P[-2]
        tr[0] = P[min(1, R - 1)] - points[0][None, :]
        if R == 1:
            tr[0] = P[0] - points[0][None, :]
        frames = np.stack([tr, ta], axis=2).reshape(-1, 2, points.shape[1])
        if orientation < 0:
            frames = frames[:, ::-1]
        return ids, frames

    raise TypeError(f"unsupported grid {type(grid).__name__}")


@dataclass
class MeshBase:
    grid: object
    points: np.ndarray
    ambient: AmbientStructure
    orientation: int = 1

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=complex)
        if self.points.shape != (self.grid.n_nodes, self.ambient.n):
            raise ValueError("points shape does not match grid and ambient")
        self._rings = None

    @property
    def rings(self):
        if self._rings is None:
            self._rings = self.grid.two_ring()
        return self._rings

    def copy_with_points(self, points):
        out = type(self)(self.grid, np.array(points), self.ambient, self.orientation)
        out._rings = self._rings
        return out

    def diameter(self) -> float:
        lo = self.points.view(float).reshape(len(self.points), -1)
        return float(np.linalg.norm(lo.max(axis=0) - lo.min(axis=0)))

    def boundary_distance(self, which: int, lagrangian) -> float:
        ids = self.c0_nodes if which == 0 else self.c1_nodes
        return float(np.max(lagrangian.distance(self.points[ids])))


@dataclass
class LagrangianMesh(MeshBase):
    """Discretized positive Lagrangian patch (disk or cylinder topology)."""

    @property
    def topology(self) -> str:
        return "sphere" if isinstance(self.grid, DiskGrid) else "sphere_minus_two_points"

    def face_omega(self) -> np.ndarray:
        if isinstance(self.grid, DiskGrid):
            tris = self.grid.triangles()
            return shoelace_omega(self.points[tris])
        quads = self.grid.quads()
        return shoelace_omega(self.points[quads])

    def face_area_scale(self) -> float:
        if isinstance(self.grid, DiskGrid):
            faces = self.grid.triangles()
        else:
            faces = self.grid.quads()
        pts = self.points[faces]
        e1 = pts[:, 1] - pts[:, 0]
        e2 = pts[:, -1] - pts[:, 0]
        a = np.linalg.norm(e1.view(float).reshape(len(faces), -1), axis=1)
        b = np.linalg.norm(e2.view(float).reshape(len(faces), -1), axis=1)
        return float(np.mean(a * b))

    def sampled_phases(self, count: Optional[int] = None) -> np.ndarray:
        """Phase of the oriented tangent plane at grid nodes (pole excluded)."""
        ids, frames = grid_frames(self.grid, self.points, self.orientation)
        if count is not None and count < len(ids):
            step = max(1, len(ids) // count)
            ids, frames = ids[::step][:count], frames[::step][:count]
        phases = np.empty(len(ids))
        for k, i in enumerate(ids):
            val = self.ambient.omega_n_form(self.points[i], frames[k])
            phases[k] = wrap_angle(np.angle(val))
        return phases


class CylinderMesh(MeshBase):
    """Discretized immersion of S^1 x [0,1] (n=2) with boundary tags."""

    def __init__(self, grid: CylGrid, points, ambient, orientation: int = 1):
        super().__init__(grid, points, ambient, orientation)
        self._quads = grid.quads()
        self._quad_cache = None

    @property
    def c0_nodes(self):
        return self.grid.c0_nodes

    @property
    def c1_nodes(self):
        return self.grid.c1_nodes

    def face_omega(self) -> np.ndarray:
        return shoelace_omega(self.points[self._quads])

    def face_area_scale(self) -> float:
        pts = self.points[self._quads]
        e1 = pts[:, 1] - pts[:, 0]
        e2 = pts[:, 3] - pts[:, 0]
        a = np.linalg.norm(e1.view(float).reshape(len(pts), -1), axis=1)
        b = np.linalg.norm(e2.view(float).reshape(len(pts), -1), axis=1)
        return float(np.mean(a * b))

    def quadrature(self, order: int = 2):
        """Per-element quadrature cache: positions, frames, metric, rho.

        Returns a dict with arrays over (elements, q): ``pos`` (E,Q,n),
        ``tau1``/``tau2`` (E,Q,n), ``G`` (E,Q,2,2), ``detG``, ``rho``, plus
        reference shape values ``N`` (Q,4) and gradients ``dN`` (Q,4,2) and
        weights ``w`` (Q,).
        """
        if self._quad_cache is not None and self._quad_cache["order"] == order:
            return self._quad_cache
        xg, wg = _GAUSS_1D[order]
        XI, ETA = np.meshgrid(xg, xg, indexing="ij")
        xi, eta = XI.ravel(), ETA.ravel()
        w = np.outer(wg, wg).ravel()
        # bilinear shape functions on [-1,1]^2, corners (-,-),(+,-),(+,+),(-,+)
        N = 0.25 * np.stack([(1 - xi) * (1 - eta), (1 + xi) * (1 - eta),
                             (1 + xi) * (1 + eta), (1 - xi) * (1 + eta)], axis=1)
        dN = 0.25 * np.stack([
            np.stack([-(1 - eta), -(1 - xi)], axis=1),
            np.stack([(1 - eta), -(1 + xi)], axis=1),
            np.stack([(1 + eta), (1 + xi)], axis=1),
            np.stack([-(1 + eta), (1 - xi)], axis=1)], axis=1)
        corners = self.points[self._quads]                      # (E,4,n)
        pos = np.einsum("qa,ean->eqn", N, corners)
        tau1 = np.einsum("qa,ean->eqn", dN[:, :, 0], corners)
        tau2 = np.einsum("qa,ean->eqn", dN[:, :, 1], corners)
        g11 = np.real(np.sum(np.conj(tau1) * tau1, axis=-1))
        g12 = np.real(np.sum(np.conj(tau1) * tau2, axis=-1))
        g22 = np.real(np.sum(np.conj(tau2) * tau2, axis=-1))
        detG = g11 * g22 - g12 ** 2
        rho = self.ambient.rho_at(pos)
        if np.isscalar(rho) or np.ndim(rho) == 0:
            rho = np.full(pos.shape[:2], float(rho))
        self._quad_cache = dict(order=order, N=N, dN=dN, w=w, pos=pos, tau1=tau1,
                                tau2=tau2, g11=g11, g12=g12, g22=g22, detG=detG,
                                rho=rho, quads=self._quads)
        return self._quad_cache

    def copy_with_points(self, points):
        out = CylinderMesh(self.grid, np.array(points), self.ambient, self.orientation)
        out._rings = self._rings
        return out

    def immersion_gap(self, order: int = 2) -> float:
        """Smallest det of the pullback metric over quadrature points."""
        q = self.quadrature(order)
        return float(np.min(q["detG"]))

    def check_immersed(self):
        if self.immersion_gap() <= 0:
            raise ValueError("degenerate element: pullback metric not positive definite")


class SegmentMesh(MeshBase):
    """Degenerate n=1 cylinder: a curve in a C slice, P1 elements."""

    def __init__(self, grid: SegmentGrid, points, ambient, orientation: int = 1):
        super().__init__(grid, points, ambient, orientation)

    @property
    def c0_nodes(self):
        return np.array([0])

    @property
    def c1_nodes(self):
        return np.array([self.grid.N])

    def face_omega(self) -> np.ndarray:
        # 1-dimensional submanifolds are automatically Lagrangian
        return np.zeros(self.grid.N)

    def face_area_scale(self) -> float:
        seg = np.diff(self.points[:, 0])
        return float(np.mean(np.abs(seg)))

    def immersion_gap(self) -> float:
        return float(np.min(np.abs(np.diff(self.points[:, 0]))))

    def check_immersed(self):
        if self.immersion_gap() <= 0:
            raise ValueError("degenerate element: zero-length segment")


def flat_product_cylinder(ambient: AmbientStructure, M: int, K: int) -> CylinderMesh:
    """Circle x [0,1] with the exact discrete product metric.

    The radius is chord-corrected (r = h/(2 sin(h/2)), within O(h^2) of the
    unit circle) so that every bilinear element is an exact h x (1/K) flat
    rectangle and the assembly reproduces the closed-form flat stencil to
    machine precision.
    """
    grid = CylGrid(M, K)
    p, t = grid.params()
    h = 2.0 * math.pi / M
    r = h / (2.0 * math.sin(h / 2.0))
    pts = np.stack([r * np.exp(1j * p), 1j * t], axis=-1)
    return CylinderMesh(grid, pts, ambient)


def annulus_mesh(ambient: AmbientStructure, M: int, K: int,
                 r0: float = 1.0, r1: float = 2.0) -> CylinderMesh:
    """Flat annulus r in [r0, r1] inside R^2 subset C^2 (rho = 1)."""
    grid = CylGrid(M, K)
    p, t = grid.params()
    r = r0 + (r1 - r0) * t
    pts = np.stack([r * np.cos(p) + 0j, r * np.sin(p) + 0j], axis=-1)
    return CylinderMesh(grid, pts, ambient)


def segment_mesh(ambient: AmbientStructure, N: int, z0=0.0, z1=1.0) -> SegmentMesh:
    grid = SegmentGrid(N)
    t = grid.params()
    pts = ((1 - t) * complex(z0) + t * complex(z1)).reshape(-1, 1)
    return SegmentMesh(grid, pts, ambient)
