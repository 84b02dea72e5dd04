"""Reproducible desk-scale fixtures.

Every pipeline fixture is generated, not hand-tuned: geodesics come from
the horizontal-flow integrator applied to a flat disk (or segment) with an
explicit Hamiltonian, endpoint Lagrangians are recovered as exact potential
graphs by least squares, and exact orbit cylinders with constant Re(gamma^2)
provide machine-accurate special Lagrangian references.

The closed ambient C^n admits no closed positive Lagrangian (the integral
of the exact form Re Omega over a closed surface vanishes while positivity
forces it positive), so sphere-like fixtures are local: a cap with one
interior critical point of h, and a barbell whose Hamiltonian has two
interior maxima (plus the unavoidable saddle between them, excluded from
the usable level range).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from numpy.polynomial import chebyshev as _cheb

from .ambient import AmbientStructure, Density
from .config import DEFAULT_TOL, Resolution
from .elliptic import ScalarField
from .grids import CylGrid, DiskGrid, SegmentGrid
from .lagrangian import (BoundaryLagrangian, ChebPotential, LinearSubspace,
                         PotentialGraph, ZeroPotential)
from .mesh import CylinderMesh, LagrangianMesh, SegmentMesh
from .transform import GeodesicPath, geodesic_ivp


# ----------------------------------------------------------- n = 1 fixture

@dataclass
class LineFixture:
    ambient: AmbientStructure
    path: GeodesicPath
    lag0: BoundaryLagrangian
    lag1: BoundaryLagrangian
    x_range: tuple


def line_fixture(N: int = 64, T: int = 32, x_lo: float = 0.0,
                 x_hi: float = 0.8) -> LineFixture:
    """Closed-form slab geodesic in C: y = t (1 + x) over a station range.

    The Hamiltonian is h = -(x + x^2/2); the horizontal flow has exactly
    vertical velocity i (1 + x), so the integrator reproduces the closed
    form to roundoff. Boundary Lagrangians are the x-axis and the line
    y = 1 + x.
    """
    amb = AmbientStructure(1)
    grid = SegmentGrid(N)
    x = x_lo + (x_hi - x_lo) * grid.params()
    start = LagrangianMesh(grid, x.reshape(-1, 1).astype(complex), amb)
    h = -(x + 0.5 * x ** 2)
    path = geodesic_ivp(amb, start, h, T)
    lag0 = LinearSubspace(np.array([[1.0 + 0j]]), amb)
    # y = 1 + x is the graph of d(phi) with phi = x^2/2 + x over R
    from .lagrangian import QuadraticPotential
    lag1 = PotentialGraph(QuadraticPotential(np.array([[1.0]]), np.array([1.0])),
                          amb)
    return LineFixture(amb, path, lag0, lag1, (x_lo, x_hi))


def line_family(N: int = 64, K: int = 32, b: float = 0.8,
                stations: int = 9) -> "FamilyParameterization":
    """The closed-form vertical segment family between y = 0 and y = 1 + x,
    stations x = s in [0, b]."""
    from .transform import FamilyParameterization
    amb = AmbientStructure(1)
    grid = SegmentGrid(K)
    t = grid.params()
    s_values = np.linspace(0.0, b, stations)
    pts = np.empty((stations, K + 1, 1), dtype=complex)
    for k, s in enumerate(s_values):
        pts[k, :, 0] = s + 1j * t * (1.0 + s)
    return FamilyParameterization(grid, s_values, pts, amb, compatible=False)


# ----------------------------------------------------- exact ISL cylinders

def orbit_isl_cylinder(c: float, sig0: float, sig1: float, M: int = 32,
                       K: int = 16, ambient: Optional[AmbientStructure] = None
                       ) -> CylinderMesh:
    """Exact imaginary special Lagrangian orbit cylinder in flat C^2.

    gamma(sigma) = sqrt(c + i sigma) keeps Re(gamma^2) = c, which is the
    special condition for SO(2)-orbit surfaces; boundary circles lie on the
    Lagrangian planes e^{i beta_j} R^2 with beta_j = arg(c + i sigma_j)/2.
    """
    amb = ambient or AmbientStructure(2)
    grid = CylGrid(M, K)
    p, t = grid.params()
    sig = sig0 + (sig1 - sig0) * t
    gam = np.sqrt(c + 1j * sig)
    pts = np.stack([gam * np.cos(p), gam * np.sin(p)], axis=-1)
    return CylinderMesh(grid, pts, amb)


def orbit_boundaries(c: float, sig0: float, sig1: float,
                     ambient: Optional[AmbientStructure] = None):
    amb = ambient or AmbientStructure(2)
    b0 = 0.5 * math.atan2(sig0, c)
    b1 = 0.5 * math.atan2(sig1, c)
    return (LinearSubspace(np.exp(1j * b0) * np.eye(2), amb),
            LinearSubspace(np.exp(1j * b1) * np.eye(2), amb))


# ------------------------------------------------------------ graph fitting

def fit_graph_potential(points: np.ndarray, degree: int = 14,
                        box_pad: float = 0.15) -> tuple:
    """Fit an exact-Lagrangian potential graph x + i grad(phi)(x) to nodes.

    Solves min sum |grad(phi)(x_i) - y_i|^2 over a 2d Chebyshev series of
    total tensor degree ``degree``; returns (ChebPotential, sup_error).
    The target nodes must be graph-like over their real projections.
    """
    X = points.real
    Y = points.imag
    center = 0.5 * (X.max(axis=0) + X.min(axis=0))
    halfwidth = 0.5 * (X.max(axis=0) - X.min(axis=0)) * (1 + box_pad) + 1e-9
    U = (X - center) / halfwidth
    d = degree
    V = _cheb.chebvander2d(U[:, 0], U[:, 1], [d, d])      # (N, (d+1)^2)
    # derivative maps in coefficient space
    eye = np.eye(d + 1)
    Dc = np.stack([_cheb.chebder(eye[k], 1) for k in range(d + 1)], axis=1)
    Dc = np.vstack([Dc, np.zeros((1, d + 1))])            # keep degree shape
    Dx = np.kron(Dc, np.eye(d + 1)) / halfwidth[0]
    Dy = np.kron(np.eye(d + 1), Dc) / halfwidth[1]
    design = np.vstack([V @ Dx, V @ Dy])
    target = np.concatenate([Y[:, 0], Y[:, 1]])
    coeffs, *_ = np.linalg.lstsq(design, target, rcond=None)
    resid = design @ coeffs - target
    sup = float(np.max(np.abs(resid))) if len(resid) else 0.0
    C = coeffs.reshape(d + 1, d + 1)
    pot = ChebPotential(C, center, halfwidth)
    return pot, sup


# ------------------------------------------------------------ n = 2 caps

@dataclass
class CapFixture:
    ambient: AmbientStructure
    path: GeodesicPath
    lag0: BoundaryLagrangian
    lag1: BoundaryLagrangian
    h_peak: float
    h_rim: float
    fit_error: float
    saddle_value: Optional[float] = None


def _gaussian_bump(A: float, w: float, x0: np.ndarray):
    x0 = np.asarray(x0, float)

    def value(x):
        d = np.asarray(x, float) - x0
        return A * np.exp(-np.sum(d * d, axis=-1) / (2 * w * w))

    return value


def cap_fixture(res: Resolution = Resolution(), amplitude: float = 0.09,
                width: float = 0.6, offset=(0.10, 0.06), radius: float = 1.0,
                density: Optional[Density] = None, fit_degree: int = 14,
                rings: Optional[int] = None, tol=DEFAULT_TOL) -> CapFixture:
    """Flat-disk geodesic with one interior nondegenerate maximum of h.

    The start Lagrangian is the flat disk in R^2; h is an offset Gaussian
    bump, so the level circles foliate the disk around the peak, which is a
    fixed point of the flow and the single critical point of the geodesic.
    """
    amb = AmbientStructure(2, density or Density.constant())
    grid = DiskGrid(res.M, rings or (res.K + res.M // 8))
    xy = grid.xy() * radius
    start = LagrangianMesh(grid, xy.astype(complex), amb)
    bump = _gaussian_bump(amplitude, width, offset)
    h = bump(xy)
    path = geodesic_ivp(amb, start, h, res.T, tol)
    lag0 = PotentialGraph(ZeroPotential(), amb,
                          domain_radius=1.5 * radius)
    pot, fit_err = fit_graph_potential(path.points[-1], fit_degree)
    lag1 = PotentialGraph(pot, amb, domain_radius=1.5 * radius)
    rim = float(np.max(h[grid.rim_nodes]))
    return CapFixture(amb, path, lag0, lag1, float(h.max()), rim, fit_err)


def barbell_fixture(res: Resolution = Resolution(), amplitudes=(0.085, 0.07),
                    width: float = 0.42, separation: float = 0.52,
                    radius: float = 1.25, fit_degree: int = 16,
                    tol=DEFAULT_TOL) -> CapFixture:
    """Two-bump Hamiltonian: two interior maxima (the tested pair of
    critical points) and one saddle between them, excluded by the
    regular-value margin."""
    amb = AmbientStructure(2)
    grid = DiskGrid(res.M, res.K + res.M // 8)
    xy = grid.xy() * radius
    start = LagrangianMesh(grid, xy.astype(complex), amb)
    b0 = _gaussian_bump(amplitudes[0], width, (+separation, 0.03))
    b1 = _gaussian_bump(amplitudes[1], width, (-separation, -0.02))
    h = b0(xy) + b1(xy)
    path = geodesic_ivp(amb, start, h, res.T, tol)
    lag0 = PotentialGraph(ZeroPotential(), amb, domain_radius=1.5 * radius)
    pot, fit_err = fit_graph_potential(path.points[-1], fit_degree)
    lag1 = PotentialGraph(pot, amb, domain_radius=1.5 * radius)
    saddle = _find_saddle(path)
    rim = float(np.max(h[grid.rim_nodes]))
    return CapFixture(amb, path, lag0, lag1, float(h.max()), rim, fit_err,
                      saddle_value=saddle)


def _find_saddle(path: GeodesicPath) -> Optional[float]:
    from .transform import _h_fit_at, _h_value_at
    grid = path.grid
    xy = grid.xy()
    from .grids import disk_fit
    sol = disk_fit(grid).fit(path.h[:, None])[:, :, 0]
    gn = np.linalg.norm(sol[:, :2], axis=1)
    for i in np.argsort(gn)[:50]:
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
        if not ok or np.linalg.norm(x - xy[i]) > 0.4:
            continue
        _, H = _h_fit_at(path, x)
        ev = np.linalg.eigvalsh(H)
        if ev[0] < 0 < ev[1]:
            return _h_value_at(path, x)
    return None


def cap_levels(fix: CapFixture, count: int, lo_frac: float = 0.35,
               hi_frac: float = 0.9) -> np.ndarray:
    """Interior levels between the rim values and the peak, descending
    (station 0 nearest the cone point)."""
    floor = fix.h_rim if fix.saddle_value is None else max(
        fix.h_rim, fix.saddle_value)
    lo = floor + lo_frac * (fix.h_peak - floor)
    hi = floor + hi_frac * (fix.h_peak - floor)
    return np.linspace(hi, lo, count)
