"""Boundary Lagrangians: analytic descriptions, graphs, diagnostics.

Every Lagrangian plane in C^n is U R^n for a unitary U, and every Lagrangian
C^1-close to a graph {x + i grad(phi)(x)} is again such a graph, so the
library realizes "graph of dh over a reference" exactly by adding potentials
inside the unitary frame of the reference whenever the reference is itself a
potential graph or a linear subspace. Generic references (profile orbits,
parametric spheres) get the first-order tubular chart built from the
J-rotated orthonormal tangent frame, with its quadratic omega defect
reported rather than hidden.

Kinds and their parameters:

* ``linear_subspace``: n spanning vectors in C^n (a real frame).
* ``graph_over_reference``: reference + scalar potential.
* ``parametric_sphere``: truncated Fourier map of the (co)latitude and
  longitude angles into each real coordinate (n = 2 only).
* ``profile_orbit``: odd plane curve gamma with {gamma(s) x : x in S^{n-1}}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .ambient import (AmbientStructure, kronecker_samples, lagrangian_defect,
                      metric_form, omega_form, wrap_angle)
from .config import DEFAULT_TOL
from .grids import DiskGrid
from .mesh import LagrangianMesh


# ----------------------------------------------------------- potentials

class Potential:
    """Scalar potential on R^k with gradient and Hessian."""

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def hess(self, x):
        raise NotImplementedError

    def __add__(self, other):
        return SumPotential(self, other)

    def to_json(self):
        return {"type": "callable"}


class ZeroPotential(Potential):
    def value(self, x):
        x = np.asarray(x, float)
        return np.zeros(x.shape[:-1])

    def grad(self, x):
        return np.zeros_like(np.asarray(x, float))

    def hess(self, x):
        x = np.asarray(x, float)
        k = x.shape[-1]
        return np.zeros(x.shape[:-1] + (k, k))

    def to_json(self):
        return {"type": "zero"}


@dataclass
class QuadraticPotential(Potential):
    """q(x) = 1/2 x^T A x + b . x + c."""

    A: np.ndarray
    b: Optional[np.ndarray] = None
    c: float = 0.0

    def __post_init__(self):
        self.A = np.asarray(self.A, float)
        if self.b is None:
            self.b = np.zeros(self.A.shape[0])

    def value(self, x):
        x = np.asarray(x, float)
        return 0.5 * np.einsum("...i,ij,...j->...", x, self.A, x) + x @ self.b + self.c

    def grad(self, x):
        return np.asarray(x, float) @ self.A.T + self.b

    def hess(self, x):
        x = np.asarray(x, float)
        return np.broadcast_to(self.A, x.shape[:-1] + self.A.shape).copy()

    def to_json(self):
        return {"type": "quadratic", "A": self.A.tolist(),
                "b": self.b.tolist(), "c": self.c}


@dataclass
class ChebPotential(Potential):
    """2d Chebyshev series on a scaled box; smooth and serializable."""

    coeffs: np.ndarray
    center: np.ndarray
    halfwidth: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, float)
        self.center = np.asarray(self.center, float)
        self.halfwidth = np.asarray(self.halfwidth, float)
        from numpy.polynomial import chebyshev as C
        self._C = C
        self._dx = C.chebder(self.coeffs, axis=0)
        self._dy = C.chebder(self.coeffs, axis=1)
        self._dxx = C.chebder(self._dx, axis=0)
        self._dxy = C.chebder(self._dx, axis=1)
        self._dyy = C.chebder(self._dy, axis=1)

    def _uv(self, x):
        x = np.asarray(x, float)
        return ((x - self.center) / self.halfwidth)

    def _ev(self, coeffs, x):
        uv = self._uv(x)
        return self._C.chebval2d(uv[..., 0], uv[..., 1], coeffs)

    def value(self, x):
        return self._ev(self.coeffs, x)

    def grad(self, x):
        gx = self._ev(self._dx, x) / self.halfwidth[0]
        gy = self._ev(self._dy, x) / self.halfwidth[1]
        return np.stack([gx, gy], axis=-1)

    def hess(self, x):
        hxx = self._ev(self._dxx, x) / self.halfwidth[0] ** 2
        hxy = self._ev(self._dxy, x) / (self.halfwidth[0] * self.halfwidth[1])
        hyy = self._ev(self._dyy, x) / self.halfwidth[1] ** 2
        H = np.stack([np.stack([hxx, hxy], axis=-1),
                      np.stack([hxy, hyy], axis=-1)], axis=-2)
        return H

    def to_json(self):
        return {"type": "cheb", "coeffs": self.coeffs.tolist(),
                "center": self.center.tolist(), "halfwidth": self.halfwidth.tolist()}


@dataclass
class CallablePotential(Potential):
    fn: Callable
    gradient: Callable
    hessian: Optional[Callable] = None

    def value(self, x):
        return self.fn(np.asarray(x, float))

    def grad(self, x):
        return self.gradient(np.asarray(x, float))

    def hess(self, x):
        x = np.asarray(x, float)
        if self.hessian is not None:
            return self.hessian(x)
        k = x.shape[-1]
        h = 1e-6
        cols = []
        for j in range(k):
            e = np.zeros(k); e[j] = h
            cols.append((self.gradient(x + e) - self.gradient(x - e)) / (2 * h))
        return np.stack(cols, axis=-1)


@dataclass
class ScaledPotential(Potential):
    base: Potential
    factor: float

    def value(self, x):
        return self.factor * self.base.value(x)

    def grad(self, x):
        return self.factor * self.base.grad(x)

    def hess(self, x):
        return self.factor * self.base.hess(x)

    def to_json(self):
        return {"type": "scaled", "factor": self.factor,
                "base": self.base.to_json()}


@dataclass
class SumPotential(Potential):
    a: Potential
    b: Potential

    def value(self, x):
        return self.a.value(x) + self.b.value(x)

    def grad(self, x):
        return self.a.grad(x) + self.b.grad(x)

    def hess(self, x):
        return self.a.hess(x) + self.b.hess(x)

    def to_json(self):
        return {"type": "sum", "a": self.a.to_json(), "b": self.b.to_json()}


# --------------------------------------------------- boundary Lagrangians

class BoundaryLagrangian:
    """Analytic description of a positive Lagrangian boundary condition."""

    kind: str = "abstract"
    ambient: AmbientStructure
    param_dim: int

    # parametric interface
    def point(self, xi) -> np.ndarray:
        raise NotImplementedError

    def tangent(self, xi) -> np.ndarray:
        """Tangent vectors d(point)/d(xi_k), shape (..., param_dim, n)."""
        raise NotImplementedError

    def seeds(self, count: int = 32) -> np.ndarray:
        raise NotImplementedError

    def project(self, z, xi0=None, iters: int = 60, tol: float = 1e-13):
        """Gauss-Newton closest-point parameters for one or many points."""
        z = np.asarray(z, dtype=complex)
        single = z.ndim == 1
        Z = z[None, :] if single else z
        if xi0 is None:
            cand = self.seeds(64)
            pc = self.point(cand)
            d = np.linalg.norm((Z[:, None, :] - pc[None, :, :]).view(float)
                               .reshape(len(Z), len(cand), -1), axis=2)
            xi = cand[np.argmin(d, axis=1)].astype(float).copy()
        else:
            xi = np.atleast_2d(np.asarray(xi0, float)).copy()
            if len(xi) == 1 and len(Z) > 1:
                xi = np.repeat(xi, len(Z), axis=0)
        for _ in range(iters):
            P = self.point(xi)
            T = self.tangent(xi)                       # (B, k, n)
            R = (Z - P)                                # (B, n) complex
            Jr = np.concatenate([T.real, T.imag], axis=2)   # (B, k, 2n)
            Rr = np.concatenate([R.real, R.imag], axis=1)   # (B, 2n)
            JJt = np.einsum("bkm,blm->bkl", Jr, Jr)
            rhs = np.einsum("bkm,bm->bk", Jr, Rr)
            try:
                delta = np.linalg.solve(JJt, rhs)
            except np.linalg.LinAlgError:
                delta = np.einsum("bkl,bl->bk", np.linalg.pinv(JJt), rhs)
            xi = xi + delta
            if np.max(np.abs(delta)) < tol:
                break
        return xi[0] if single else xi

    def distance(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        xi = self.project(z)
        P = self.point(np.atleast_2d(xi))
        Z = z[None, :] if z.ndim == 1 else z
        d = np.linalg.norm((Z - P).view(float).reshape(len(P), -1), axis=1)
        return d[0] if z.ndim == 1 else d

    def closest_point(self, z):
        xi = self.project(z)
        P = self.point(np.atleast_2d(np.asarray(xi, float)))
        return P[0] if np.asarray(z).ndim == 1 else P

    def tangent_at(self, z):
        """Tangent frame (param_dim, n) at the closest point to z."""
        xi = self.project(z)
        return self.tangent(np.atleast_2d(np.asarray(xi, float)))[0]

    def omega_residual(self, samples: int = 128) -> float:
        xi = self.seeds(samples)
        T = self.tangent(xi)
        worst = 0.0
        for k in range(len(xi)):
            worst = max(worst, lagrangian_defect(self.ambient, self.point(xi[k:k+1])[0], T[k]))
        return worst

    def to_json(self) -> dict:
        raise NotImplementedError


@dataclass
class LinearSubspace(BoundaryLagrangian):
    """Lagrangian linear subspace spanned by n real-independent vectors."""

    frame: np.ndarray
    ambient: AmbientStructure
    orientation: int = 1
    kind: str = field(default="linear_subspace", init=False)

    def __post_init__(self):
        self.frame = np.asarray(self.frame, dtype=complex)
        n = self.ambient.n
        if self.frame.shape != (n, n):
            raise ValueError("frame must contain n vectors of C^n")
        defect = lagrangian_defect(self.ambient, np.zeros(n), self.frame)
        if defect > self.ambient.tol.tol_lag * max(1.0, np.max(np.abs(self.frame)) ** 2):
            raise ValueError(f"frame is not Lagrangian (omega residual {defect:.2e})")
        self.param_dim = n
        # hermitian-orthonormalize: columns give the unitary carrying R^n here
        Q = _gram_schmidt_real(self.frame)
        self.unitary = Q.T                                # U e_j = Q[j]

    def point(self, xi):
        xi = np.asarray(xi, float)
        return xi @ self.frame

    def tangent(self, xi):
        xi = np.asarray(xi, float)
        return np.broadcast_to(self.frame, xi.shape[:-1] + self.frame.shape).copy()

    def seeds(self, count: int = 32):
        return kronecker_samples(count, self.param_dim, -1.5, 1.5)

    def project(self, z, xi0=None, **kw):
        z = np.asarray(z, dtype=complex)
        Zr = np.concatenate([z.real, z.imag], axis=-1)
        F = np.concatenate([self.frame.real, self.frame.imag], axis=1)  # (n, 2n)
        sol, *_ = np.linalg.lstsq(F.T, np.atleast_2d(Zr).T, rcond=None)
        xi = sol.T
        return xi[0] if z.ndim == 1 else xi

    def to_json(self):
        return {"kind": self.kind,
                "frame": [[v.real, v.imag] for v in self.frame.reshape(-1)],
                "n": self.ambient.n}


def _gram_schmidt_real(frame: np.ndarray) -> np.ndarray:
    """g-orthonormalize rows of a real frame of a Lagrangian plane."""
    Q = []
    for v in frame:
        w = v.astype(complex)
        for q in Q:
            w = w - metric_form(q, w) * q
        nrm = math.sqrt(metric_form(w, w))
        Q.append(w / nrm)
    return np.asarray(Q)


@dataclass
class PotentialGraph(BoundaryLagrangian):
    """Exact Lagrangian graph U {x + i grad(phi)(x)} for unitary U.

    The unitary frame lets every linear Lagrangian subspace act as the base:
    phi = 0 reproduces the subspace itself, and adding potentials realizes
    graphs of exact 1-forms over it without any omega defect.
    """

    potential: Potential
    ambient: AmbientStructure
    unitary: Optional[np.ndarray] = None
    domain_radius: float = 2.0
    domain_center: Optional[np.ndarray] = None
    kind: str = field(default="graph_over_reference", init=False)

    def __post_init__(self):
        n = self.ambient.n
        self.param_dim = n
        if self.unitary is None:
            self.unitary = np.eye(n, dtype=complex)
        else:
            self.unitary = np.asarray(self.unitary, dtype=complex)
        if self.domain_center is None:
            self.domain_center = np.zeros(n)

    def point(self, xi):
        xi = np.asarray(xi, float)
        w = xi + 1j * self.potential.grad(xi)
        return w @ self.unitary.T

    def tangent(self, xi):
        xi = np.asarray(xi, float)
        H = self.potential.hess(xi)                     # (..., n, n)
        T = np.eye(self.ambient.n) + 1j * H             # rows: e_k + i H e_k
        return T @ self.unitary.T

    def seeds(self, count: int = 32):
        return self.domain_center + kronecker_samples(
            count, self.param_dim, -self.domain_radius, self.domain_radius)

    def project(self, z, xi0=None, iters: int = 60, tol: float = 1e-13):
        """Newton on x + i grad(phi)(x) = U* z, a well-posed square system."""
        z = np.asarray(z, dtype=complex)
        single = z.ndim == 1
        W = (z[None, :] if single else z) @ np.conj(self.unitary)
        x = W.real.copy().astype(float)
        for _ in range(iters):
            F = x + 1j * self.potential.grad(x) - W
            H = self.potential.hess(x)
            n = x.shape[-1]
            # residual in real coordinates; Jacobian [[I],[H]] stacked
            JtJ = np.eye(n) + np.einsum("...ij,...ik->...jk", H, H)
            rhs = F.real + np.einsum("...ij,...i->...j", H, F.imag)
            delta = np.linalg.solve(JtJ, rhs[..., None])[..., 0]
            x = x - delta
            if np.max(np.abs(delta)) < tol:
                break
        return x[0] if single else x

    def graph_with(self, h: Potential) -> "PotentialGraph":
        return PotentialGraph(self.potential + h, self.ambient, self.unitary,
                              self.domain_radius, self.domain_center)

    def to_json(self):
        return {"kind": self.kind, "n": self.ambient.n,
                "unitary": [[v.real, v.imag] for v in self.unitary.reshape(-1)],
                "potential": self.potential.to_json(),
                "domain_radius": self.domain_radius}


@dataclass
class ProfileOrbit(BoundaryLagrangian):
    """Orbit set {gamma(s) x : x in S^{n-1}} of an odd plane curve (n = 2).

    gamma is an odd complex polynomial, gamma(s) = sum c_k s^{2k+1}; the
    orbit is automatically Lagrangian since omega(gamma' x, gamma X) is a
    multiple of Im(conj(gamma) gamma') <x, X> = 0 for X orthogonal to x.
    """

    odd_coeffs: Sequence[complex]
    ambient: AmbientStructure
    orientation: int = 1
    kind: str = field(default="profile_orbit", init=False)

    def __post_init__(self):
        if self.ambient.n != 2:
            raise ValueError("profile orbits are implemented for n = 2")
        self.param_dim = 2
        self.odd_coeffs = tuple(complex(c) for c in self.odd_coeffs)

    def gamma(self, s):
        s = np.asarray(s, float)
        acc = np.zeros(s.shape, dtype=complex)
        for k, c in enumerate(self.odd_coeffs):
            acc = acc + c * s ** (2 * k + 1)
        return acc

    def dgamma(self, s):
        s = np.asarray(s, float)
        acc = np.zeros(s.shape, dtype=complex)
        for k, c in enumerate(self.odd_coeffs):
            acc = acc + (2 * k + 1) * c * s ** (2 * k)
        return acc

    def point(self, xi):
        xi = np.asarray(xi, float)
        s, a = xi[..., 0], xi[..., 1]
        u = np.stack([np.cos(a), np.sin(a)], axis=-1)
        return self.gamma(s)[..., None] * u

    def tangent(self, xi):
        xi = np.asarray(xi, float)
        s, a = xi[..., 0], xi[..., 1]
        u = np.stack([np.cos(a), np.sin(a)], axis=-1)
        up = np.stack([-np.sin(a), np.cos(a)], axis=-1)
        t1 = self.dgamma(s)[..., None] * u
        t2 = self.gamma(s)[..., None] * up
        return np.stack([t1, t2], axis=-2)

    def seeds(self, count: int = 32):
        pts = kronecker_samples(count, 2)
        return np.stack([0.05 + 0.95 * pts[:, 0], 2 * math.pi * pts[:, 1]], axis=-1)

    def sample_mesh(self, grid: DiskGrid) -> LagrangianMesh:
        r, a = grid.params()
        pts = self.point(np.stack([r, a], axis=-1))
        return LagrangianMesh(grid, pts, self.ambient, self.orientation)

    def phase_range(self, samples: int = 64):
        s = np.linspace(0.02, 1.0, samples)
        ph = wrap_angle(np.angle(self.gamma(s) * self.dgamma(s)))
        return float(np.min(ph)), float(np.max(ph))

    def to_json(self):
        return {"kind": self.kind,
                "odd_coeffs": [[c.real, c.imag] for c in self.odd_coeffs],
                "n": self.ambient.n}


@dataclass
class ParametricSphere(BoundaryLagrangian):
    """Truncated Fourier immersion of S^2 into C^2 (fixture kind).

    Coordinates are (colatitude u in [0, pi], longitude v); each of the four
    real ambient coordinates is a truncated series sum c[j, k, l] f_j(u)
    g_k(v) with f, g in {1, cos, sin, cos2, ...}. No Lagrangian structure is
    implied; positivity_report measures the omega residual honestly.
    """

    coeffs: np.ndarray          # (4, J, K) real
    ambient: AmbientStructure
    kind: str = field(default="parametric_sphere", init=False)

    def __post_init__(self):
        if self.ambient.n != 2:
            raise ValueError("parametric spheres are implemented for n = 2")
        self.coeffs = np.asarray(self.coeffs, float)
        self.param_dim = 2

    @staticmethod
    def _basis(t, J):
        out = [np.ones_like(t)]
        k = 1
        while len(out) < J:
            out.append(np.cos(k * t))
            if len(out) < J:
                out.append(np.sin(k * t))
            k += 1
        return np.stack(out, axis=-1)

    @staticmethod
    def _dbasis(t, J):
        out = [np.zeros_like(t)]
        k = 1
        while len(out) < J:
            out.append(-k * np.sin(k * t))
            if len(out) < J:
                out.append(k * np.cos(k * t))
            k += 1
        return np.stack(out, axis=-1)

    def to_json(self):
        return {"kind": self.kind, "coeffs": self.coeffs.tolist(), "n": 2}


# fix ParametricSphere.point / tangent with plain defs (kept out of the
# dataclass body above for readability)

def _psphere_point(self, xi):
    xi = np.asarray(xi, float)
    u, v = xi[..., 0], xi[..., 1]
    _, J, K = self.coeffs.shape
    fu = ParametricSphere._basis(u, J)
    gv = ParametricSphere._basis(v, K)
    vals = np.einsum("cjk,...j,...k->...c", self.coeffs, fu, gv)
    return np.stack([vals[..., 0] + 1j * vals[..., 1],
                     vals[..., 2] + 1j * vals[..., 3]], axis=-1)


def _psphere_tangent(self, xi):
    xi = np.asarray(xi, float)
    u, v = xi[..., 0], xi[..., 1]
    _, J, K = self.coeffs.shape
    fu, gv = ParametricSphere._basis(u, J), ParametricSphere._basis(v, K)
    dfu, dgv = ParametricSphere._dbasis(u, J), ParametricSphere._dbasis(v, K)
    du = np.einsum("cjk,...j,...k->...c", self.coeffs, dfu, gv)
    dv = np.einsum("cjk,...j,...k->...c", self.coeffs, fu, dgv)
    tu = np.stack([du[..., 0] + 1j * du[..., 1], du[..., 2] + 1j * du[..., 3]], axis=-1)
    tv = np.stack([dv[..., 0] + 1j * dv[..., 1], dv[..., 2] + 1j * dv[..., 3]], axis=-1)
    return np.stack([tu, tv], axis=-2)


def _psphere_seeds(self, count=32):
    pts = kronecker_samples(count, 2)
    return np.stack([0.1 + (math.pi - 0.2) * pts[:, 0],
                     2 * math.pi * pts[:, 1]], axis=-1)


ParametricSphere.point = _psphere_point
ParametricSphere.tangent = _psphere_tangent
ParametricSphere.seeds = _psphere_seeds


# ------------------------------------------------------------- operations

def profile_sphere(gamma_odd_coeffs, n: int, ambient: AmbientStructure,
                   tol=DEFAULT_TOL) -> ProfileOrbit:
    """Fixture generator for profile orbits, with the Lagrangian invariant
    verified numerically and positivity failures flagged (not fatal)."""
    if n != ambient.n:
        raise ValueError("dimension mismatch")
    orbit = ProfileOrbit(gamma_odd_coeffs, ambient)
    s = np.linspace(0.05, 1.0, 40)
    g = orbit.gamma(s)
    if np.any(np.abs(g) < 1e-14):
        raise ValueError("gamma vanishes away from s = 0")
    res = orbit.omega_residual(64)
    if res > tol.tol_lag:
        raise ValueError(f"orbit failed the Lagrangian check ({res:.2e})")
    return orbit


def perturb_graph(base: BoundaryLagrangian, h: Optional[Potential],
                  tol=DEFAULT_TOL) -> BoundaryLagrangian:
    """The Lagrangian graph of dh over ``base``; h = None or 0 gives base."""
    if h is None or isinstance(h, ZeroPotential):
        return base
    if isinstance(h, QuadraticPotential) and not np.any(h.A) and not np.any(h.b):
        return base
    if isinstance(base, PotentialGraph):
        return base.graph_with(h)
    if isinstance(base, LinearSubspace):
        return PotentialGraph(h, base.ambient, base.unitary)
    return _TubularGraph(base, h)


@dataclass
class _TubularGraph(BoundaryLagrangian):
    """First-order tubular-chart graph over a generic reference.

    Points move by the omega-dual of dh in the J-rotated frame; Lagrangian
    only up to O(|h|^2), which omega_residual reports.
    """

    base: BoundaryLagrangian
    h: Potential
    kind: str = field(default="graph_over_reference", init=False)

    def __post_init__(self):
        self.ambient = self.base.ambient
        self.param_dim = self.base.param_dim

    def point(self, xi):
        xi = np.atleast_2d(np.asarray(xi, float))
        P = self.base.point(xi)
        T = self.base.tangent(xi)
        out = P.astype(complex).copy()
        dh = _fd_param_grad(self.h, xi)
        for b in range(len(xi)):
            O = _gram_schmidt_real(T[b])
            # components of dh in the coframe dual to the orthonormal frame
            A = np.array([[metric_form(O[i], T[b][j]) for i in range(len(O))]
                          for j in range(len(O))])
            comp = np.linalg.solve(A, dh[b])
            out[b] = out[b] - 1j * (comp @ O)
        return out

    def tangent(self, xi):
        xi = np.atleast_2d(np.asarray(xi, float))
        eps = 1e-6
        k = self.param_dim
        T = []
        for j in range(k):
            e = np.zeros(k); e[j] = eps
            T.append((self.point(xi + e) - self.point(xi - e)) / (2 * eps))
        return np.stack(T, axis=-2)

    def seeds(self, count=32):
        return self.base.seeds(count)


def _fd_param_grad(h: Potential, xi, eps=1e-7):
    xi = np.asarray(xi, float)
    k = xi.shape[-1]
    cols = []
    for j in range(k):
        e = np.zeros(k); e[j] = eps
        cols.append((h.value(xi + e) - h.value(xi - e)) / (2 * eps))
    return np.stack(cols, axis=-1)


def positivity_report(ambient: AmbientStructure, lag, samples: int = 256,
                      tol=DEFAULT_TOL) -> dict:
    """Phase and omega diagnostics over a deterministic sample set."""
    if isinstance(lag, LagrangianMesh):
        phases = lag.sampled_phases(samples)
        worst = float(np.max(np.abs(lag.face_omega()))) if lag.grid.n_nodes else 0.0
        scale = lag.face_area_scale()
    else:
        xi = lag.seeds(samples)
        T = lag.tangent(xi)
        P = lag.point(xi)
        phases = np.empty(len(xi))
        worst = 0.0
        for k in range(len(xi)):
            worst = max(worst, lagrangian_defect(ambient, P[k], T[k]))
            phases[k] = wrap_angle(np.angle(ambient.omega_n_form(P[k], T[k])))
        scale = 1.0
    return {
        "min_phase": float(np.min(phases)),
        "max_phase": float(np.max(phases)),
        "worst_omega_residual": worst,
        "omega_scale": scale,
        "positive": bool(np.all(np.abs(phases) < math.pi / 2)),
        "near_degenerate": bool(np.any(np.abs(phases) > math.pi / 2 - tol.delta_phase)),
    }


def principal_angle_gap(frameA: np.ndarray, frameB: np.ndarray) -> float:
    """Smallest principal angle between the real spans of two frames."""

    def orthonormal(frame):
        Fr = np.concatenate([np.asarray(frame).real, np.asarray(frame).imag], axis=1)
        q, _ = np.linalg.qr(Fr.T)
        return q[:, :len(frame)]

    QA, QB = orthonormal(frameA), orthonormal(frameB)
    s = np.linalg.svd(QA.T @ QB, compute_uv=False)
    smax = min(1.0, float(np.max(s)))
    return math.acos(smax)


def intersection_points(ambient: AmbientStructure, lagA: BoundaryLagrangian,
                        lagB: BoundaryLagrangian, seeds, tol=DEFAULT_TOL) -> list:
    """Newton-refined intersections of two boundary Lagrangians.

    Each seed is projected to both surfaces and a square Newton iteration
    solves point_A(xi) = point_B(eta). Non-convergent seeds are reported
    with ``converged = False`` rather than raised.
    """
    results = []
    for seed in np.atleast_2d(np.asarray(seeds, dtype=complex)):
        xa = np.asarray(lagA.project(seed), float)
        xb = np.asarray(lagB.project(seed), float)
        ok = False
        for _ in range(80):
            Pa = lagA.point(np.atleast_2d(xa))[0]
            Pb = lagB.point(np.atleast_2d(xb))[0]
            R = Pa - Pb
            if np.linalg.norm(R.view(float)) < tol.tol_intersect:
                ok = True
                break
            Ta = lagA.tangent(np.atleast_2d(xa))[0]
            Tb = lagB.tangent(np.atleast_2d(xb))[0]
            J = np.concatenate([
                np.concatenate([Ta.real, Ta.imag], axis=1),
                -np.concatenate([Tb.real, Tb.imag], axis=1)], axis=0)  # (2k, 2n)
            rhs = np.concatenate([R.real, R.imag])
            delta, *_ = np.linalg.lstsq(J.T, rhs, rcond=None)
            k = lagA.param_dim
            xa = xa - delta[:k]
            xb = xb - delta[k:]
        if not ok:
            results.append({"point": None, "converged": False})
            continue
        Ta = lagA.tangent(np.atleast_2d(xa))[0]
        Tb = lagB.tangent(np.atleast_2d(xb))[0]
        gap = principal_angle_gap(Ta, Tb)
        results.append({
            "point": 0.5 * (Pa + Pb),
            "param_a": xa, "param_b": xb,
            "transversality_gap": gap,
            "transverse": bool(gap > tol.tol_transverse),
            "converged": True,
        })
    # deduplicate converged points
    unique = []
    for r in results:
        if not r["converged"]:
            unique.append(r)
            continue
        if any(u["converged"] and np.linalg.norm((u["point"] - r["point"]).view(float)) < 1e-8
               for u in unique):
            continue
        unique.append(r)
    return unique


# ------------------------------------------------------------ tube charts

@dataclass
class TubularChart:
    """Closest-point chart of a boundary Lagrangian: z = P(xi) + sum c_i n_i.

    The normal frame is J applied to the g-orthonormalized tangent frame at
    the foot point; used by cutoff Hamiltonian flows.
    """

    base: BoundaryLagrangian

    def split(self, z):
        xi = np.asarray(self.base.project(z), float)
        P = self.base.point(np.atleast_2d(xi))[0]
        T = self.base.tangent(np.atleast_2d(xi))[0]
        O = _gram_schmidt_real(T)
        normals = 1j * O
        offset = np.asarray(z, complex) - P
        c = np.array([metric_form(normals[i], offset) for i in range(len(O))])
        return xi, c, P

    def tube_norm(self, z):
        z = np.asarray(z, complex)
        if z.ndim == 1:
            _, c, _ = self.split(z)
            return float(np.linalg.norm(c))
        return np.array([self.tube_norm(zz) for zz in z])

    def project_param(self, z):
        z = np.asarray(z, complex)
        if z.ndim == 1:
            return np.asarray(self.base.project(z), float)
        return np.asarray(self.base.project(z), float)

    def assemble(self, xi, c):
        P = self.base.point(np.atleast_2d(xi))[0]
        T = self.base.tangent(np.atleast_2d(xi))[0]
        O = _gram_schmidt_real(T)
        return P + np.asarray(c) @ (1j * O)
