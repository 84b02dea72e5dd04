"""Weighted Laplacian on cylinder and segment meshes.

The operator is the weak form of u -> *d(rho * du) with respect to the
pullback metric of the embedding: the stiffness matrix

    A[i,j] = integral rho <d phi_i, d phi_j> dvol

is assembled with bilinear quadrilateral elements and Gauss quadrature
(tensor 2x2 by default), with rho evaluated at quadrature points through the
embedding. Constants span the kernel before boundary conditions (A 1 = 0),
A is symmetric positive semidefinite, and with the strong sign convention
Delta_rho u = f corresponds to  A u + M f = 0  on interior test functions.

Scalar fields carry a space tag: ``free``, ``dirichlet_zero_both`` (zero on
both boundary circles) or ``zero_C0_const_C1`` (zero on C0, a single common
value on C1). The tagged constraint of the last space is what makes the
constrained operator have a one-dimensional kernel, spanned by the
fundamental harmonic (zero on C0, one on C1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .config import DEFAULT_TOL
from .mesh import CylinderMesh, SegmentMesh, _GAUSS_1D

SPACE_TAGS = ("free", "dirichlet_zero_both", "zero_C0_const_C1")


@dataclass
class ScalarField:
    values: np.ndarray
    space: str = "free"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.space not in SPACE_TAGS:
            raise ValueError(f"unknown space tag {self.space!r}")

    def enforce(self, mesh):
        """Project the boundary values onto the tagged constraint, exactly."""
        if self.space == "dirichlet_zero_both":
            self.values[mesh.c0_nodes] = 0.0
            self.values[mesh.c1_nodes] = 0.0
        elif self.space == "zero_C0_const_C1":
            self.values[mesh.c0_nodes] = 0.0
            self.values[mesh.c1_nodes] = float(np.mean(self.values[mesh.c1_nodes]))
        return self

    def check(self, mesh, atol=0.0):
        if self.space == "dirichlet_zero_both":
            return (np.max(np.abs(self.values[mesh.c0_nodes]), initial=0) <= atol and
                    np.max(np.abs(self.values[mesh.c1_nodes]), initial=0) <= atol)
        if self.space == "zero_C0_const_C1":
            c1 = self.values[mesh.c1_nodes]
            return (np.max(np.abs(self.values[mesh.c0_nodes]), initial=0) <= atol and
                    np.max(np.abs(c1 - c1[0]), initial=0) <= atol)
        return True


@dataclass
class WeightedStiffness:
    A: sp.csr_matrix
    mass: sp.csr_matrix
    c0_nodes: np.ndarray
    c1_nodes: np.ndarray
    n_nodes: int

    @property
    def boundary_nodes(self):
        return np.concatenate([self.c0_nodes, self.c1_nodes])

    @property
    def interior_nodes(self):
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.where(mask)[0]

    def norm(self) -> float:
        return float(np.max(np.abs(self.A).sum(axis=1)))


def assemble(mesh, order: int = 2, rho_override=None) -> WeightedStiffness:
    """Assemble the rho-weighted stiffness and the metric mass matrix."""
    mesh.check_immersed()
    if isinstance(mesh, SegmentMesh):
        return _assemble_segment(mesh, order, rho_override)
    q = mesh.quadrature(order)
    N, dN, w = q["N"], q["dN"], q["w"]
    g11, g12, g22, detG = q["g11"], q["g12"], q["g22"], q["detG"]
    rho = q["rho"] if rho_override is None else rho_override(q["pos"])
    sqrtg = np.sqrt(detG)
    # inverse metric entries
    i11 = g22 / detG
    i12 = -g12 / detG
    i22 = g11 / detG
    # K[e,a,b] = sum_q w rho sqrtg * dN_a . Ginv dN_b
    dx, dy = dN[:, :, 0], dN[:, :, 1]        # (Q,4)
    coef = w[None, :] * rho * sqrtg          # (E,Q)
    Kab = (np.einsum("eq,qa,qb,eq->eab", coef, dx, dx, i11)
           + np.einsum("eq,qa,qb,eq->eab", coef, dx, dy, i12)
           + np.einsum("eq,qa,qb,eq->eab", coef, dy, dx, i12)
           + np.einsum("eq,qa,qb,eq->eab", coef, dy, dy, i22))
    Mab = np.einsum("eq,qa,qb->eab", w[None, :] * sqrtg, N, N)
    quads = q["quads"]
    rows = np.repeat(quads, 4, axis=1).ravel()
    cols = np.tile(quads, (1, 4)).ravel()
    A = sp.coo_matrix((Kab.ravel(), (rows, cols)),
                      shape=(mesh.grid.n_nodes,) * 2).tocsr()
    M = sp.coo_matrix((Mab.ravel(), (rows, cols)),
                      shape=(mesh.grid.n_nodes,) * 2).tocsr()
    A = 0.5 * (A + A.T)
    return WeightedStiffness(A, M, mesh.c0_nodes, mesh.c1_nodes, mesh.grid.n_nodes)


def _assemble_segment(mesh: SegmentMesh, order: int, rho_override) -> WeightedStiffness:
    xg, wg = _GAUSS_1D[max(order, 3)]
    z = mesh.points[:, 0]
    a, b = z[:-1], z[1:]
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    pos = mid[:, None] + np.outer(half, xg)           # (E,Q)
    ell = np.abs(half)[:, None] * np.ones_like(xg)    # |dz/dxi|
    if rho_override is None:
        rho = mesh.ambient.rho_at(pos[..., None])
        if np.ndim(rho) == 0:
            rho = np.full(pos.shape, float(rho))
    else:
        rho = rho_override(pos[..., None])
    # P1 on [-1,1]: N0 = (1-x)/2, N1 = (1+x)/2, dN = -+1/2
    N = np.stack([(1 - xg) / 2, (1 + xg) / 2], axis=1)
    dN = np.array([-0.5, 0.5])
    coefK = np.sum(wg[None, :] * rho / ell, axis=1)   # (E,)
    Kab = coefK[:, None, None] * np.outer(dN, dN)[None, :, :]
    Mab = np.einsum("eq,qa,qb->eab", wg[None, :] * ell, N, N)
    conn = np.stack([np.arange(mesh.grid.N), np.arange(1, mesh.grid.N + 1)], axis=1)
    rows = np.repeat(conn, 2, axis=1).ravel()
    cols = np.tile(conn, (1, 2)).ravel()
    A = sp.coo_matrix((Kab.ravel(), (rows, cols)),
                      shape=(mesh.grid.n_nodes,) * 2).tocsr()
    M = sp.coo_matrix((Mab.ravel(), (rows, cols)),
                      shape=(mesh.grid.n_nodes,) * 2).tocsr()
    return WeightedStiffness(A, M, mesh.c0_nodes, mesh.c1_nodes, mesh.grid.n_nodes)


def solve_dirichlet(stiffness: WeightedStiffness, rhs: Optional[ScalarField],
                    bc0: float | np.ndarray, bc1: float | np.ndarray,
                    tol=DEFAULT_TOL) -> ScalarField:
    """Solve Delta_rho u = rhs with Dirichlet values bc0 on C0, bc1 on C1."""
    n = stiffness.n_nodes
    u = np.zeros(n)
    u[stiffness.c0_nodes] = bc0
    u[stiffness.c1_nodes] = bc1
    interior = stiffness.interior_nodes
    b = np.zeros(n)
    if rhs is not None:
        if not np.all(np.isfinite(rhs.values)):
            raise ValueError("rhs must be finite")
        b = -(stiffness.mass @ rhs.values)
    if not np.all(np.isfinite(u)):
        raise ValueError("boundary data must be finite")
    A = stiffness.A
    rhs_vec = b[interior] - A[interior][:, stiffness.boundary_nodes] @ u[stiffness.boundary_nodes]
    AII = A[interior][:, interior].tocsc()
    try:
        sol = spla.spsolve(AII, rhs_vec)
    except RuntimeError as exc:  # pragma: no cover - factorization breakdown
        est = np.max(np.abs(AII.diagonal())) / max(np.min(np.abs(AII.diagonal())), 1e-300)
        raise RuntimeError(f"solver breakdown (diag condition estimate {est:.2e})") from exc
    resid = np.linalg.norm(AII @ sol - rhs_vec)
    scale = max(np.linalg.norm(rhs_vec), np.linalg.norm(sol) * stiffness.norm(), 1e-300)
    if resid / scale > tol.tol_solve * 10:
        raise RuntimeError(f"solver residual {resid/scale:.2e} above tolerance")
    u[interior] = sol
    return ScalarField(u, "free")


def fundamental_harmonic(mesh, stiffness: Optional[WeightedStiffness] = None,
                         tol=DEFAULT_TOL) -> ScalarField:
    """Delta_rho-harmonic field with value 0 on C0 and exactly 1 on C1."""
    if stiffness is None:
        stiffness = assemble(mesh)
    sigma = solve_dirichlet(stiffness, None, 0.0, 1.0, tol)
    field = ScalarField(sigma.values, "zero_C0_const_C1").enforce(mesh)
    lo, hi = float(field.values.min()), float(field.values.max())
    if lo < -1e-10 or hi > 1.0 + 1e-10:
        raise RuntimeError(
            f"discrete maximum principle violated (range [{lo:.3e}, {hi:.3e}]); "
            "refine the mesh")
    return field


def _constrained_operator(stiffness: WeightedStiffness) -> sp.csr_matrix:
    """Matrix of Delta_rho on the zero-C0, constant-C1 space.

    Rows are interior test functions; columns are interior nodes plus one
    final column for the common C1 value, so the operator has one more
    column than rows (index one, kernel spanned by the fundamental
    harmonic when the interior block is nonsingular).
    """
    interior = stiffness.interior_nodes
    A = stiffness.A
    AII = A[interior][:, interior]
    c1col = np.asarray(A[interior][:, stiffness.c1_nodes].sum(axis=1))
    return sp.hstack([AII, sp.csr_matrix(c1col)]).tocsr()


def smallest_singular_values(B: sp.spmatrix, k: int = 3, shift: float = 0.0):
    """Few smallest singular values of a sparse matrix, kernel included.

    Works on the square form B^T B (so the structural null space of a wide
    operator shows up as genuine zero eigenvalues) by subspace iteration on
    (B^T B + shift^2 I)^{-1} with a sparse LU factor and deterministic
    start. Returns (svals, lam_floor): eigenvalues of B^T B below the
    floating-point floor ``lam_floor`` are exact kernel directions rendered
    as roundoff and are reported as 0.0.
    """
    BtB = (B.T @ B).tocsc()
    m = BtB.shape[0]
    mu = shift ** 2 if shift > 0 else 0.0
    lam_floor = 1e-12 * float(np.max(np.abs(BtB).sum(axis=1)))
    reg = BtB + max(mu, lam_floor) * sp.identity(m, format="csc")
    lu = spla.splu(reg)
    rng = np.random.default_rng(12345)
    V = rng.standard_normal((m, k + 2))
    for _ in range(24):
        V = lu.solve(V)
        V, _ = np.linalg.qr(V)
    H = V.T @ (BtB @ V)
    evals = np.sort(np.linalg.eigvalsh(0.5 * (H + H.T)))[:k]
    svals = np.where(evals < lam_floor, 0.0, np.sqrt(np.clip(evals, 0.0, None)))
    return svals, lam_floor


def kernel_report(stiffness: WeightedStiffness, constrained: bool = True,
                  tol=DEFAULT_TOL) -> dict:
    """Kernel dimension estimate of the constrained operator.

    ``constrained=True`` inspects the zero-C0/const-C1 operator (expected
    kernel dimension one, spanned by the fundamental harmonic);
    ``constrained=False`` inspects the fully Dirichlet operator (expected
    zero). Singular values below cut = kernel_rel_cut * ||A|| count as
    kernel; the gap is the ratio of the next one to the cut.
    """
    if constrained:
        B = _constrained_operator(stiffness)
    else:
        interior = stiffness.interior_nodes
        B = stiffness.A[interior][:, interior].tocsr()
    cut = tol.kernel_rel_cut * stiffness.norm()
    svals, _ = smallest_singular_values(B, k=3, shift=cut)
    dim = int(np.sum(svals < cut))
    above = svals[svals >= cut]
    gap = float(above[0] / cut) if len(above) else math.inf
    return {"dim_estimate": dim, "gap": gap,
            "smallest_singular_values": [float(s) for s in svals],
            "cutoff": float(cut)}


def gradient_field(mesh, field: ScalarField, order: int = 2):
    """Element-center metric gradient of the interpolant, as ambient vectors.

    Returns (centers, grads, norms): positions (E, n), df(grad u) (E, n)
    complex, and |grad u| with respect to the pullback metric (E,).
    """
    if isinstance(mesh, SegmentMesh):
        z = mesh.points[:, 0]
        dz = np.diff(z)
        du = np.diff(field.values) / np.abs(dz)
        centers = (0.5 * (z[:-1] + z[1:])).reshape(-1, 1)
        grads = (du * dz / np.abs(dz)).reshape(-1, 1)
        return centers, grads, np.abs(du)
    q = mesh.quadrature(order)
    vals = field.values[q["quads"]]                     # (E,4)
    # evaluate at the element center (mean of shape gradients at center)
    dx_c = np.array([-0.25, 0.25, 0.25, -0.25])
    dy_c = np.array([-0.25, -0.25, 0.25, 0.25])
    du1 = vals @ dx_c
    du2 = vals @ dy_c
    corners = mesh.points[q["quads"]]
    tau1 = 0.25 * ((corners[:, 1] - corners[:, 0]) + (corners[:, 2] - corners[:, 3]))
    tau2 = 0.25 * ((corners[:, 3] - corners[:, 0]) + (corners[:, 2] - corners[:, 1]))
    g11 = np.real(np.sum(np.conj(tau1) * tau1, axis=-1))
    g12 = np.real(np.sum(np.conj(tau1) * tau2, axis=-1))
    g22 = np.real(np.sum(np.conj(tau2) * tau2, axis=-1))
    det = g11 * g22 - g12 ** 2
    if np.min(det) <= 0:
        raise ValueError("degenerate element in gradient evaluation")
    c1 = (g22 * du1 - g12 * du2) / det
    c2 = (-g12 * du1 + g11 * du2) / det
    grads = c1[:, None] * tau1 + c2[:, None] * tau2
    norms = np.sqrt(np.maximum(c1 * du1 + c2 * du2, 0.0))
    centers = 0.25 * corners.sum(axis=1)
    return centers, grads, norms


def critical_point_scan(mesh, field: ScalarField, tol=DEFAULT_TOL) -> dict:
    """Flag elements where |grad field| falls below the critical threshold."""
    _, _, norms = gradient_field(mesh, field)
    rng = float(field.values.max() - field.values.min())
    diam = mesh.diameter()
    threshold = tol.tol_crit_rel * (rng / diam if diam > 0 else 1.0)
    flagged = np.where(norms < threshold)[0]
    return {"has_critical_points": bool(len(flagged)),
            "min_grad": float(norms.min()) if len(norms) else 0.0,
            "threshold": threshold,
            "flagged_elements": flagged}


def self_adjointness_gap(stiffness: WeightedStiffness, trials: int = 5,
                         seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    nrm = stiffness.norm()
    for _ in range(trials):
        u = rng.standard_normal(stiffness.n_nodes)
        v = rng.standard_normal(stiffness.n_nodes)
        worst = max(worst, abs(u @ (stiffness.A @ v) - v @ (stiffness.A @ u))
                    / (nrm * np.linalg.norm(u) * np.linalg.norm(v)))
    return worst
