"""Structured parameter grids and grid-level numerics.

Three grid shapes cover every object in the library:

* ``CylGrid``: S^1 x [0,1] with M nodes around and K+1 levels; quadrilateral
  elements; boundary circles C0 (level 0) and C1 (level K).
* ``DiskGrid``: polar grid with a center node, R rings of M nodes; triangle
  fan at the center plus ring quads. Used for Lagrangian patches and for the
  reconstructed geodesics (rings = family stations, center = cone point).
* ``SegmentGrid``: 1d chain of N+1 nodes, the degenerate mode.

The grid owns connectivity only; embeddings live on mesh objects. Level-set
extraction (marching on the triangulated grid) and stencil-free nodal
derivatives (local quadratic least squares on the two-ring) are provided
here because they depend only on connectivity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np


class _GridBase:
    n_nodes: int

    def triangles(self) -> np.ndarray:
        raise NotImplementedError

    def two_ring(self) -> List[np.ndarray]:
        """Per-node array of neighbor ids within two edges (excl. the node)."""
        tris = self.triangles()
        one: List[set] = [set() for _ in range(self.n_nodes)]
        for a, b, c in tris:
            one[a].update((b, c)); one[b].update((a, c)); one[c].update((a, b))
        rings = []
        for i in range(self.n_nodes):
            acc = set(one[i])
            for j in tuple(acc):
                acc.update(one[j])
            acc.discard(i)
            rings.append(np.fromiter(sorted(acc), dtype=int))
        return rings


@dataclass
class CylGrid(_GridBase):
    M: int
    K: int

    def __post_init__(self):
        self.n_nodes = self.M * (self.K + 1)

    def node(self, i: int, j: int) -> int:
        return j * self.M + (i % self.M)

    def level_nodes(self, j: int) -> np.ndarray:
        return np.arange(j * self.M, (j + 1) * self.M)

    @property
    def c0_nodes(self) -> np.ndarray:
        return self.level_nodes(0)

    @property
    def c1_nodes(self) -> np.ndarray:
        return self.level_nodes(self.K)

    @property
    def boundary_nodes(self) -> np.ndarray:
        return np.concatenate([self.c0_nodes, self.c1_nodes])

    @property
    def interior_nodes(self) -> np.ndarray:
        return np.arange(self.M, self.M * self.K)

    def params(self) -> Tuple[np.ndarray, np.ndarray]:
        """Angular and axial parameter values per node."""
        i = np.arange(self.n_nodes) % self.M
        j = np.arange(self.n_nodes) // self.M
        return 2.0 * math.pi * i / self.M, j / self.K

    def quads(self) -> np.ndarray:
        """(F, 4) corner ids in (i,j), (i+1,j), (i+1,j+1), (i,j+1) order."""
        faces = []
        for j in range(self.K):
            for i in range(self.M):
                faces.append([self.node(i, j), self.node(i + 1, j),
                              self.node(i + 1, j + 1), self.node(i, j + 1)])
        return np.asarray(faces, dtype=int)

    def triangles(self) -> np.ndarray:
        q = self.quads()
        return np.concatenate([q[:, [0, 1, 2]], q[:, [0, 2, 3]]], axis=0)


@dataclass
class DiskGrid(_GridBase):
    M: int
    R: int
    radii: Optional[np.ndarray] = None  # ring radii, default uniform (0, 1]

    def __post_init__(self):
        self.n_nodes = 1 + self.M * self.R
        if self.radii is None:
            self.radii = np.arange(1, self.R + 1) / self.R
        else:
            self.radii = np.asarray(self.radii, dtype=float)
            if len(self.radii) != self.R:
                raise ValueError("radii length must equal R")

    def node(self, i: int, j: int) -> int:
        """Ring j in 1..R, angular index i (wraps); j = 0 is the center."""
        if j == 0:
            return 0
        return 1 + (j - 1) * self.M + (i % self.M)

    def ring_nodes(self, j: int) -> np.ndarray:
        if j == 0:
            return np.array([0])
        return 1 + (j - 1) * self.M + np.arange(self.M)

    @property
    def rim_nodes(self) -> np.ndarray:
        return self.ring_nodes(self.R)

    def params(self) -> Tuple[np.ndarray, np.ndarray]:
        """(radius, angle) per node; the center gets radius 0, angle 0."""
        r = np.zeros(self.n_nodes)
        a = np.zeros(self.n_nodes)
        for j in range(1, self.R + 1):
            ids = self.ring_nodes(j)
            r[ids] = self.radii[j - 1]
            a[ids] = 2.0 * math.pi * np.arange(self.M) / self.M
        return r, a

    def xy(self) -> np.ndarray:
        r, a = self.params()
        return np.stack([r * np.cos(a), r * np.sin(a)], axis=-1)

    def triangles(self) -> np.ndarray:
        tris = []
        for i in range(self.M):
            tris.append([0, self.node(i, 1), self.node(i + 1, 1)])
        for j in range(1, self.R):
            for i in range(self.M):
                a = self.node(i, j); b = self.node(i + 1, j)
                c = self.node(i + 1, j + 1); d = self.node(i, j + 1)
                tris.append([a, b, c]); tris.append([a, c, d])
        return np.asarray(tris, dtype=int)


@dataclass
class SegmentGrid(_GridBase):
    N: int  # elements; N+1 nodes

    def __post_init__(self):
        self.n_nodes = self.N + 1

    def params(self) -> np.ndarray:
        return np.arange(self.N + 1) / self.N

    def triangles(self) -> np.ndarray:  # pragma: no cover - not meaningful in 1d
        return np.zeros((0, 3), dtype=int)

    def two_ring(self) -> List[np.ndarray]:
        rings = []
        for i in range(self.n_nodes):
            ids = [j for j in (i - 2, i - 1, i + 1, i + 2) if 0 <= j <= self.N]
            rings.append(np.asarray(ids, dtype=int))
        return rings


# ------------------------------------------------------- nodal derivatives

def fit_quadratic(grid: _GridBase, coords: np.ndarray, values: np.ndarray,
                  rings: Optional[List[np.ndarray]] = None):
    """Per-node local quadratic least-squares fit of nodal values.

    ``coords`` gives 2d chart coordinates per node (e.g. the flat parameter
    chart of a disk grid, or tangent-plane projections). Returns per-node
    gradient (N, 2) and Hessian entries (N, 3) as (vxx, vxy, vyy).
    """
    if rings is None:
        rings = grid.two_ring()
    N = grid.n_nodes
    grad = np.zeros((N, 2))
    hess = np.zeros((N, 3))
    for i in range(N):
        nb = rings[i]
        y = coords[nb] - coords[i]
        dv = values[nb] - values[i]
        A = np.column_stack([y[:, 0], y[:, 1],
                             0.5 * y[:, 0] ** 2, y[:, 0] * y[:, 1],
                             0.5 * y[:, 1] ** 2])
        sol, *_ = np.linalg.lstsq(A, dv, rcond=None)
        grad[i] = sol[:2]
        hess[i] = sol[2:] if len(sol) >= 5 else 0.0
    return grad, hess


# 4th-order one-sided difference rows (5-point) and the interior central row
_D4_FORWARD = np.array([-25.0 / 12.0, 4.0, -3.0, 4.0 / 3.0, -0.25])
_D4_SEMI = np.array([-0.25, -5.0 / 6.0, 1.5, -0.5, 1.0 / 12.0])


def _axis_derivative(arr: np.ndarray, h: float, periodic: bool) -> np.ndarray:
    """4th-order derivative along axis 0 (uniform spacing h)."""
    n = arr.shape[0]
    if periodic:
        return (-np.roll(arr, -2, axis=0) + 8 * np.roll(arr, -1, axis=0)
                - 8 * np.roll(arr, 1, axis=0) + np.roll(arr, 2, axis=0)) / (12 * h)
    if n < 5:
        return np.gradient(arr, h, axis=0, edge_order=2)
    out = np.empty_like(arr)
    out[2:-2] = (-arr[4:] + 8 * arr[3:-1] - 8 * arr[1:-3] + arr[:-4]) / (12 * h)
    out[0] = np.tensordot(_D4_FORWARD, arr[:5], axes=(0, 0)) / h
    out[1] = np.tensordot(_D4_SEMI, arr[:5], axes=(0, 0)) / h
    out[-1] = -np.tensordot(_D4_FORWARD, arr[-5:][::-1], axes=(0, 0)) / h
    out[-2] = -np.tensordot(_D4_SEMI, arr[-5:][::-1], axes=(0, 0)) / h
    return out


def cyl_gradient(grid: "CylGrid", points: np.ndarray, values: np.ndarray):
    """Surface gradient of a nodal scalar on a cylinder grid.

    Tensorized 4th-order finite differences in the (angular, axial)
    parameters, converted to ambient vectors through the pullback metric of
    the same stencils. Immune to grid anisotropy.
    """
    M, K = grid.M, grid.K
    n = points.shape[1]
    P = points.reshape(K + 1, M, n)
    U = np.asarray(values, float).reshape(K + 1, M)
    hp = 2.0 * math.pi / M
    ht = 1.0 / K
    tau_p = np.moveaxis(_axis_derivative(np.moveaxis(P, 1, 0), hp, True), 0, 1)
    tau_t = _axis_derivative(P, ht, False)
    du_p = np.moveaxis(_axis_derivative(np.moveaxis(U, 1, 0), hp, True), 0, 1)
    du_t = _axis_derivative(U, ht, False)
    g11 = np.real(np.sum(np.conj(tau_p) * tau_p, axis=-1))
    g12 = np.real(np.sum(np.conj(tau_p) * tau_t, axis=-1))
    g22 = np.real(np.sum(np.conj(tau_t) * tau_t, axis=-1))
    det = g11 * g22 - g12 ** 2
    c1 = (g22 * du_p - g12 * du_t) / det
    c2 = (-g12 * du_p + g11 * du_t) / det
    grad = c1[..., None] * tau_p + c2[..., None] * tau_t
    return grad.reshape(-1, n)


def segment_gradient(grid: "SegmentGrid", points: np.ndarray, values: np.ndarray):
    """Surface gradient on a 1d segment mesh (4th-order in parameter)."""
    h = 1.0 / grid.N
    z_t = _axis_derivative(points, h, False)
    u_t = _axis_derivative(np.asarray(values, float), h, False)
    g = np.real(np.sum(np.conj(z_t) * z_t, axis=-1))
    return (u_t / g)[..., None] * z_t


class _DiskFit:
    """Cached, padded least-squares structure for disk chart fits."""

    def __init__(self, grid: "DiskGrid"):
        rings = grid.two_ring()
        xy = grid.xy()
        N = grid.n_nodes
        deg = max(len(r) for r in rings)
        self.nbrs = np.zeros((N, deg), dtype=int)
        mask = np.zeros((N, deg))
        for i, r in enumerate(rings):
            self.nbrs[i, :len(r)] = r
            mask[i, :len(r)] = 1.0
        d = (xy[self.nbrs] - xy[:, None, :]) * mask[:, :, None]
        self.A = np.stack([d[..., 0], d[..., 1], 0.5 * d[..., 0] ** 2,
                           d[..., 0] * d[..., 1], 0.5 * d[..., 1] ** 2], axis=-1)
        self.mask = mask
        # pseudo-inverse per node of the padded design matrix
        AtA = np.einsum("npk,npl->nkl", self.A, self.A)
        self.solve = np.linalg.inv(AtA)
        self.rings = rings

    def fit(self, nodal: np.ndarray) -> np.ndarray:
        """Leading coefficients (N, 5, m) of local quadratic fits of nodal
        data with shape (N, m)."""
        dv = (nodal[self.nbrs] - nodal[:, None, :]) * self.mask[:, :, None]
        Atb = np.einsum("npk,npm->nkm", self.A, dv)
        return np.einsum("nkl,nlm->nkm", self.solve, Atb)


def disk_fit(grid: "DiskGrid") -> _DiskFit:
    if not hasattr(grid, "_fit_cache"):
        grid._fit_cache = _DiskFit(grid)
    return grid._fit_cache


def disk_gradient_frames(grid: "DiskGrid", points: np.ndarray, values=None):
    """Surface gradient and chart frames on a disk grid, vectorized.

    The flat xy parameter chart of the disk is isotropic, so per-node
    quadratic least squares of the embedding (and optionally a scalar) is
    well conditioned, including at the pole. Returns (frames, grad) where
    frames = d(points)/d(xy) as (N, 2, n) complex and grad is the ambient
    metric gradient of the scalar (or None).
    """
    fit = disk_fit(grid)
    N, n = points.shape
    preal = points.view(float).reshape(N, 2 * n)
    data = preal if values is None else np.concatenate(
        [preal, np.asarray(values, float)[:, None]], axis=1)
    sol = fit.fit(data)                       # (N, 5, m)
    Jr = sol[:, :2, :2 * n]                   # (N, 2, 2n) real embedding frame
    frames = Jr[..., 0::2] + 1j * Jr[..., 1::2]
    if values is None:
        return frames, None
    gu = sol[:, :2, 2 * n]                    # (N, 2) parameter gradient
    G = np.einsum("nij,nkj->nik", Jr, Jr)
    c = np.linalg.solve(G, gu[..., None])[..., 0]
    grad = np.einsum("nk,nkj->nj", c, frames)
    return frames, grad


def disk_gradient(grid: "DiskGrid", points: np.ndarray, values: np.ndarray,
                  rings: Optional[List[np.ndarray]] = None):
    _, grad = disk_gradient_frames(grid, points, np.asarray(values, float))
    return grad


def surface_gradient(mesh_grid, points: np.ndarray, values: np.ndarray,
                     rings=None) -> np.ndarray:
    """Dispatch surface gradient by grid type."""
    if isinstance(mesh_grid, CylGrid):
        return cyl_gradient(mesh_grid, points, values)
    if isinstance(mesh_grid, SegmentGrid):
        return segment_gradient(mesh_grid, points, values)
    if isinstance(mesh_grid, DiskGrid):
        return disk_gradient(mesh_grid, points, values, rings)
    raise TypeError(f"unsupported grid {type(mesh_grid).__name__}")


def _stencil_rows(n: int, h: float, periodic: bool):
    """Row (offsets, weights) pairs of the 4th-order derivative stencils."""
    rows = []
    if periodic:
        offs = np.array([-2, -1, 1, 2])
        wts = np.array([1.0, -8.0, 8.0, -1.0]) / (12 * h)
        for i in range(n):
            rows.append(((i + offs) % n, wts))
        return rows
    central = (np.array([-2, -1, 1, 2]), np.array([1.0, -8.0, 8.0, -1.0]) / (12 * h))
    fwd = (np.arange(5), _D4_FORWARD / h)
    semi = (np.arange(-1, 4), _D4_SEMI / h)
    for i in range(n):
        if 2 <= i <= n - 3:
            rows.append((i + central[0], central[1]))
        elif i == 0:
            rows.append((fwd[0], fwd[1]))
        elif i == 1:
            rows.append((1 + semi[0], semi[1]))
        elif i == n - 1:
            rows.append((n - 1 - fwd[0], -fwd[1]))
        else:
            rows.append((n - 2 - semi[0], -semi[1]))
    return rows


def fd_matrices(grid):
    """Sparse nodal derivative operators along the grid axes.

    CylGrid: (S_p, S_t) with S_p periodic 4th order in the angle and S_t
    one-sided 4th order in the axial parameter. SegmentGrid: (S_t,).
    """
    import scipy.sparse as sp

    if isinstance(grid, SegmentGrid):
        rows = _stencil_rows(grid.n_nodes, 1.0 / grid.N, False)
        data, ii, jj = [], [], []
        for i, (cols, wts) in enumerate(rows):
            ii.extend([i] * len(cols)); jj.extend(cols); data.extend(wts)
        return (sp.coo_matrix((data, (ii, jj)),
                              shape=(grid.n_nodes,) * 2).tocsr(),)
    if not isinstance(grid, CylGrid):
        raise TypeError("fd_matrices supports CylGrid and SegmentGrid")
    M, K = grid.M, grid.K
    hp = 2.0 * math.pi / M
    ht = 1.0 / K
    prow = _stencil_rows(M, hp, True)
    trow = _stencil_rows(K + 1, ht, False)
    data, ii, jj = [], [], []
    for j in range(K + 1):
        for i in range(M):
            node = j * M + i
            cols, wts = prow[i]
            ii.extend([node] * len(cols)); jj.extend(j * M + cols); data.extend(wts)
    Sp = sp.coo_matrix((data, (ii, jj)), shape=(grid.n_nodes,) * 2).tocsr()
    data, ii, jj = [], [], []
    for j in range(K + 1):
        cols, wts = trow[j]
        for i in range(M):
            node = j * M + i
            ii.extend([node] * len(cols)); jj.extend(cols * M + i); data.extend(wts)
    St = sp.coo_matrix((data, (ii, jj)), shape=(grid.n_nodes,) * 2).tocsr()
    return Sp, St


# --------------------------------------------------------- level marching

@dataclass
class LevelLoop:
    """A closed polyline on grid edges: point_k = (1-w_k) P[a_k] + w_k P[b_k]."""

    nodes_a: np.ndarray
    nodes_b: np.ndarray
    weights: np.ndarray
    closed: bool

    def interpolate(self, nodal: np.ndarray) -> np.ndarray:
        w = self.weights.reshape(self.weights.shape + (1,) * (nodal.ndim - 1))
        return (1.0 - w) * nodal[self.nodes_a] + w * nodal[self.nodes_b]

    def __len__(self):
        return len(self.weights)


def level_loops(grid: _GridBase, values: np.ndarray, c: float,
                min_len: int = 4) -> List[LevelLoop]:
    """March the level set {values = c} through the triangulated grid.

    Returns the closed loops found, longest first. Open chains (level sets
    leaving the grid) are dropped: the transform only consumes compact level
    circles.
    """
    tris = grid.triangles()
    v = np.asarray(values, dtype=float)
    side = v > c
    cross = side[tris[:, 0]].astype(int) + side[tris[:, 1]] + side[tris[:, 2]]
    active = np.where((cross == 1) | (cross == 2))[0]

    def edge_key(a, b):
        return (a, b) if a < b else (b, a)

    # segment per active triangle joining its two crossing edges
    seg_edges = {}
    adjacency = {}
    for t in active:
        a, b, cc = tris[t]
        edges = []
        for (p, q) in ((a, b), (b, cc), (a, cc)):
            if side[p] != side[q]:
                edges.append(edge_key(p, q))
        if len(edges) != 2:
            continue
        seg_edges[t] = edges
        for e in edges:
            adjacency.setdefault(e, []).append(t)

    loops = []
    seen_tris = set()
    for t0 in seg_edges:
        if t0 in seen_tris:
            continue
        chain = [seg_edges[t0][0], seg_edges[t0][1]]
        seen_tris.add(t0)
        closed = False
        # extend forward from the last edge
        while True:
            e = chain[-1]
            nxt = [t for t in adjacency.get(e, []) if t not in seen_tris]
            if not nxt:
                closed = chain[-1] == chain[0] or any(
                    t in adjacency.get(chain[0], []) and t in adjacency.get(chain[-1], [])
                    for t in adjacency.get(e, []))
                # proper closure: last edge shares a triangle with first edge
                shared = set(adjacency.get(chain[0], [])) & set(adjacency.get(chain[-1], []))
                closed = any(s in seen_tris for s in shared) and len(chain) > 2
                break
            t = nxt[0]
            seen_tris.add(t)
            e1, e2 = seg_edges[t]
            chain.append(e2 if e1 == e else e1)
        if not closed or len(chain) < min_len:
            continue
        na = np.array([e[0] for e in chain])
        nb = np.array([e[1] for e in chain])
        denom = v[nb] - v[na]
        w = np.where(np.abs(denom) > 0, (c - v[na]) / np.where(denom == 0, 1, denom), 0.5)
        loops.append(LevelLoop(na, nb, np.clip(w, 0.0, 1.0), True))
    loops.sort(key=len, reverse=True)
    return loops


@dataclass
class LoopSampling:
    """Uniform-in-arclength resampling of a LevelLoop to S points.

    Every sample is a sparse convex combination of up to four grid nodes, so
    any nodal array can be interpolated consistently across time levels.
    """

    node_ids: np.ndarray   # (S, 4)
    weights: np.ndarray    # (S, 4)

    def interpolate(self, nodal: np.ndarray) -> np.ndarray:
        w = self.weights.reshape(self.weights.shape + (1,) * (nodal.ndim - 1))
        return np.sum(w * nodal[self.node_ids], axis=1)

    def smoothed(self, kernel=(0.25, 0.5, 0.25)) -> "LoopSampling":
        """Cyclic low-pass of the sampling (binomial kernel by default).

        Marching interpolation leaves grid-frequency kinks in extracted
        loops; smoothing the sampling weights attenuates them at the same
        O(h^2) order as the marching error itself, keeping every sample a
        convex combination of grid nodes.
        """
        S = len(self)
        half = len(kernel) // 2
        ids = []
        wts = []
        for k in range(S):
            acc = {}
            for j, kv in enumerate(kernel):
                row = (k + j - half) % S
                for node, wv in zip(self.node_ids[row], self.weights[row]):
                    if wv != 0.0:
                        acc[node] = acc.get(node, 0.0) + kv * wv
            ids.append(list(acc.keys()))
            wts.append(list(acc.values()))
        width = max(len(r) for r in ids)
        node_ids = np.zeros((S, width), dtype=int)
        weights = np.zeros((S, width))
        for k in range(S):
            node_ids[k, :len(ids[k])] = ids[k]
            weights[k, :len(wts[k])] = wts[k]
        return LoopSampling(node_ids, weights)

    def __len__(self):
        return self.node_ids.shape[0]


def resample_loop(loop: LevelLoop, positions: np.ndarray, S: int) -> LoopSampling:
    """Resample a loop to S points, uniform in the arclength of ``positions``.

    The loop is oriented to positive (counterclockwise) signed area in the
    first two real coordinates so that extracted cylinders carry a
    deterministic orientation.
    """
    pts = loop.interpolate(positions)
    plane = np.stack([pts[:, 0].real, pts[:, 0].imag if positions.shape[1] == 1
                      else pts[:, 1].real], axis=-1)
    area = 0.5 * np.sum(plane[:, 0] * np.roll(plane[:, 1], -1)
                        - plane[:, 1] * np.roll(plane[:, 0], -1))
    na, nb, w = loop.nodes_a, loop.nodes_b, loop.weights
    if area < 0:
        na, nb, w, pts = na[::-1], nb[::-1], w[::-1], pts[::-1]
    seg = np.abs(np.diff(np.concatenate([pts, pts[:1]]), axis=0))
    seglen = np.sqrt(np.sum(seg ** 2, axis=1))
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    total = cum[-1]
    targets = total * np.arange(S) / S
    k = np.searchsorted(cum, targets, side="right") - 1
    k = np.clip(k, 0, len(seglen) - 1)
    u = (targets - cum[k]) / np.where(seglen[k] == 0, 1.0, seglen[k])
    k2 = (k + 1) % len(w)
    ids = np.stack([na[k], nb[k], na[k2], nb[k2]], axis=1)
    wts = np.stack([(1 - u) * (1 - w[k]), (1 - u) * w[k],
                    u * (1 - w[k2]), u * w[k2]], axis=1)
    return LoopSampling(ids, wts)
