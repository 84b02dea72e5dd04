"""Artifact serialization: JSON manifests, CSV tables, deterministic SVG.

CSV uses RFC-4180 quoting (the csv module's minimal quoting with CRLF
records); SVG output is fixed-canvas, fixed-palette and timestamp-free so
repeated runs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
import os
from typing import List, Optional, Sequence

import numpy as np

from .ambient import AmbientStructure
from .grids import CylGrid, DiskGrid, SegmentGrid
from .mesh import CylinderMesh, SegmentMesh


# ------------------------------------------------------------------- CSV

def _grid_indices(grid):
    if isinstance(grid, CylGrid):
        i = np.arange(grid.n_nodes) % grid.M
        j = np.arange(grid.n_nodes) // grid.M
        return np.stack([i, j], axis=1), ["angular_index", "level_index"]
    if isinstance(grid, DiskGrid):
        ids = np.arange(grid.n_nodes)
        ring = np.zeros(grid.n_nodes, dtype=int)
        ang = np.zeros(grid.n_nodes, dtype=int)
        for j in range(1, grid.R + 1):
            sel = grid.ring_nodes(j)
            ring[sel] = j
            ang[sel] = np.arange(grid.M)
        return np.stack([ang, ring], axis=1), ["angular_index", "ring_index"]
    if isinstance(grid, SegmentGrid):
        return np.arange(grid.n_nodes)[:, None], ["node_index"]
    raise TypeError(f"unsupported grid {type(grid).__name__}")


def write_points_csv(path: str, grid, points: np.ndarray):
    idx, names = _grid_indices(grid)
    n = points.shape[1]
    header = names + [f"{c}{k+1}" for k in range(n) for c in ("x", "y")]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)  # RFC-4180: CRLF records, minimal quoting
        w.writerow(header)
        for r in range(len(points)):
            row = [int(v) for v in idx[r]]
            for k in range(n):
                row += [repr(float(points[r, k].real)),
                        repr(float(points[r, k].imag))]
            w.writerow(row)


def read_points_csv(path: str):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header = rows[0]
    n = sum(1 for h in header if h.startswith("x"))
    k0 = len(header) - 2 * n
    data = np.array([[float(v) for v in r[k0:]] for r in rows[1:]])
    idx = np.array([[int(float(v)) for v in r[:k0]] for r in rows[1:]])
    pts = data[:, 0::2] + 1j * data[:, 1::2]
    return idx, pts


def write_field_csv(path: str, grid, values: np.ndarray, name: str = "value"):
    idx, names = _grid_indices(grid)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(names + [name])
        for r in range(len(values)):
            w.writerow([int(v) for v in idx[r]] + [repr(float(values[r]))])


def read_field_csv(path: str) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return np.array([float(r[-1]) for r in rows[1:]])


def write_stiffness_coo(path: str, A):
    coo = A.tocoo()
    with open(path, "w", newline="") as f:
        for i, j, v in zip(coo.row, coo.col, coo.data):
            f.write(f"{i} {j} {v!r}\r\n")


# ------------------------------------------------------------- grid JSON

def grid_to_json(grid) -> dict:
    if isinstance(grid, CylGrid):
        return {"type": "cylinder", "M": grid.M, "K": grid.K}
    if isinstance(grid, DiskGrid):
        return {"type": "disk", "M": grid.M, "R": grid.R,
                "radii": [float(r) for r in grid.radii]}
    if isinstance(grid, SegmentGrid):
        return {"type": "segment", "N": grid.N}
    raise TypeError(type(grid).__name__)


def grid_from_json(d: dict):
    t = d["type"]
    if t == "cylinder":
        return CylGrid(d["M"], d["K"])
    if t == "disk":
        return DiskGrid(d["M"], d["R"], np.asarray(d["radii"]))
    if t == "segment":
        return SegmentGrid(d["N"])
    raise ValueError(t)


# ------------------------------------------------------ geodesic path IO

def save_geodesic(outdir: str, name: str, path_obj) -> dict:
    os.makedirs(outdir, exist_ok=True)
    files = []
    for k in range(path_obj.T + 1):
        fn = f"{name}_t{k:03d}.csv"
        write_points_csv(os.path.join(outdir, fn), path_obj.grid,
                         path_obj.points[k])
        files.append(fn)
    hfn = f"{name}_hamiltonian.csv"
    write_field_csv(os.path.join(outdir, hfn), path_obj.grid, path_obj.h,
                    "hamiltonian")
    manifest = {
        "kind": "geodesic_path",
        "grid": grid_to_json(path_obj.grid),
        "times": [float(t) for t in path_obj.times],
        "ambient": path_obj.ambient.to_json(),
        "orientation": path_obj.orientation,
        "hamiltonian_csv": hfn,
        "mesh_csv": files,
        "cone_images": [[float(c.real) for c in q] + [float(c.imag) for c in q]
                        for q in path_obj.cone_images],
        "cone_params": [[float(v) for v in x] for x in path_obj.cone_params],
    }
    with open(os.path.join(outdir, f"{name}_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def load_geodesic(outdir: str, name: str):
    from .transform import GeodesicPath
    with open(os.path.join(outdir, f"{name}_manifest.json")) as f:
        man = json.load(f)
    grid = grid_from_json(man["grid"])
    ambient = AmbientStructure.from_json(man["ambient"])
    pts = []
    for fn in man["mesh_csv"]:
        _, p = read_points_csv(os.path.join(outdir, fn))
        pts.append(p)
    h = read_field_csv(os.path.join(outdir, man["hamiltonian_csv"]))
    n = ambient.n
    cones = [np.array(q[:n]) + 1j * np.array(q[n:])
             for q in man.get("cone_images", [])]
    return GeodesicPath(grid, np.asarray(man["times"]), np.stack(pts), h,
                        ambient, [np.asarray(x) for x in man.get("cone_params", [])],
                        cones, man.get("orientation", 1))


def save_family(outdir: str, name: str, cylinders, reports=None,
                regularity=None, anchor: int = 0) -> dict:
    os.makedirs(outdir, exist_ok=True)
    files = []
    for k, cyl in enumerate(cylinders):
        fn = f"{name}_cyl{k:03d}.csv"
        write_points_csv(os.path.join(outdir, fn), cyl.mesh.grid,
                         cyl.mesh.points)
        files.append(fn)
    manifest = {
        "kind": "cylinder_family",
        "anchor_station": anchor,
        "flux_coordinates": [float(c.flux_coordinate) for c in cylinders],
        "residual_weak": [float(c.residual_norm) for c in cylinders],
        "residual_strong": [float(c.truncation_norm) for c in cylinders],
        "mesh_csv": files,
        "ambient": cylinders[0].mesh.ambient.to_json(),
        "grid": grid_to_json(cylinders[0].mesh.grid),
        "invariants": reports or [],
        "regularity": regularity or {},
    }
    with open(os.path.join(outdir, f"{name}_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True, default=float)
    return manifest


def load_family(outdir: str, name: str):
    from .slc import make_isl
    with open(os.path.join(outdir, f"{name}_manifest.json")) as f:
        man = json.load(f)
    grid = grid_from_json(man["grid"])
    ambient = AmbientStructure.from_json(man["ambient"])
    cyls = []
    for fn, flux in zip(man["mesh_csv"], man["flux_coordinates"]):
        _, pts = read_points_csv(os.path.join(outdir, fn))
        cls = SegmentMesh if isinstance(grid, SegmentGrid) else CylinderMesh
        cyl = make_isl(cls(grid, pts, ambient))
        cyl.flux_coordinate = flux
        cyls.append(cyl)
    return cyls, man


# ------------------------------------------------------------------- SVG

_PALETTE = ["#1b5e9f", "#c23b22", "#2e7d32", "#7b1fa2", "#ef6c00",
            "#00695c", "#5d4037", "#455a64"]
_CANVAS = (800, 600)


def _svg_header(title: str) -> List[str]:
    w, h = _CANVAS
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
            f'viewBox="0 0 {w} {h}">',
            f'<title>{title}</title>',
            f'<rect width="{w}" height="{h}" fill="#ffffff"/>']


def _fit(points2d: np.ndarray, pad: float = 40.0):
    w, h = _CANVAS
    if len(points2d) == 0:
        return lambda xy: (pad, pad)
    lo = points2d.min(axis=0)
    hi = points2d.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    s = min((w - 2 * pad) / span[0], (h - 2 * pad) / span[1])
    mid = 0.5 * (lo + hi)

    def to_px(xy):
        x = (xy[0] - mid[0]) * s + w / 2
        y = h / 2 - (xy[1] - mid[1]) * s
        return x, y

    return to_px


def _polyline(to_px, pts2d, color, width=1.2, closed=False) -> str:
    cmds = " ".join(f"{to_px(p)[0]:.3f},{to_px(p)[1]:.3f}" for p in pts2d)
    tag = "polygon" if closed else "polyline"
    return (f'<{tag} points="{cmds}" fill="none" stroke="{color}" '
            f'stroke-width="{width}"/>')


def _project(points: np.ndarray) -> np.ndarray:
    """Fixed projection to the drawing plane: (Re z1, Im z1)."""
    return np.stack([points[:, 0].real, points[:, 0].imag], axis=1)


def render_slices_svg(path_obj, filename: str, every: int = 4):
    """Profile slices of the Lagrangian family: the angular-index-0 line of
    each t-level, drawn in the (Re z1, Im z1) plane."""
    grid = path_obj.grid
    if isinstance(grid, SegmentGrid):
        lines = [path_obj.points[k] for k in range(0, path_obj.T + 1, every)]
    elif isinstance(grid, DiskGrid):
        ids = [0] + [grid.node(0, j) for j in range(1, grid.R + 1)]
        lines = [path_obj.points[k][ids] for k in range(0, path_obj.T + 1, every)]
    else:
        ids = [grid.node(0, j) for j in range(grid.K + 1)]
        lines = [path_obj.points[k][ids] for k in range(0, path_obj.T + 1, every)]
    allpts = np.concatenate([_project(l) for l in lines])
    to_px = _fit(allpts)
    parts = _svg_header("Lagrangian family slices")
    for i, l in enumerate(lines):
        parts.append(_polyline(to_px, _project(l), _PALETTE[i % len(_PALETTE)]))
    parts.append('<text x="12" y="20" font-family="monospace" font-size="13">'
                 'slices of the Lagrangian family (Re z1, Im z1)</text>')
    parts.append("</svg>")
    with open(filename, "w") as f:
        f.write("\n".join(parts))


def render_fan_svg(cylinders, filename: str):
    """Fan of cylinders: the angular-index-0 t-line of each family member."""
    lines = []
    for cyl in cylinders:
        grid = cyl.mesh.grid
        if isinstance(grid, SegmentGrid):
            lines.append(cyl.mesh.points)
        else:
            ids = [grid.node(0, j) for j in range(grid.K + 1)]
            lines.append(cyl.mesh.points[ids])
    parts = _svg_header("cylinder fan")
    if lines:
        allpts = np.concatenate([_project(l) for l in lines])
        to_px = _fit(allpts)
        for i, l in enumerate(lines):
            parts.append(_polyline(to_px, _project(l),
                                   _PALETTE[i % len(_PALETTE)]))
    parts.append('<text x="12" y="20" font-family="monospace" font-size="13">'
                 'special Lagrangian cylinder fan (Re z1, Im z1)</text>')
    parts.append("</svg>")
    with open(filename, "w") as f:
        f.write("\n".join(parts))
