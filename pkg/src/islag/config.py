"""Centralized tolerance and resolution defaults.

Every tolerance used by the library lives here so that a run can override
any of them from a single record (the CLI exposes ``--override key=value``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace


@dataclass(frozen=True)
class Tolerances:
    # Lagrangian quality
    tol_lag: float = 1e-10          # omega residual, analytic descriptions
    tol_lag_graph: float = 1e-8     # omega residual, graph-over-reference kind
    tol_lag_mesh: float = 1e-6      # discrete face omega area, per face-area scale
    tol_bc: float = 1e-9            # distance of boundary nodes to their Lagrangian
    delta_phase: float = 0.05       # |theta| > pi/2 - delta_phase flags near-degeneracy

    # intersections / transversality
    tol_transverse: float = 1e-6    # smallest principal angle for "transverse"
    tol_intersect: float = 1e-11    # Newton convergence for intersection points

    # elliptic solver
    tol_solve: float = 1e-12        # relative residual of reduced linear systems
    kernel_rel_cut: float = 1e-10   # singular values below cut*||A|| count as kernel
    tol_crit_rel: float = 1e-6      # |grad| threshold: rel * range / diameter

    # ISL solver
    tol_isl: float = 1e-9           # algebraic (weak) residual on accepted cylinders
    tol_newton: float = 1e-11       # Newton convergence target
    max_newton_iter: int = 24
    max_backtracks: int = 8
    chart_radius_rel: float = 0.75  # chart overflow guard, rel. to local feature size
    min_step: float = 1e-4          # continuation step floor under halving
    end_threshold: float = 0.05     # diameter fraction triggering end handoff
    end_s_max: float = 0.5
    tol_euler: float = 1e-3         # Euler tangency margin, radians
    tol_hess: float = 0.1           # cone-Hessian floor, x field curvature scale

    # transforms
    tol_compat: float = 1e-6        # |sigma(Phi(p,t,s)) - t| after harmonize
    tol_horiz: float = 1e-4         # geodesic horizontality residual scale
    tol_geo: float = 1e-4           # geodesic Hamiltonian residual scale

    # integrators
    flow_steps: int = 64            # RK4 steps for cutoff Hamiltonian flows
    fd_step: float = 1e-6           # central differences for flow gradients

    def overridden(self, **kw) -> "Tolerances":
        return replace(self, **kw)


@dataclass(frozen=True)
class Resolution:
    """Mesh and time resolutions. Minimums: M >= 16, K >= 8, T >= 8."""

    M: int = 64     # nodes around S^1
    K: int = 32     # t-levels on cylinders
    T: int = 32     # geodesic time steps
    levels: int = 8  # interior Hamiltonian levels for the transform

    def __post_init__(self):
        if self.M < 16 or self.K < 8 or self.T < 8:
            raise ValueError("resolution below minimum (M>=16, K>=8, T>=8)")

    def doubled(self) -> "Resolution":
        return Resolution(2 * self.M, 2 * self.K, 2 * self.T, self.levels)


DEFAULT_TOL = Tolerances()
DEFAULT_RES = Resolution()


def tolerances_from_dict(d: dict) -> Tolerances:
    known = {f.name for f in fields(Tolerances)}
    bad = set(d) - known
    if bad:
        raise KeyError(f"unknown tolerance keys: {sorted(bad)}")
    return Tolerances(**d)
