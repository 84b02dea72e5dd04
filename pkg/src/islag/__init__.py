"""Imaginary special Lagrangian cylinders and geodesics of positive
Lagrangians in flat Calabi-Yau space, at desk scale.

The library splits into: ambient structure kernels (`ambient`), boundary
Lagrangians (`lagrangian`), the weighted Laplacian on cylinder meshes
(`elliptic`), the special Lagrangian cylinder solver and continuation
(`slc`), the geodesic layer and the transforms between geodesics and
cylinder families (`transform`), fixtures (`fixtures`), serialization
(`io`) and the batch CLI (`cli`).
"""

from .ambient import (AmbientStructure, CutoffFlow, Density,
                      OrientedLagrangianPlane, apply_cutoff_flow, phase_of,
                      pullback_form, rho_at)
from .config import Resolution, Tolerances
from .elliptic import (ScalarField, WeightedStiffness, assemble,
                       critical_point_scan, fundamental_harmonic,
                       gradient_field, kernel_report, solve_dirichlet)
from .lagrangian import (BoundaryLagrangian, LinearSubspace, PotentialGraph,
                         ProfileOrbit, TubularChart, intersection_points,
                         perturb_graph, positivity_report, profile_sphere)
from .mesh import CylinderMesh, LagrangianMesh, SegmentMesh
from .slc import (IslCylinder, WeinsteinChart, chart_embed,
                  classify_regularity, continue_family, end_rescale_solve,
                  euler_tangency_check, newton_correct, solve_cylinder,
                  special_residual, tangent_direction)
from .transform import (FamilyParameterization, GeodesicPath,
                        cone_hessian_check, forward_transform, geodesic_ivp,
                        geodesic_residual, harmonize, inverse_transform,
                        perturb_and_resolve, polar_level_chart, relative_flux)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
