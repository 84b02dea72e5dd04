"""Flat Calabi-Yau ambient structures on open subsets of C^n.

Conventions used throughout the library:

* Points and tangent vectors of C^n are complex ndarrays of shape (..., n).
  The complex structure acts as J v = 1j * v.
* Hermitian pairing <u, v> = sum(conj(u) * v); the symplectic form is
  omega(u, v) = Im<u, v> and the Kaehler metric is g(u, v) = Re<u, v>.
  With these signs omega(e1, i*e1) = 1 and the Hamiltonian field of H is
  X_H = -J grad H, so that i_{X_H} omega = dH.
* The holomorphic volume form is Omega = density(z) dz^1 ^ ... ^ dz^n with a
  nonvanishing holomorphic density (constant, or exp of a polynomial), so
  Omega(v_1, ..., v_n) = density(z) * det[v_1 ... v_n].
* The positive weight relating Omega to Riemannian volume on Lagrangian
  planes satisfies rho^2 omega^n/n! = (-1)^{n(n-1)/2} (i/2)^n Omega ^ conj(Omega);
  in these coordinates rho(z) = |density(z)|.
* Rescaling by s replaces Omega with s^{-n} M_s^* Omega where M_s(z) = s z,
  which amounts to density(z) -> density(s z); omega and J are unchanged.
* An optional cutoff Hamiltonian deformation acts by pullback: all forms are
  evaluated at phi(z) on dphi-pushed frames, and rho becomes rho o phi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .config import DEFAULT_TOL, Tolerances

TWO_PI = 2.0 * math.pi


# ----------------------------------------------------------------- kernels

def hermitian(u, v):
    return np.sum(np.conj(u) * v, axis=-1)


def omega_form(u, v):
    """Standard symplectic form, omega(u, v) = Im<u, v>."""
    return np.imag(hermitian(u, v))


def metric_form(u, v):
    """Kaehler metric, g(u, v) = Re<u, v>."""
    return np.real(hermitian(u, v))


def jmul(v):
    return 1j * np.asarray(v)


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    t = np.mod(np.asarray(theta) + math.pi, TWO_PI) - math.pi
    return np.where(t == -math.pi, math.pi, t) if np.ndim(t) else (
        math.pi if t == -math.pi else float(t))


def frame_volume(frame):
    """Riemannian volume of k real-independent vectors (rows of frame)."""
    fr = np.asarray(frame)
    gram = np.real(fr @ np.conj(fr).T)
    det = np.linalg.det(gram)
    return math.sqrt(max(det, 0.0))


# ----------------------------------------------------------------- density

@dataclass(frozen=True)
class Density:
    """Holomorphic volume density: constant 1 or exp(P(z)) with P polynomial.

    ``terms`` maps exponent tuples to complex coefficients of P. The constant
    kind has no terms and evaluates to exactly 1.0, which keeps the flat
    closed-form code paths exact.
    """

    kind: str = "const"                      # "const" | "exp_poly"
    terms: tuple = ()                        # ((alpha, coeff), ...)

    @staticmethod
    def constant() -> "Density":
        return Density("const", ())

    @staticmethod
    def exp_poly(terms: dict) -> "Density":
        items = tuple(sorted((tuple(int(a) for a in alpha), complex(c))
                             for alpha, c in terms.items()))
        return Density("exp_poly", items)

    @property
    def is_constant(self) -> bool:
        return self.kind == "const"

    def log_at(self, z):
        z = np.asarray(z)
        if self.is_constant:
            return np.zeros(z.shape[:-1], dtype=complex)
        acc = np.zeros(z.shape[:-1], dtype=complex)
        for alpha, c in self.terms:
            term = np.full(z.shape[:-1], c, dtype=complex)
            for j, a in enumerate(alpha):
                if a:
                    term = term * z[..., j] ** a
            acc = acc + term
        return acc

    def at(self, z):
        if self.is_constant:
            z = np.asarray(z)
            return np.ones(z.shape[:-1], dtype=complex)
        return np.exp(self.log_at(z))

    def grad_log_at(self, z):
        """Holomorphic gradient of log density, shape (..., n) complex."""
        z = np.asarray(z)
        out = np.zeros(z.shape, dtype=complex)
        if self.is_constant:
            return out
        for alpha, c in self.terms:
            for j, a in enumerate(alpha):
                if a == 0:
                    continue
                term = np.full(z.shape[:-1], a * c, dtype=complex)
                for k, ak in enumerate(alpha):
                    pw = ak - 1 if k == j else ak
                    if pw:
                        term = term * z[..., k] ** pw
                out[..., j] = out[..., j] + term
        return out

    def affine(self, scale: complex | float, shift) -> "Density":
        """Density of the substituted form z -> shift + scale*z."""
        if self.is_constant:
            return self
        shift = np.asarray(shift, dtype=complex)
        out: dict = {}
        for alpha, c in self.terms:
            # expand prod_j (shift_j + scale*z_j)^alpha_j
            partial = {(): c}
            for j, a in enumerate(alpha):
                nxt: dict = {}
                for k in range(a + 1):
                    w = math.comb(a, k) * (shift[j] ** (a - k)) * (scale ** k)
                    if w == 0:
                        continue
                    for exps, cc in partial.items():
                        key = exps + (k,)
                        nxt[key] = nxt.get(key, 0.0) + cc * w
                partial = nxt
            for exps, cc in partial.items():
                out[exps] = out.get(exps, 0.0) + cc
        out = {a: c for a, c in out.items() if c != 0}
        return Density.exp_poly(out) if out else Density("exp_poly", ())

    def to_json(self) -> dict:
        if self.is_constant:
            return {"type": "const"}
        coeffs = [[list(alpha), c.real, c.imag] for alpha, c in self.terms]
        return {"type": "exp_poly", "coeffs": coeffs}

    @staticmethod
    def from_json(d: dict) -> "Density":
        if d.get("type", "const") == "const":
            return Density.constant()
        return Density.exp_poly({tuple(a): complex(re, im)
                                 for a, re, im in d["coeffs"]})


# ------------------------------------------------------------- cutoff flow

def bump_profile(r, plateau: float, support: float):
    """C^2 quintic cutoff: 1 for r <= plateau, 0 for r >= support."""
    r = np.asarray(r, dtype=float)
    x = np.clip((r - plateau) / (support - plateau), 0.0, 1.0)
    return 1.0 - (10.0 * x**3 - 15.0 * x**4 + 6.0 * x**5)


@dataclass
class CutoffFlow:
    """Time-1 Hamiltonian flow of chi * (h o pi) around a base Lagrangian.

    ``chart`` must provide closest-point data for the base Lagrangian:
    chart.split(z) -> (xi, offsets, foot) with z = foot + sum offsets_i n_i(xi),
    and chart.tube_norm(z) -> |offsets|. ``potential`` is a scalar function of
    the chart parameter xi. The induced map is the identity outside the
    support tube and a symplectomorphism up to integration tolerance.
    """

    chart: object
    potential: Callable
    plateau: float
    support: float
    steps: int = 64
    fd_step: float = 1e-6

    def hamiltonian(self, z):
        z = np.asarray(z, dtype=complex)
        d = self.chart.tube_norm(z)
        chi = bump_profile(d, self.plateau, self.support)
        if np.ndim(z) == 1:
            if chi == 0.0:
                return 0.0
            return float(chi * self.potential(self.chart.project_param(z)))
        vals = np.zeros(z.shape[:-1])
        mask = chi > 0
        if np.any(mask):
            vals[mask] = self.potential(self.chart.project_param(z[mask]))
        return chi * vals

    def _field(self, z):
        n = z.shape[-1]
        grad = np.zeros_like(z)
        h = self.fd_step
        for j in range(n):
            for unit in (1.0, 1j):
                e = np.zeros(n, dtype=complex)
                e[j] = unit
                hp = self.hamiltonian(z + h * e)
                hm = self.hamiltonian(z - h * e)
                comp = (hp - hm) / (2.0 * h)
                grad = grad + comp * e  # g-gradient component along unit
        return -1j * grad  # X_H = -J grad H

    def apply(self, z, direction: str = "forward"):
        """Integrate the time-1 flow by fixed-step RK4."""
        z = np.asarray(z, dtype=complex)
        sgn = 1.0 if direction == "forward" else -1.0
        if self.support <= 0:
            return z
        # identity outside the support tube, exactly
        if np.ndim(z) == 1 and self.chart.tube_norm(z) >= self.support:
            return z
        dt = sgn / self.steps
        y = z.copy()
        for _ in range(self.steps):
            k1 = self._field(y)
            k2 = self._field(y + 0.5 * dt * k1)
            k3 = self._field(y + 0.5 * dt * k2)
            k4 = self._field(y + dt * k3)
            y = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return y

    def differential(self, z, step: float = 1e-5):
        """dphi at z by central differences of the flow map."""
        z = np.asarray(z, dtype=complex)
        n = z.shape[-1]
        cols = []
        for j in range(n):
            for unit in (1.0, 1j):
                e = np.zeros(n, dtype=complex)
                e[j] = unit
                zp = self.apply(z + step * e)
                zm = self.apply(z - step * e)
                cols.append((zp - zm) / (2.0 * step))
        return cols  # images of e_j and i e_j, j = 0..n-1


# ------------------------------------------------------- ambient structure

@dataclass
class AmbientStructure:
    """(C^n, omega, J, Omega) with optional rescaling and deformation."""

    n: int
    density: Density = field(default_factory=Density.constant)
    rescale_s: Optional[float] = None
    deformation: Optional[CutoffFlow] = None
    tol: Tolerances = field(default_factory=lambda: DEFAULT_TOL)

    def __post_init__(self):
        if self.rescale_s is not None and self.rescale_s <= 0:
            raise ValueError("rescale_s must be positive")

    # effective density after the M_s rescaling (Omega_s = s^{-n} M_s^* Omega)
    def _eff_density(self) -> Density:
        if self.rescale_s is None:
            return self.density
        return self.density.affine(self.rescale_s, np.zeros(self.n))

    def _deformed(self, z):
        if self.deformation is None:
            return np.asarray(z, dtype=complex), None
        z = np.asarray(z, dtype=complex)
        w = self.deformation.apply(z)
        cols = self.deformation.differential(z)
        return w, cols

    def rho_at(self, z) -> float:
        """Positive weight rho(z); exactly 1.0 on the flat constant path."""
        z = np.asarray(z, dtype=complex)
        if self.deformation is not None:
            z = self.deformation.apply(z)
        dens = self._eff_density()
        if dens.is_constant:
            return 1.0 if z.ndim == 1 else np.ones(z.shape[:-1])
        val = np.exp(np.real(dens.log_at(z)))
        return float(val) if z.ndim == 1 else val

    def omega_n_form(self, z, frame) -> complex:
        """Omega evaluated on n tangent vectors (rows of frame) at z."""
        frame = np.asarray(frame, dtype=complex)
        if frame.shape != (self.n, self.n):
            raise ValueError("Omega takes exactly n vectors of C^n")
        z = np.asarray(z, dtype=complex)
        if self.deformation is not None:
            w, cols = self._deformed(z)
            push = []
            for v in frame:
                img = np.zeros(self.n, dtype=complex)
                for j in range(self.n):
                    img = img + v[j].real * cols[2 * j] + v[j].imag * cols[2 * j + 1]
                push.append(img)
            frame = np.asarray(push)
            z = w
        dens = self._eff_density()
        det = np.linalg.det(frame.T)
        return complex(dens.at(z) * det)

    def two_form(self, z, u, v, which: str) -> float:
        """omega or g on a pair of tangent vectors at z (deformation-aware)."""
        u = np.asarray(u, dtype=complex)
        v = np.asarray(v, dtype=complex)
        if self.deformation is not None:
            _, cols = self._deformed(z)

            def push(a):
                img = np.zeros(self.n, dtype=complex)
                for j in range(self.n):
                    img = img + a[j].real * cols[2 * j] + a[j].imag * cols[2 * j + 1]
                return img

            u, v = push(u), push(v)
        return float(omega_form(u, v) if which == "omega" else metric_form(u, v))

    def pullback_form(self, z, frame, which: str):
        """Evaluate {ReOmega, ImOmega, omega, g} on a frame at z.

        The frame is a sequence of tangent vectors; its length must match the
        degree of the requested form (2 for omega and g, n for Re/Im Omega).
        """
        frame = np.atleast_2d(np.asarray(frame, dtype=complex))
        if which in ("omega", "g"):
            if frame.shape[0] != 2:
                raise ValueError(f"{which} takes 2 vectors, got {frame.shape[0]}")
            return self.two_form(z, frame[0], frame[1], which)
        if which in ("re_omega", "im_omega"):
            if frame.shape[0] != self.n:
                raise ValueError(f"{which} takes {self.n} vectors, got {frame.shape[0]}")
            val = self.omega_n_form(z, frame)
            return float(val.real if which == "re_omega" else val.imag)
        raise ValueError(f"unknown form {which!r}")

    def phase_of_frame(self, z, frame, require_lagrangian: bool = True) -> float:
        """Phase arg Omega(v_1, ..., v_n) of an oriented Lagrangian frame."""
        frame = np.asarray(frame, dtype=complex)
        if require_lagrangian:
            worst = lagrangian_defect(self, z, frame)
            if worst > self.tol.tol_lag * max(1.0, _frame_scale(frame) ** 2):
                raise ValueError(f"non-Lagrangian frame (omega residual {worst:.3e})")
        val = self.omega_n_form(z, frame)
        if val == 0:
            raise ValueError("Omega vanishes: frame is not real-independent")
        return wrap_angle(np.angle(val))

    def rescaled(self, s: float) -> "AmbientStructure":
        prev = 1.0 if self.rescale_s is None else self.rescale_s
        return AmbientStructure(self.n, self.density, prev * s, self.deformation,
                                self.tol)

    def recentered(self, q, s: float) -> "AmbientStructure":
        """Ambient of the rescaled structure about q: density(q + s z).

        Used by the end solver; omega and J are unchanged, Omega picks up the
        substituted density so rho_s(z) = rho(q + s z).
        """
        if self.deformation is not None:
            raise ValueError("recentering under a deformation is not supported")
        base = self._eff_density()
        return AmbientStructure(self.n, base.affine(s, np.asarray(q, dtype=complex)),
                                None, None, self.tol)

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "density": self.density.to_json(),
            "rescale_s": self.rescale_s,
            "deformation": None if self.deformation is None else {
                "plateau": self.deformation.plateau,
                "support": self.deformation.support,
                "steps": self.deformation.steps,
            },
        }

    @staticmethod
    def from_json(d: dict) -> "AmbientStructure":
        if d.get("deformation"):
            raise ValueError("deformed ambients cannot be rebuilt from JSON alone")
        return AmbientStructure(int(d["n"]), Density.from_json(d["density"]),
                                d.get("rescale_s"))


def _frame_scale(frame) -> float:
    return float(np.max(np.abs(frame))) or 1.0


def lagrangian_defect(ambient: AmbientStructure, z, frame) -> float:
    """Worst |omega(v_i, v_j)| over pairs of frame vectors."""
    frame = np.asarray(frame, dtype=complex)
    worst = 0.0
    for i in range(frame.shape[0]):
        for j in range(i + 1, frame.shape[0]):
            worst = max(worst, abs(ambient.two_form(z, frame[i], frame[j], "omega")))
    return worst


# ------------------------------------------------------------------ planes

@dataclass
class OrientedLagrangianPlane:
    """An oriented Lagrangian n-plane with basepoint, basis and phase."""

    basepoint: np.ndarray
    basis: np.ndarray            # (n, n) rows = tangent vectors
    ambient: AmbientStructure

    def __post_init__(self):
        self.basepoint = np.asarray(self.basepoint, dtype=complex)
        self.basis = np.asarray(self.basis, dtype=complex)
        defect = lagrangian_defect(self.ambient, self.basepoint, self.basis)
        scale = _frame_scale(self.basis) ** 2
        if defect > self.ambient.tol.tol_lag * max(1.0, scale):
            raise ValueError(f"basis is not Lagrangian (residual {defect:.3e})")

    @property
    def phase(self) -> float:
        return self.ambient.phase_of_frame(self.basepoint, self.basis,
                                           require_lagrangian=False)

    @property
    def is_positive(self) -> bool:
        return abs(self.phase) < math.pi / 2

    @property
    def near_degenerate(self) -> bool:
        return abs(self.phase) > math.pi / 2 - self.ambient.tol.delta_phase

    def volume(self) -> float:
        return frame_volume(self.basis)

    def omega_vs_volume_gap(self) -> float:
        """| |Omega(basis)| - rho * vol(basis) |, zero on Lagrangian planes."""
        val = abs(self.ambient.omega_n_form(self.basepoint, self.basis))
        rho = self.ambient.rho_at(self.basepoint)
        return abs(val - rho * self.volume())


def rho_at(ambient: AmbientStructure, z):
    return ambient.rho_at(z)


def phase_of(ambient: AmbientStructure, plane: OrientedLagrangianPlane) -> float:
    return ambient.phase_of_frame(plane.basepoint, plane.basis)


def pullback_form(ambient: AmbientStructure, z, frame, which: str):
    return ambient.pullback_form(z, frame, which)


def apply_cutoff_flow(flow: CutoffFlow, z, direction: str = "forward"):
    return flow.apply(z, direction)


# -------------------------------------------------- deterministic sampling

def kronecker_samples(count: int, dim: int, lo=0.0, hi=1.0) -> np.ndarray:
    """Deterministic low-discrepancy points via the Kronecker golden sequence."""
    # generalized golden ratios
    g = 1.0
    for _ in range(32):
        g = (1.0 + g) ** (1.0 / (dim + 1))
    alphas = np.array([(1.0 / g) ** (k + 1) for k in range(dim)])
    idx = np.arange(1, count + 1)[:, None]
    pts = np.mod(0.5 + idx * alphas[None, :], 1.0)
    return lo + (hi - lo) * pts
