import math

import numpy as np
import pytest

from islag.ambient import (AmbientStructure, CutoffFlow, Density,
                           OrientedLagrangianPlane, apply_cutoff_flow,
                           kronecker_samples, phase_of, pullback_form, rho_at,
                           wrap_angle)
from islag.lagrangian import LinearSubspace, QuadraticPotential, TubularChart


def test_rho_flat_is_exactly_one(amb2):
    rng = np.random.default_rng(0)
    z = rng.standard_normal((1000, 2)) + 1j * rng.standard_normal((1000, 2))
    vals = amb2.rho_at(z)
    assert np.all(vals == 1.0)


def test_rho_exp_density():
    amb = AmbientStructure(2, Density.exp_poly({(1, 0): 1.0}))
    z = np.array([0.3 + 0.7j, -2.0 + 5.0j])
    # oracle: direct wedge arithmetic, rho^2 vol = |Omega(e1,e2)|^2 on the
    # standard unitary frame, so rho = |exp(z1)|
    assert rho_at(amb, z) == pytest.approx(math.exp(0.3), rel=1e-14)


def test_rho_rescaling_cancels_jacobian():
    amb = AmbientStructure(2, rescale_s=0.25)
    z = np.array([1.0 + 1.0j, 2.0 - 0.3j])
    assert rho_at(amb, z) == 1.0
    # with a density the rescaling substitutes the argument
    ambd = AmbientStructure(2, Density.exp_poly({(1, 0): 1.0}), rescale_s=0.5)
    assert rho_at(ambd, z) == pytest.approx(math.exp(0.5 * 1.0), rel=1e-14)


def test_phase_examples(amb2):
    plane = OrientedLagrangianPlane(np.zeros(2), np.eye(2), amb2)
    assert phase_of(amb2, plane) == 0.0
    a, b = 0.4, 0.3
    pl = OrientedLagrangianPlane(np.zeros(2),
                                 np.diag([np.exp(1j * a), np.exp(1j * b)]), amb2)
    assert phase_of(amb2, pl) == pytest.approx(a + b, abs=1e-14)
    pli = OrientedLagrangianPlane(np.zeros(2), np.diag([1j, 1j]), amb2)
    assert phase_of(amb2, pli) == pytest.approx(math.pi, abs=1e-14)
    assert not pli.is_positive


def test_phase_wraps_and_flags(amb2):
    a = 1.5  # phase 3.0 wraps nowhere but is near pi
    pl = OrientedLagrangianPlane(np.zeros(2),
                                 np.diag([np.exp(1j * a), np.exp(1j * a)]), amb2)
    assert pl.phase == pytest.approx(3.0, abs=1e-14)
    assert pl.near_degenerate and not pl.is_positive
    assert wrap_angle(math.pi + 0.1) == pytest.approx(-math.pi + 0.1)


def test_phase_basis_invariance(amb2):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        theta = rng.uniform(-1.2, 1.2, 2)
        frame = np.diag(np.exp(1j * theta))
        base = amb2.phase_of_frame(np.zeros(2), frame)
        B = rng.standard_normal((2, 2))
        while np.linalg.det(B) < 0.2:
            B = rng.standard_normal((2, 2))
        B /= np.sqrt(np.linalg.det(B))       # SL(2, R)
        other = amb2.phase_of_frame(np.zeros(2), B @ frame)
        worst = max(worst, abs(other - base))
    assert worst < 1e-12


def test_omega_equals_rho_vol(amb2):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        theta = rng.uniform(-math.pi, math.pi, 2)
        B = rng.standard_normal((2, 2))
        while abs(np.linalg.det(B)) < 0.1:
            B = rng.standard_normal((2, 2))
        frame = B @ np.diag(np.exp(1j * theta))
        pl = OrientedLagrangianPlane(rng.standard_normal(2) + 0j, frame, amb2)
        worst = max(worst, pl.omega_vs_volume_gap())
    assert worst < 1e-12


def test_pullback_forms(amb2):
    z = np.zeros(2)
    assert pullback_form(amb2, z, [[1, 0], [1j, 0]], "omega") == pytest.approx(1.0)
    assert pullback_form(amb2, z, [[1j, 0], [0, 1]], "re_omega") == pytest.approx(0.0)
    assert pullback_form(amb2, z, np.eye(2), "im_omega") == pytest.approx(0.0)
    assert pullback_form(amb2, z, [[1, 0], [1, 0]], "g") == pytest.approx(1.0)
    with pytest.raises(ValueError):
        pullback_form(amb2, z, [[1, 0]], "omega")
    with pytest.raises(ValueError):
        pullback_form(amb2, z, [[1, 0]], "re_omega")


def test_density_json_roundtrip():
    d = Density.exp_poly({(1, 0): 1 + 2j, (0, 3): -0.5})
    d2 = Density.from_json(d.to_json())
    z = np.array([0.3 + 0.1j, -0.2 + 0.4j])
    assert d2.at(z) == pytest.approx(d.at(z))
    # affine substitution agrees with direct evaluation
    sub = d.affine(0.5, np.array([1.0, 2.0 - 1j]))
    assert sub.at(z) == pytest.approx(d.at(np.array([1.0, 2.0 - 1j]) + 0.5 * z))


def test_grad_log_density():
    d = Density.exp_poly({(2, 0): 1.0, (1, 1): 0.5j})
    z = np.array([0.3 + 0.1j, -0.2 + 0.4j])
    g = d.grad_log_at(z)
    eps = 1e-7
    for j in range(2):
        e = np.zeros(2, complex)
        e[j] = eps
        fd = (d.log_at(z + e) - d.log_at(z - e)) / (2 * eps)
        assert g[j] == pytest.approx(fd, rel=1e-6)


class _FlatChart:
    """Tube chart of R^2 in C^2 with an analytic potential."""

    def __init__(self, pot):
        self.pot = pot

    def tube_norm(self, z):
        z = np.asarray(z, complex)
        return np.linalg.norm(z.imag, axis=-1)

    def project_param(self, z):
        return np.asarray(z, complex).real


def _make_flow(pot, plateau=0.6, support=1.2, steps=64):
    return CutoffFlow(_FlatChart(pot), lambda x: pot.value(x),
                      plateau, support, steps)


def test_cutoff_flow_identity_outside_and_zero_h():
    pot = QuadraticPotential(0.05 * np.eye(2))
    flow = _make_flow(pot)
    z_out = np.array([0.3 + 2.0j, 0.1 - 0.2j])  # outside the support tube
    assert np.array_equal(flow.apply(z_out), z_out)
    zero = _make_flow(QuadraticPotential(np.zeros((2, 2))))
    z = np.array([0.3 + 0.1j, -0.2 + 0.05j])
    assert np.max(np.abs(zero.apply(z) - z)) < 1e-12


def test_cutoff_flow_graph_and_inverse():
    A = 0.04 * np.array([[1.0, 0.3], [0.3, 2.0]])
    pot = QuadraticPotential(A)
    flow = _make_flow(pot)
    x = np.array([0.25, -0.1])
    z = x.astype(complex)
    out = flow.apply(z)
    # time-1 flow of h(Re z) from the zero section is the graph of -dh
    expect = x - 1j * (A @ x)
    assert np.max(np.abs(out - expect)) < 1e-9
    # matches a 100x finer reference integrator
    fine = CutoffFlow(flow.chart, flow.potential, flow.plateau, flow.support,
                      steps=flow.steps * 100)
    assert np.max(np.abs(out - fine.apply(z))) < 1e-9
    back = apply_cutoff_flow(flow, out, "inverse")
    assert np.max(np.abs(back - z)) < 1e-10


def test_cutoff_flow_is_symplectic():
    A = 0.05 * np.array([[1.0, 0.2], [0.2, 1.5]])
    flow = _make_flow(QuadraticPotential(A))
    amb = AmbientStructure(2, deformation=flow)
    rng = np.random.default_rng(3)
    z = np.array([0.2 + 0.05j, -0.1 + 0.02j])   # inside the plateau
    worst = 0.0
    for _ in range(4):
        u = rng.standard_normal(2) + 1j * rng.standard_normal(2)
        v = rng.standard_normal(2) + 1j * rng.standard_normal(2)
        before = AmbientStructure(2).two_form(z, u, v, "omega")
        after = amb.two_form(z, u, v, "omega")
        worst = max(worst, abs(after - before) / max(1.0, abs(before)))
    # integrator tolerance: RK4 at 64 steps plus finite-difference dphi
    assert worst < 1e-6


def test_kronecker_sampler_deterministic():
    a = kronecker_samples(64, 2)
    b = kronecker_samples(64, 2)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1
