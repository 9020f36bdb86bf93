import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp

from sdcontrol import assembly as asm
from sdcontrol import verify
from sdcontrol.mesh import refine_uniform
from sdcontrol.quadrature import make_quadrature
from sdcontrol.reconstruction import (build_reconstruction, consistency_functional,
                                      divergence_l2, l2_error, rt_divergence,
                                      rt_interface_jump, rt_interpolate)
from sdcontrol.spaces import FeFunction, build_spaces, interpolate_stokes, rt_dofs
from sdcontrol.system import build_system, random_admissible_velocities


def stokes_vector(spaces, field):
    return np.concatenate([interpolate_stokes(spaces.stokes, field), np.zeros(spaces.darcy.ndof)])


def const(c):
    return lambda p: np.tile(c, (len(p), 1))


def test_moments_match_for_basis_functions(coarse):
    """Pi v has the RT moments of v itself, checked by independent RT interpolation."""
    mesh, spaces, Pi = coarse
    V, R = spaces.stokes, spaces.stokes_rt
    S = Pi.stokes_block()
    for i in range(0, V.ndof, 7):
        e = np.zeros(V.ndof)
        e[i] = 1.0
        expect = rt_dofs(R, FeFunction(V, e))
        assert np.allclose(S @ e, expect, atol=1e-12)


def test_darcy_block_is_identity(coarse):
    _, spaces, Pi = coarse
    D = Pi.darcy_block()
    assert abs(D - sp.identity(spaces.darcy.ndof)).max() == 0
    assert Pi.shape == (spaces.n_rt, spaces.n_velocity)


def test_element_locality(coarse):
    """A cell bubble only feeds the RT dofs of its own cell."""
    mesh, spaces, Pi = coarse
    V, R = spaces.stokes, spaces.stokes_rt
    S = Pi.stokes_block().tocsc()
    for row in range(len(V.cells)):
        col = V.cell_dofs[row, 6]
        hit = S[:, col].nonzero()[0]
        assert set(hit) <= set(R.cell_dofs[row])


@pytest.mark.parametrize("field", [const([1.0, 0.0]), const([0.3, -2.0]),
                                   lambda p: np.column_stack([p[:, 0], 0 * p[:, 0]])])
def test_reproduces_rt_fields(coarse, field):
    _, spaces, Pi = coarse
    w = Pi @ stokes_vector(spaces, field)
    ws, _ = spaces.split_rt(w)
    assert np.allclose(ws, rt_dofs(spaces.stokes_rt, field), atol=1e-12)


def test_idempotent_on_rt_polynomials(coarse):
    """A global RT1 polynomial is in the velocity space and is left unchanged."""
    _, spaces, Pi = coarse
    f = lambda p: np.column_stack([1 + p[:, 0] + p[:, 0] * (p[:, 0] + p[:, 1]),
                                   2 - p[:, 1] + p[:, 1] * (p[:, 0] + p[:, 1])])
    ws, _ = spaces.split_rt(Pi @ stokes_vector(spaces, f))
    fe = FeFunction(spaces.stokes_rt, ws)
    pts = np.array([[0.3, 1.2], [0.71, 1.55], [0.1, 1.95]])
    assert np.allclose(fe(pts), f(pts), atol=1e-12)


def test_admissible_fields_become_divergence_and_jump_free(coarse):
    mesh, spaces, Pi = coarse
    system = build_system(mesh, spaces, verify.control_problem_data(), "classical")
    V = random_admissible_velocities(system, 30, rng=7)
    for v in V.T:
        w = Pi @ v
        scale = np.abs(w).max()
        assert np.abs(rt_divergence(spaces, w)).max() < 1e-10 * scale
        assert np.abs(rt_interface_jump(spaces, w)).max() < 1e-10 * scale


def test_interpolate_linear_field_exactly(coarse):
    mesh, _, _ = coarse
    f = lambda p: p.copy()
    fe = rt_interpolate(mesh, f)
    assert l2_error(fe, f) < 1e-13


def test_interpolation_order_two(smooth):
    f = lambda p: np.column_stack([np.sin(np.pi * p[:, 0]), 0 * p[:, 0]])
    errors = []
    mesh = verify.make_mesh(smooth, 2, 0)
    for _ in range(4):
        errors.append(l2_error(rt_interpolate(mesh, f), f))
        mesh = refine_uniform(mesh)
    eoc = np.log2(np.array(errors[:-1]) / errors[1:])
    assert np.all(np.abs(eoc - 2.0) < 0.15)
    assert abs(eoc[-1] - 2.0) < 0.05


def test_divergence_free_field_cell_fluxes(fine):
    """Per cell, the integral of div equals the boundary flux of the field, here zero."""
    mesh, _, _ = fine
    g = lambda p: np.column_stack([np.sin(np.pi * p[:, 0]) * np.cos(np.pi * p[:, 1]),
                                   -np.cos(np.pi * p[:, 0]) * np.sin(np.pi * p[:, 1])])
    fe = rt_interpolate(mesh, g, degree=16)
    space = fe.space
    q = make_quadrature("triangle", 4)
    tab = space.tabulate(q.points)
    _, det = mesh.jacobians(space.cells)
    cellint = np.einsum("cl,clq,q,c->c", fe.coeffs[space.cell_dofs], tab.div, q.weights, det)
    assert np.abs(cellint).max() < 1e-12
    assert divergence_l2(fe) < 1e-5


@pytest.fixture(scope="module")
def psi(coarse, smooth_data):
    """Projection of a smooth field onto the discretely admissible velocities."""
    mesh, spaces, _ = coarse
    system = build_system(mesh, spaces, smooth_data, "classical")
    free = ~spaces.velocity_essential
    BC = sp.vstack([system.parts["B"], system.parts["C"]]).toarray()[:, free]
    v = stokes_vector(spaces, lambda p: np.column_stack([np.sin(np.pi * p[:, 0]) * p[:, 1],
                                                         p[:, 0] * p[:, 1]]))[free]
    v = v - BC.T @ np.linalg.lstsq(BC @ BC.T, BC @ v, rcond=None)[0]
    out = np.zeros(spaces.n_velocity)
    out[free] = v
    return out


class TestConsistencyFunctional:

    def test_vanishes_on_discrete_multiplier_space(self, coarse, psi):
        # (y, y) is piecewise linear and continuous across the interface
        _, spaces, _ = coarse
        y = lambda p: p[:, 1]
        assert abs(consistency_functional(spaces, y, y, psi)) < 1e-12

    def test_vanishes_for_constants(self, coarse, psi):
        _, spaces, _ = coarse
        c = lambda p: np.full(len(p), 3.0)
        assert abs(consistency_functional(spaces, c, c, psi)) < 1e-12

    def test_frozen_anchor(self, coarse, psi):
        _, spaces, _ = coarse
        phi = lambda p: np.sin(np.pi * p[:, 0]) * p[:, 1]
        val = consistency_functional(spaces, phi, phi, psi, degree=20)
        assert val == pytest.approx(0.0006094565876770736, rel=1e-8)
        assert consistency_functional(spaces, phi, phi, psi) == pytest.approx(val, rel=1e-7)

    def test_vanishes_after_reconstruction(self, coarse, psi):
        _, spaces, Pi = coarse
        phi = lambda p: np.sin(np.pi * p[:, 0]) * p[:, 1]
        w = Pi @ psi
        assert abs(consistency_functional(spaces, phi, phi, w, reconstructed=True)) < 1e-12


def test_bounded_uniformly_in_h(smooth):
    """Largest ratio ||Pi v||_L2 / ||v||_L2 does not grow under refinement."""
    consts = []
    mesh = verify.make_mesh(smooth, 2, 0)
    for _ in range(3):
        spaces = build_spaces(mesh)
        Pi = build_reconstruction(mesh, spaces)
        S = Pi.stokes_block()
        MR = asm.rt_mass_matrix(spaces.stokes_rt, weighted=False)
        MV = asm.stokes_mass_matrix(spaces)
        lam = sla.eigh((S.T @ MR @ S).toarray(), MV.toarray(), eigvals_only=True)
        consts.append(np.sqrt(lam.max()))
        mesh = refine_uniform(mesh)
    assert consts[-1] <= 1.05 * consts[0]


def test_rejects_foreign_spaces(coarse, fine):
    mesh, _, _ = coarse
    _, spaces, _ = fine
    with pytest.raises(ValueError):
        build_reconstruction(mesh, spaces)
