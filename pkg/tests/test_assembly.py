import numpy as np
import pytest
import sympy

from sdcontrol import assembly as asm
from sdcontrol import mesh as msh
from sdcontrol import verify
from sdcontrol.assembly import DataError, ProblemData
from sdcontrol.spaces import DARCY_VELOCITY, build_space, interpolate_stokes, rt_dofs
from sdcontrol.system import build_system, random_admissible_velocities


def rt1_mass_oracle():
    """Exact RT1 mass matrix on the unit reference triangle with global conventions."""
    x, y = sympy.symbols("x y")
    prime = [sympy.Matrix(v) for v in ([1, 0], [x, 0], [y, 0], [0, 1], [0, x], [0, y],
                                        [x * x, x * y], [x * y, y * y])]
    verts = [sympy.Matrix([0, 0]), sympy.Matrix([1, 0]), sympy.Matrix([0, 1])]
    edges = [(0, 1), (0, 2), (1, 2)]
    s = sympy.symbols("s")

    def tri_int(f):
        return sympy.integrate(sympy.integrate(f, (y, 0, 1 - x)), (x, 0, 1))

    rows = []
    for a, b in edges:
        pa, pb = verts[a], verts[b]
        d = pb - pa
        L = sympy.sqrt(d.dot(d))
        n = sympy.Matrix([d[1], -d[0]]) / L
        mid = (pa + pb) / 2
        if n.dot(mid - sympy.Matrix([sympy.Rational(1, 3)] * 2)) < 0:
            n = -n
        pt = pa + s * d
        for lam in (1 - s, s):
            rows.append([sympy.integrate((v.subs({x: pt[0], y: pt[1]}).dot(n)) * lam * L,
                                         (s, 0, 1)) for v in prime])
    rows.append([tri_int(v[0]) for v in prime])
    rows.append([tri_int(v[1]) for v in prime])
    C = sympy.Matrix(rows).inv()
    basis = [sum((C[m, l] * prime[m] for m in range(8)), sympy.zeros(2, 1)) for l in range(8)]
    return np.array([[float(tri_int(bi.dot(bj))) for bj in basis] for bi in basis])


def const_field(c):
    return lambda p: np.tile(c, (len(p), 1))


def single_triangle():
    return msh.Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), [[0, 1, 2]],
                    [msh.DARCY], [0.0, -1.0])


def test_darcy_block_is_rt_mass_on_reference_triangle():
    space = build_space(single_triangle(), DARCY_VELOCITY)
    M = asm.rt_mass_matrix(space, ProblemData(mu=1.0)).toarray()
    assert np.allclose(M, rt1_mass_oracle(), rtol=0, atol=1e-13)


def test_a_symmetric_and_semidefinite(coarse, smooth_data):
    mesh, spaces, _ = coarse
    A = asm.assemble_a(mesh, spaces, smooth_data)
    assert abs(A - A.T).max() <= 1e-12 * abs(A).max()
    rng = np.random.default_rng(3)
    for _ in range(20):
        v = rng.standard_normal(A.shape[0])
        assert v @ (A @ v) >= -1e-12 * (v @ v)


def test_a_linear_in_mu(coarse):
    mesh, spaces, _ = coarse
    A1 = asm.assemble_a(mesh, spaces, ProblemData(mu=1.0, alpha1=0.7))
    A2 = asm.assemble_a(mesh, spaces, ProblemData(mu=2.0, alpha1=0.7))
    assert abs(A2 - 2 * A1).max() < 1e-12 * abs(A1).max()


def test_strain_of_constants_vanishes(coarse):
    mesh, spaces, _ = coarse
    As = asm.stokes_strain_matrix(spaces)
    for c in ([1.0, 0.0], [0.0, 1.0]):
        v = interpolate_stokes(spaces.stokes, const_field(c))
        assert np.abs(As @ v).max() < 1e-12


def test_non_spd_permeability_rejected(coarse):
    mesh, spaces, _ = coarse
    data = ProblemData(K=np.array([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(DataError):
        asm.assemble_a(mesh, spaces, data)


def test_permeability_bounds_checked(coarse):
    mesh, spaces, _ = coarse
    data = ProblemData(K=2.0 * np.eye(2), K_bounds=(0.5, 1.5))
    with pytest.raises(DataError):
        asm.assemble_a(mesh, spaces, data)


@pytest.mark.parametrize("name", ["mu", "alpha", "alpha1"])
def test_positive_parameters(name):
    with pytest.raises(DataError):
        ProblemData(**{name: 0.0})


def test_b_of_rt_interpolant_on_one_triangle(coarse):
    mesh, spaces, _ = coarse
    B = asm.assemble_b(mesh, spaces)
    vd = rt_dofs(spaces.darcy, lambda p: p.copy())
    v = np.concatenate([np.zeros(spaces.stokes.ndof), vd])
    t = spaces.darcy.cells[3]
    rows = spaces.pressure.cell_dofs[t]
    assert (B @ v)[rows].sum() == pytest.approx(-2.0 * mesh.areas()[t], rel=1e-13)


def test_b_is_local(coarse):
    mesh, spaces, _ = coarse
    B = asm.assemble_b(mesh, spaces).tocsc()
    V = spaces.darcy
    col = spaces.stokes.ndof + V.cell_dofs[0, 6]  # interior dof of one cell
    rows = B[:, col].nonzero()[0]
    assert set(rows) <= set(spaces.pressure.cell_dofs[V.cells[0]])


def test_constraint_row_of_darcy_edge_basis(coarse):
    mesh, spaces, _ = coarse
    C = asm.assemble_interface_constraint(mesh, spaces).toarray()
    gam = msh.interface_edges(mesh)
    V, T = spaces.darcy, spaces.trace
    for e in gam.edges:
        first = 2 * np.searchsorted(V.extra["edge_ids"], e)
        trows = T.cell_dofs[T.local_index[e]]
        for slot in (0, 1):
            col = C[:, spaces.stokes.ndof + first + slot]
            # the trace basis is dual to the RT edge moments, with n^d = -n^s
            expect = np.zeros(T.ndof)
            expect[trows[slot]] = -1.0
            assert np.allclose(col, expect, atol=1e-14)


def test_constraint_vanishes_for_tangential_stokes_field(coarse):
    mesh, spaces, _ = coarse
    C = asm.assemble_interface_constraint(mesh, spaces)
    vs = interpolate_stokes(spaces.stokes, lambda p: np.column_stack([1 + p[:, 0] ** 2, 0 * p[:, 0]]))
    v = np.concatenate([vs, np.zeros(spaces.darcy.ndof)])
    assert np.abs(C @ v).max() < 1e-14


def test_constraint_vanishes_for_matching_fluxes(coarse):
    mesh, spaces, _ = coarse
    C = asm.assemble_interface_constraint(mesh, spaces)
    down = const_field([0.0, -1.0])
    v = np.concatenate([interpolate_stokes(spaces.stokes, down), rt_dofs(spaces.darcy, down)])
    assert np.abs(C @ v).max() < 1e-14


def test_zero_data_gives_zero_rhs(coarse):
    mesh, spaces, Pi = coarse
    data = ProblemData()
    for mode in ("plain", "reconstructed"):
        for which in ("state", "adjoint"):
            assert not np.any(asm.assemble_rhs(mesh, spaces, data, which, mode, Pi))


def test_reconstructed_rhs_needs_operator(coarse):
    mesh, spaces, _ = coarse
    with pytest.raises(ValueError):
        asm.assemble_rhs(mesh, spaces, ProblemData(), "state", "reconstructed")


def test_velocity_mass_modes(coarse):
    mesh, spaces, Pi = coarse
    M = asm.assemble_velocity_mass(mesh, spaces, "plain")
    MP = asm.assemble_velocity_mass(mesh, spaces, "reconstructed", Pi)
    assert M.shape == MP.shape == (spaces.n_velocity,) * 2
    assert abs(MP - MP.T).max() < 1e-14
    # Darcy blocks coincide because the reconstruction is the identity there
    ns = spaces.stokes.ndof
    assert abs(M[ns:, ns:] - MP[ns:, ns:]).max() < 1e-14
    with pytest.raises(ValueError):
        asm.assemble_velocity_mass(mesh, spaces, "reconstructed")


def test_pressure_mean_vector(coarse):
    mesh, spaces, _ = coarse
    w = asm.pressure_mean_vector(spaces)
    assert w.sum() == pytest.approx(2.0, rel=1e-14)


def test_divergence_load_of_constant(coarse):
    mesh, spaces, _ = coarse
    G = asm.divergence_load(spaces, lambda p: np.ones(len(p)), None)
    assert G.sum() == pytest.approx(-1.0, rel=1e-13)


def test_interface_mass_load_of_constant(coarse):
    mesh, spaces, _ = coarse
    J = asm.interface_mass_load(spaces, lambda p: np.full(len(p), 2.0))
    assert J.sum() == pytest.approx(2.0, rel=1e-13)


@pytest.fixture(scope="module")
def admissible(coarse):
    mesh, spaces, _ = coarse
    system = build_system(mesh, spaces, verify.control_problem_data())
    return random_admissible_velocities(system, 100, rng=11)


def test_a_positive_on_discrete_kernel(coarse, smooth_data, admissible):
    mesh, spaces, _ = coarse
    A = asm.assemble_a(mesh, spaces, smooth_data)
    energy = np.einsum("ik,ik->k", admissible, A @ admissible)
    assert np.all(energy > 0)


def test_mass_of_constant_is_area(coarse):
    mesh, spaces, _ = coarse
    one = const_field([1.0, 0.0])
    v = np.concatenate([interpolate_stokes(spaces.stokes, one), rt_dofs(spaces.darcy, one)])
    M = asm.assemble_velocity_mass(mesh, spaces)
    assert v @ (M @ v) == pytest.approx(2.0, rel=1e-13)
    assert abs(M - M.T).max() < 1e-12


def test_gradient_load_invisible_in_reconstructed_mode(coarse, admissible):
    """(grad phi, Pi psi) = -(phi, div Pi psi) = 0 for phi vanishing on the Stokes boundary."""
    mesh, spaces, Pi = coarse
    grad = sympy.lambdify((verify.X, verify.Y),
                          [sympy.diff(verify.pressure_bubble(), s) for s in (verify.X, verify.Y)])
    f_s = lambda p: np.column_stack(np.broadcast_arrays(*grad(p[:, 0], p[:, 1])))
    robust = Pi.T @ asm.volume_load(spaces, f_s, None, "rt")
    plain = asm.volume_load(spaces, f_s, None, "velocity")
    scale = np.abs(plain).max()
    assert np.abs(robust @ admissible).max() < 1e-12 * scale
    assert np.abs(plain @ admissible).max() > 1e-6 * scale


@pytest.mark.parametrize("build", [
    lambda m, s, d, q: asm.assemble_a(m, s, d, q),
    lambda m, s, d, q: asm.assemble_b(m, s, q),
    lambda m, s, d, q: asm.assemble_interface_constraint(m, s, q),
    lambda m, s, d, q: asm.assemble_velocity_mass(m, s, degree=q),
], ids=["a", "b", "constraint", "mass"])
def test_quadrature_saturation(coarse, build):
    mesh, spaces, _ = coarse
    data = ProblemData(mu=1.3, K=np.array([[2.0, 0.5], [0.5, 1.0]]), alpha1=0.6)
    lo = build(mesh, spaces, data, None)
    hi = build(mesh, spaces, data, 2 * spaces.k + 4)
    assert abs(lo - hi).max() < 1e-12 * abs(hi).max()
