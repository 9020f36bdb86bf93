"""
Monolithic optimality system for the classical and the robust scheme.

Unknowns are ordered ``[u, z, p, r, lam_u, lam_z, m_p, m_r]``. With
``a = alpha^(-1/2)`` the matrix is::

    [  A   aM   B^T   0    C^T   0    0   0 ]
    [ aM   -A    0  -B^T    0  -C^T   0   0 ]
    [  B    0    0    0     0    0    w   0 ]
    [  0   -B    0    0     0    0    0  -w ]
    [  C    0    0    0     0    0    0   0 ]
    [  0   -C    0    0     0    0    0   0 ]
    [  0    0   w^T   0     0    0    0   0 ]
    [  0    0    0  -w^T    0    0    0   0 ]

where the adjoint rows are negated so that the matrix is symmetric. The
robust scheme replaces ``M`` by ``Pi^T M_RT Pi`` and lifts the volume loads
by ``Pi^T``.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import null_space

from . import assembly as asm
from .quadrature import make_quadrature
from .spaces import FeFunction

SCHEMES = ("classical", "robust")
BLOCKS = ("u", "z", "p", "r", "lam_u", "lam_z", "m_p", "m_r")


class SolverError(RuntimeError):
    """The factorization broke down or produced a non-finite solution."""


@dataclass
class BlockSystem:
    """
    Assembled optimality system before boundary elimination.

    ``matrix`` and ``rhs`` cover all unknowns; ``fixed`` marks eliminated
    essential dofs and ``fixed_values`` holds their prescribed values.
    """
    scheme: str
    spaces: object
    data: object
    matrix: sp.csr_matrix
    rhs: np.ndarray
    offsets: dict
    fixed: np.ndarray
    fixed_values: np.ndarray
    coupling: float
    Pi: object = None
    parts: dict = field(default_factory=dict)

    @property
    def size(self):
        return self.matrix.shape[0]

    def block(self, name):
        a, b = self.offsets[name]
        return slice(a, b)

    @property
    def free(self):
        return ~self.fixed

    def reduced(self):
        """Matrix and right-hand side on the free dofs."""
        free = self.free
        K = self.matrix
        Kf = K[free][:, free].tocsc()
        bf = self.rhs[free] - K[free][:, self.fixed] @ self.fixed_values[self.fixed]
        return Kf, bf

    def expand(self, xf):
        x = self.fixed_values.copy()
        x[self.free] = xf
        return x


@dataclass
class Solution:
    """Discrete solution of the optimality system."""
    system: BlockSystem
    x: np.ndarray
    residual: float

    def _get(self, name):
        return self.x[self.system.block(name)]

    @property
    def u(self):
        return self._get("u")

    @property
    def z(self):
        return self._get("z")

    @property
    def p(self):
        return self._get("p")

    @property
    def r(self):
        return self._get("r")

    @property
    def lam_u(self):
        return self._get("lam_u")

    @property
    def lam_z(self):
        return self._get("lam_z")

    @property
    def eta(self):
        """Control ``-alpha^(-1/2) z`` (in the RT target for the robust scheme)."""
        a = self.system.coupling
        if self.system.scheme == "robust":
            return -a * (self.system.Pi.matrix @ self.z)
        return -a * self.z

    def fields(self, which="u"):
        """FeFunctions ``(stokes, darcy)`` of a velocity or ``(pressure,)``."""
        sp_ = self.system.spaces
        v = self._get(which)
        if which in ("u", "z"):
            vs, vd = sp_.split_velocity(v)
            return FeFunction(sp_.stokes, vs), FeFunction(sp_.darcy, vd)
        if which in ("p", "r"):
            return (FeFunction(sp_.pressure, v),)
        return (FeFunction(sp_.trace, v),)


def _offsets(spaces):
    nv, npr, nt = spaces.n_velocity, spaces.pressure.ndof, spaces.trace.ndof
    sizes = dict(u=nv, z=nv, p=npr, r=npr, lam_u=nt, lam_z=nt, m_p=1, m_r=1)
    out, pos = {}, 0
    for name in BLOCKS:
        out[name] = (pos, pos + sizes[name])
        pos += sizes[name]
    return out


def coupling_mass(mesh, spaces, scheme, Pi=None):
    if scheme == "robust":
        return asm.assemble_velocity_mass(mesh, spaces, "reconstructed", Pi)
    return asm.assemble_velocity_mass(mesh, spaces, "plain")


def build_system(mesh, spaces, data, scheme="classical", Pi=None, coupling=None):
    """
    Assemble the optimality system of one scheme.

    Parameters
    ----------
    scheme : {"classical", "robust"}
    Pi : ReconstructionOperator, required for the robust scheme
    coupling : float, optional
        Overrides ``alpha^(-1/2)`` in the two coupling blocks only (the
        loads keep the value from ``data``); ``0`` decouples state and
        adjoint.
    """
    if scheme not in SCHEMES:
        raise ValueError("unknown scheme %r" % (scheme,))
    if scheme == "robust" and Pi is None:
        raise ValueError("the robust scheme needs the reconstruction operator")
    a = data.coupling if coupling is None else float(coupling)
    mode = "reconstructed" if scheme == "robust" else "plain"

    A = asm.assemble_a(mesh, spaces, data)
    B = asm.assemble_b(mesh, spaces)
    C = asm.assemble_interface_constraint(mesh, spaces)
    M = coupling_mass(mesh, spaces, scheme, Pi)
    w = sp.csr_matrix(asm.pressure_mean_vector(spaces)[:, None])

    Fu = asm.assemble_rhs(mesh, spaces, data, "state", mode, Pi)
    Fz = asm.assemble_rhs(mesh, spaces, data, "adjoint", mode, Pi)
    Gu = asm.divergence_load(spaces, data.g_s, data.g_d)
    Gz = asm.divergence_load(spaces, data.gz_s, data.gz_d)
    J0u = asm.interface_mass_load(spaces, data.state_interface.mass)
    J0z = asm.interface_mass_load(spaces, data.adjoint_interface.mass)

    aM = a * M
    K = sp.bmat([
        [A, aM, B.T, None, C.T, None, None, None],
        [aM, -A, None, -B.T, None, -C.T, None, None],
        [B, None, None, None, None, None, w, None],
        [None, -B, None, None, None, None, None, -w],
        [C, None, None, None, None, None, None, None],
        [None, -C, None, None, None, None, None, None],
        [None, None, w.T, None, None, None, None, None],
        [None, None, None, -w.T, None, None, None, None],
    ], format="csr")
    rhs = np.concatenate([Fu, -Fz, Gu, -Gz, J0u, -J0z, [0.0], [0.0]])

    offsets = _offsets(spaces)
    fixed = np.zeros(K.shape[0], dtype=bool)
    values = np.zeros(K.shape[0])
    ess = spaces.velocity_essential
    for name, bs, bd in (("u", data.u_boundary_s, data.u_boundary_d),
                         ("z", data.z_boundary_s, data.z_boundary_d)):
        s0, s1 = offsets[name]
        fixed[s0:s1] = ess
        values[s0:s1] = asm.boundary_values(spaces, bs, bd)

    parts = dict(A=A, B=B, C=C, M=M, w=w, Fu=Fu, Fz=Fz, Gu=Gu, Gz=Gz,
                 J0u=J0u, J0z=J0z)
    return BlockSystem(scheme, spaces, data, K, rhs, offsets, fixed, values,
                       a, Pi, parts)


def _diagnose(system, Kf):
    """Name the blocks holding empty rows of the reduced matrix, if any."""
    empty = np.flatnonzero(np.diff(Kf.tocsr().indptr) == 0)
    if len(empty) == 0:
        return "no empty rows; rank deficiency not localized"
    full = np.flatnonzero(system.free)[empty]
    names = sorted({n for n, (a, b) in system.offsets.items()
                    for i in full if a <= i < b})
    return "empty rows in block(s) %s" % ", ".join(names)


def _factor_solve(system, Kf, bf, refine=3):
    try:
        lu = spla.splu(Kf)
    except RuntimeError as exc:
        raise SolverError("factorization failed (%s); %s"
                          % (exc, _diagnose(system, Kf))) from None
    x = lu.solve(bf)
    for _ in range(refine):
        res = bf - Kf @ x
        if np.linalg.norm(res) <= 1e-14 * max(np.linalg.norm(bf), 1e-300):
            break
        x = x + lu.solve(res)
    if not np.all(np.isfinite(x)):
        raise SolverError("non-finite solution; %s" % _diagnose(system, Kf))
    return x


def relative_residual(Kf, x, bf):
    nb = np.linalg.norm(bf)
    r = np.linalg.norm(Kf @ x - bf)
    return float(r / nb) if nb > 0 else float(r)


def solve(system):
    """
    Eliminate essential dofs, factorize with sparse LU and solve.

    Raises
    ------
    SolverError
        If the factorization is singular or the result is not finite.
    """
    Kf, bf = system.reduced()
    xf = _factor_solve(system, Kf, bf)
    return Solution(system, system.expand(xf), relative_residual(Kf, xf, bf))


# -- cost functional ---------------------------------------------------------------

def _target_integral(spaces, data, degree=None):
    q = make_quadrature("triangle", degree or spaces.load_quad_degree)
    total = 0.0
    for cells, fn in ((spaces.stokes.cells, data.u_star_s), (spaces.darcy.cells, data.u_star_d)):
        if fn is None:
            continue
        pts = spaces.mesh.to_physical(cells, q.points)
        _, det = spaces.mesh.jacobians(cells)
        v = np.asarray(fn(pts.reshape(-1, 2))).reshape(pts.shape)
        total += np.einsum("cqx,q,c->", v * v, q.weights, det)
    return float(total)


def cost_terms(spaces, data, scheme, Pi=None):
    """Mass matrix, target load and ``||u*||^2`` of the scheme's cost."""
    mesh = spaces.mesh
    if scheme == "robust":
        if Pi is None:
            raise ValueError("the robust cost needs the reconstruction operator")
        M = asm.rt_target_mass(spaces)
        F = asm.volume_load(spaces, data.u_star_s, data.u_star_d, "rt")
    else:
        M = asm.assemble_velocity_mass(mesh, spaces, "plain")
        F = asm.volume_load(spaces, data.u_star_s, data.u_star_d, "velocity")
    return M, F, _target_integral(spaces, data)


def _cost(M, F, c, alpha, v, eta):
    return 0.5 * (v @ (M @ v) - 2.0 * (v @ F) + c) + 0.5 * alpha * (eta @ (M @ eta))


def evaluate_cost(sol, data, scheme=None, Pi=None):
    """
    ``1/2 ||u_h - u*||^2 + alpha/2 ||eta_h||^2`` with ``eta_h = -alpha^(-1/2) z_h``.

    For the robust scheme ``u_h`` and ``z_h`` enter through ``Pi``. The
    integrals use the same quadrature as the load vectors.
    """
    system = sol.system
    scheme = scheme or system.scheme
    Pi = Pi if Pi is not None else system.Pi
    M, F, c = cost_terms(system.spaces, data, scheme, Pi)
    a = 1.0 / np.sqrt(data.alpha)
    if scheme == "robust":
        v, eta = Pi.matrix @ sol.u, -a * (Pi.matrix @ sol.z)
    else:
        v, eta = sol.u, -a * sol.z
    return float(_cost(M, F, c, data.alpha, v, eta))


# -- reduced problem in the control ------------------------------------------------

class StateSolver:
    """
    State equation with the control as an explicit right-hand side.

    ``control`` is a combined velocity vector (classical) or an RT-target
    vector (robust); the adjoint is not involved.
    """

    def __init__(self, system):
        self.system = system
        sel = np.concatenate([np.arange(*system.offsets[n])
                              for n in ("u", "p", "lam_u", "m_p")])
        self.sel = sel
        self.nu = system.offsets["u"][1] - system.offsets["u"][0]
        K = system.matrix[sel][:, sel]
        self.fixed = system.fixed[sel]
        self.values = system.fixed_values[sel]
        free = ~self.fixed
        self.Kf = K[free][:, free].tocsc()
        self.Kfe = K[free][:, self.fixed]
        self.base = system.rhs[sel]
        self.lu = spla.splu(self.Kf)
        spaces = system.spaces
        if system.scheme == "robust":
            self.control_map = (system.Pi.matrix.T @ asm.rt_target_mass(spaces)).tocsr()
        else:
            self.control_map = asm.assemble_velocity_mass(spaces.mesh, spaces, "plain")
        self.cost = cost_terms(spaces, system.data, system.scheme, system.Pi)

    def state(self, control):
        b = self.base.copy()
        b[:self.nu] += self.control_map @ control
        free = ~self.fixed
        bf = b[free] - self.Kfe @ self.values[self.fixed]
        x = self.values.copy()
        x[free] = self.lu.solve(bf)
        return x[:self.nu]

    def reduced_cost(self, control):
        u = self.state(control)
        M, F, c = self.cost
        v = self.system.Pi.matrix @ u if self.system.scheme == "robust" else u
        return float(_cost(M, F, c, self.system.data.alpha, v, np.asarray(control)))

    def control_norm(self, d):
        M = self.cost[0]
        return float(np.sqrt(d @ (M @ d)))


# -- discrete kernel ---------------------------------------------------------------

def admissible_velocity_basis(system):
    """
    Orthonormal basis of discretely divergence-free, interface-constrained
    velocities with homogeneous essential values (dense, columns).
    """
    B, C = system.parts["B"], system.parts["C"]
    free = np.flatnonzero(~system.spaces.velocity_essential)
    BC = sp.vstack([B, C]).tocsc()[:, free].toarray()
    N = null_space(BC)
    out = np.zeros((system.spaces.n_velocity, N.shape[1]))
    out[free] = N
    return out


def random_admissible_velocities(system, count, rng=None, basis=None):
    rng = np.random.default_rng(rng)
    basis = admissible_velocity_basis(system) if basis is None else basis
    return basis @ rng.standard_normal((basis.shape[1], count))


def mean_free_kernel(system, tol=1e-8):
    """
    Kernel of the reduced matrix with the mean rows and columns removed.

    Returns the kernel basis in full layout (essential and mean entries
    zero) and the normalized singular values.
    """
    keep = system.free.copy()
    for name in ("m_p", "m_r"):
        keep[system.block(name)] = False
    K = system.matrix[keep][:, keep].toarray()
    _, s, Vt = np.linalg.svd(K)
    s = s / s[0]
    null = Vt[s < tol].T
    out = np.zeros((system.size, null.shape[1]))
    out[keep] = null
    return out, s
