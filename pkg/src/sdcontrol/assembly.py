"""
Matrices and load vectors of the coupled Stokes-Darcy forms.

All velocity operators act on the combined velocity layout of
:class:`~sdcontrol.spaces.Spaces` (Stokes x, Stokes y, Darcy RT). The
bilinear forms are

* ``a(u, v) = 2 mu (D u, D v)_s + mu (K^-1 u, v)_d
  + alpha1 mu / sqrt(kappa) <u.tau, v.tau>_Gamma``,
* ``b(v, q) = -(div v, q)_s - (div v, q)_d``,
* ``c(v, lam) = <v^s.n^s + v^d.n^d, lam>_Gamma``.

The interface tangent is ``tau = rot(+90 deg) n^s`` and
``kappa = tau . K tau``.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .quadrature import make_quadrature
from .spaces import interpolate_stokes, rt_dofs, tabulate_on_edges


class DataError(ValueError):
    """Invalid physical data (non-positive parameters, K not SPD)."""


@dataclass
class InterfaceResiduals:
    """Interface residual data of one field pair (state or adjoint).

    ``mass`` is the normal-flux jump j0, ``normal_stress`` the normal-stress
    residual j2 and ``slip`` the Beavers-Joseph-Saffman residual j3. All are
    callables of points ``(n, 2)``; ``None`` means zero.
    """
    mass: Optional[Callable] = None
    normal_stress: Optional[Callable] = None
    slip: Optional[Callable] = None


@dataclass
class ProblemData:
    """
    Parameters and data of the optimality system.

    Vector fields map ``(n, 2)`` points to ``(n, 2)`` values, scalar fields
    to ``(n,)``; ``None`` stands for zero. ``K`` is a constant 2x2 array or
    a callable returning ``(n, 2, 2)``.
    """
    mu: float = 1.0
    K: object = field(default_factory=lambda: np.eye(2))
    alpha1: float = 1.0
    alpha: float = 1.0
    f_s: Optional[Callable] = None
    f_d: Optional[Callable] = None
    u_star_s: Optional[Callable] = None
    u_star_d: Optional[Callable] = None
    g_s: Optional[Callable] = None
    g_d: Optional[Callable] = None
    gz_s: Optional[Callable] = None
    gz_d: Optional[Callable] = None
    state_interface: InterfaceResiduals = field(default_factory=InterfaceResiduals)
    adjoint_interface: InterfaceResiduals = field(default_factory=InterfaceResiduals)
    u_boundary_s: Optional[Callable] = None
    u_boundary_d: Optional[Callable] = None
    z_boundary_s: Optional[Callable] = None
    z_boundary_d: Optional[Callable] = None
    K_bounds: Optional[tuple] = None

    def __post_init__(self):
        for name in ("mu", "alpha", "alpha1"):
            if not getattr(self, name) > 0:
                raise DataError("%s must be positive" % name)

    def K_at(self, points):
        points = np.asarray(points).reshape(-1, 2)
        if callable(self.K):
            K = np.asarray(self.K(points), dtype=float).reshape(-1, 2, 2)
        else:
            K = np.broadcast_to(np.asarray(self.K, dtype=float), (len(points), 2, 2))
        self._check_spd(K)
        return K

    def _check_spd(self, K):
        if not np.allclose(K, K.transpose(0, 2, 1), rtol=0, atol=1e-12):
            raise DataError("permeability tensor is not symmetric")
        eig = np.linalg.eigvalsh(K)
        if np.any(eig[:, 0] <= 0):
            raise DataError("permeability tensor is not positive definite")
        if self.K_bounds is not None:
            lo, hi = self.K_bounds
            if np.any(eig[:, 0] < lo * (1 - 1e-12)) or np.any(eig[:, 1] > hi * (1 + 1e-12)):
                raise DataError("permeability eigenvalues outside [K_L, K_U]")

    def kappa(self, points, tau):
        K = self.K_at(points)
        return np.einsum("x,nxy,y->n", tau, K, tau)

    @property
    def coupling(self):
        """The factor alpha^(-1/2) of the rescaled optimality system."""
        return 1.0 / np.sqrt(self.alpha)


def interface_tangent(mesh):
    n = mesh.interface_normal
    return np.array([-n[1], n[0]])


def _eval(fn, pts, vector):
    shape = pts.shape[:-1] + ((2,) if vector else ())
    if fn is None:
        return np.zeros(shape)
    return np.asarray(fn(pts.reshape(-1, 2)), dtype=float).reshape(shape)


def _coo(rows, cols, vals, shape):
    r = np.broadcast_to(rows[:, :, None], vals.shape).ravel()
    c = np.broadcast_to(cols[:, None, :], vals.shape).ravel()
    return sp.coo_matrix((vals.ravel(), (r, c)), shape=shape).tocsr()


def _tri_rule(spaces, degree):
    return make_quadrature("triangle", degree or spaces.quad_degree)


def _edge_rule(spaces, degree):
    return make_quadrature("edge", degree or spaces.edge_quad_degree)


def _load_rule(spaces, degree, domain="triangle"):
    return make_quadrature(domain, degree or spaces.load_quad_degree)


def _gamma(mesh):
    from .mesh import interface_edges
    return interface_edges(mesh)


# -- element matrices ------------------------------------------------------------

def stokes_strain_matrix(spaces, mu=1.0, degree=None):
    """``2 mu (D u, D v)_s`` on the Stokes velocity space."""
    V = spaces.stokes
    q = _tri_rule(spaces, degree)
    tab = V.tabulate(q.points)
    _, det = spaces.mesh.jacobians(V.cells)
    D = 0.5 * (tab.grads + tab.grads.swapaxes(-1, -2))
    loc = 2.0 * mu * np.einsum("ciqab,cjqab,q,c->cij", D, D, q.weights, det)
    return _coo(V.cell_dofs, V.cell_dofs, loc, (V.ndof, V.ndof))


def interface_slip_matrix(spaces, data, degree=None):
    """``alpha1 mu / sqrt(kappa) <u.tau, v.tau>_Gamma`` on the Stokes space."""
    mesh, V = spaces.mesh, spaces.stokes
    gam = _gamma(mesh)
    if len(gam) == 0:
        return sp.csr_matrix((V.ndof, V.ndof))
    q = _edge_rule(spaces, degree)
    tau = interface_tangent(mesh)
    tab = tabulate_on_edges(V, gam.edges, gam.stokes_tris, q.points[:, 1])
    coef = data.alpha1 * data.mu / np.sqrt(data.kappa(tab.points, tau))
    coef = coef.reshape(len(gam), -1)
    w = q.weights[None, :] * mesh.edge_lengths[gam.edges][:, None] * coef
    vt = np.einsum("elqx,x->elq", tab.values, tau)
    loc = np.einsum("eiq,ejq,eq->eij", vt, vt, w)
    dofs = V.cell_dofs[V.local_index[gam.stokes_tris]]
    return _coo(dofs, dofs, loc, (V.ndof, V.ndof))


def rt_mass_matrix(space, data=None, degree=None, weighted=True):
    """``mu (K^-1 u, v)`` on an RT space, or the plain L2 mass if unweighted."""
    q = make_quadrature("triangle", degree or 2 * space.k + 2)
    tab = space.tabulate(q.points)
    _, det = space.mesh.jacobians(space.cells)
    if weighted and data is not None:
        Kinv = np.linalg.inv(data.K_at(tab.points)).reshape(tab.points.shape[:2] + (2, 2))
        loc = data.mu * np.einsum("ciqx,cqxy,cjqy,q,c->cij", tab.values, Kinv,
                                  tab.values, q.weights, det)
    else:
        loc = np.einsum("ciqx,cjqx,q,c->cij", tab.values, tab.values, q.weights, det)
    return _coo(space.cell_dofs, space.cell_dofs, loc, (space.ndof, space.ndof))


def stokes_mass_matrix(spaces, degree=None):
    V = spaces.stokes
    q = _tri_rule(spaces, degree)
    tab = V.tabulate(q.points)
    _, det = spaces.mesh.jacobians(V.cells)
    loc = np.einsum("ciqx,cjqx,q,c->cij", tab.values, tab.values, q.weights, det)
    return _coo(V.cell_dofs, V.cell_dofs, loc, (V.ndof, V.ndof))


# -- global operators ----------------------------------------------------------------

def assemble_a(mesh, spaces, data, degree=None):
    """
    Velocity operator ``a`` on the combined velocity space.

    Raises :class:`DataError` if ``K`` is not SPD at some quadrature point.
    """
    As = stokes_strain_matrix(spaces, data.mu, degree) \
        + interface_slip_matrix(spaces, data, degree)
    Ad = rt_mass_matrix(spaces.darcy, data, degree)
    return sp.block_diag([As, Ad], format="csr")


def assemble_b(mesh, spaces, degree=None):
    """Divergence operator ``b``: pressure dofs x combined velocity dofs."""
    q = _tri_rule(spaces, degree)
    P = spaces.pressure
    blocks = []
    for V in (spaces.stokes, spaces.darcy):
        tab = V.tabulate(q.points)
        ptab = P.tabulate(q.points, P.local_index[V.cells])
        _, det = mesh.jacobians(V.cells)
        loc = -np.einsum("ciq,cjq,q,c->cij", ptab.values, tab.div, q.weights, det)
        blocks.append(_coo(P.cell_dofs[V.cells], V.cell_dofs, loc, (P.ndof, V.ndof)))
    return sp.hstack(blocks, format="csr")


def assemble_interface_constraint(mesh, spaces, degree=None):
    """Normal-flux jump pairing ``c``: trace dofs x combined velocity dofs."""
    gam = _gamma(mesh)
    T = spaces.trace
    q = _edge_rule(spaces, degree)
    s = q.points[:, 1]
    lam = T.tabulate(q.points).values  # (ne, 2, nq)
    w = q.weights[None, :] * mesh.edge_lengths[gam.edges][:, None]
    tdofs = T.cell_dofs[T.local_index[gam.edges]]
    blocks = []
    for V, cells, sign in ((spaces.stokes, gam.stokes_tris, 1.0),
                           (spaces.darcy, gam.darcy_tris, -1.0)):
        tab = tabulate_on_edges(V, gam.edges, cells, s)
        vn = sign * np.einsum("elqx,ex->elq", tab.values, gam.normals)
        loc = np.einsum("eiq,ejq,eq->eij", lam, vn, w)
        blocks.append(_coo(tdofs, V.cell_dofs[V.local_index[cells]], loc,
                           (T.ndof, V.ndof)))
    return sp.hstack(blocks, format="csr")


def assemble_velocity_mass(mesh, spaces, mode="plain", Pi=None, degree=None):
    """
    L2 velocity mass for the coupling and cost terms.

    ``plain`` is the mass matrix of the combined velocity space;
    ``reconstructed`` is ``Pi^T M_RT Pi`` with ``M_RT`` the RT mass matrix on
    the reconstruction target.
    """
    if mode == "plain":
        return sp.block_diag([stokes_mass_matrix(spaces, degree),
                              rt_mass_matrix(spaces.darcy, degree=degree, weighted=False)],
                             format="csr")
    if mode != "reconstructed":
        raise ValueError("unknown mass mode %r" % (mode,))
    if Pi is None:
        raise ValueError("reconstructed mass needs the reconstruction operator")
    M = rt_target_mass(spaces, degree)
    P = _matrix(Pi)
    return (P.T @ M @ P).tocsr()


def rt_target_mass(spaces, degree=None):
    return sp.block_diag([rt_mass_matrix(spaces.stokes_rt, degree=degree, weighted=False),
                          rt_mass_matrix(spaces.darcy, degree=degree, weighted=False)],
                         format="csr")


def pressure_mean_vector(spaces):
    """Integrals of the pressure basis functions (area / 3 each)."""
    P = spaces.pressure
    w = np.zeros(P.ndof)
    w[P.cell_dofs] = spaces.mesh.areas()[P.cells, None] / 3.0
    return w


def _matrix(Pi):
    return getattr(Pi, "matrix", Pi)


# -- load vectors ----------------------------------------------------------------------

def volume_load(spaces, f_s, f_d, target="velocity", degree=None):
    """``(f, psi_i)`` over the combined velocity or the RT target space."""
    q = _load_rule(spaces, degree)
    Vs = spaces.stokes if target == "velocity" else spaces.stokes_rt
    parts = []
    for V, fn in ((Vs, f_s), (spaces.darcy, f_d)):
        out = np.zeros(V.ndof)
        if fn is not None:
            tab = V.tabulate(q.points)
            _, det = spaces.mesh.jacobians(V.cells)
            fv = _eval(fn, tab.points, True)
            loc = np.einsum("ciqx,cqx,q,c->ci", tab.values, fv, q.weights, det)
            np.add.at(out, V.cell_dofs, loc)
        parts.append(out)
    return np.concatenate(parts)


def interface_residual_load(spaces, data, which="state", degree=None):
    """
    Interface residual loads ``-<j2, v.n^s> + alpha1 mu/sqrt(kappa) <j3, v.tau>``.

    These vanish for data satisfying the interface conditions and only
    serve manufactured solutions.
    """
    mesh, V = spaces.mesh, spaces.stokes
    res = data.state_interface if which == "state" else data.adjoint_interface
    out = np.zeros(spaces.n_velocity)
    if res.normal_stress is None and res.slip is None:
        return out
    gam = _gamma(mesh)
    q = _load_rule(spaces, degree, "edge")
    tab = tabulate_on_edges(V, gam.edges, gam.stokes_tris, q.points[:, 1])
    tau = interface_tangent(mesh)
    w = q.weights[None, :] * mesh.edge_lengths[gam.edges][:, None]
    vn = np.einsum("elqx,ex->elq", tab.values, gam.normals)
    vt = np.einsum("elqx,x->elq", tab.values, tau)
    j2 = _eval(res.normal_stress, tab.points, False)
    j3 = _eval(res.slip, tab.points, False)
    coef = (data.alpha1 * data.mu / np.sqrt(data.kappa(tab.points, tau))).reshape(j3.shape)
    loc = np.einsum("elq,eq->el", -vn, j2 * w) + np.einsum("elq,eq->el", vt, coef * j3 * w)
    np.add.at(out, V.cell_dofs[V.local_index[gam.stokes_tris]], loc)
    return out


def assemble_rhs(mesh, spaces, data, which="state", test_mode="plain", Pi=None,
                 degree=None, edge_degree=None):
    """
    Momentum right-hand side of the state or adjoint equation.

    The volume source is ``f`` for the state and ``-alpha^(-1/2) u*`` for
    the adjoint. In ``reconstructed`` mode it is tested against ``Pi psi_i``;
    interface residual loads always use the plain trace.
    """
    if which not in ("state", "adjoint"):
        raise ValueError("which must be 'state' or 'adjoint'")
    if which == "state":
        src_s, src_d = data.f_s, data.f_d
    else:
        c = -data.coupling
        src_s = _scaled(data.u_star_s, c)
        src_d = _scaled(data.u_star_d, c)
    if test_mode == "plain":
        load = volume_load(spaces, src_s, src_d, "velocity", degree)
    elif test_mode == "reconstructed":
        if Pi is None:
            raise ValueError("reconstructed test mode needs the reconstruction operator")
        load = _matrix(Pi).T @ volume_load(spaces, src_s, src_d, "rt", degree)
    else:
        raise ValueError("unknown test mode %r" % (test_mode,))
    return load + interface_residual_load(spaces, data, which, edge_degree)


def _scaled(fn, c):
    if fn is None:
        return None
    return lambda x: c * np.asarray(fn(x))


def divergence_load(spaces, g_s, g_d, degree=None):
    """``-(g, phi_i)`` so that ``B u = G`` encodes ``div u = g``."""
    q = _load_rule(spaces, degree)
    P = spaces.pressure
    out = np.zeros(P.ndof)
    for cells, fn in ((spaces.stokes.cells, g_s), (spaces.darcy.cells, g_d)):
        if fn is None:
            continue
        rows = P.local_index[cells]
        tab = P.tabulate(q.points, rows)
        _, det = spaces.mesh.jacobians(cells)
        gv = _eval(fn, tab.points, False)
        loc = -np.einsum("ciq,cq,q,c->ci", tab.values, gv, q.weights, det)
        np.add.at(out, P.cell_dofs[rows], loc)
    return out


def interface_mass_load(spaces, j0, degree=None):
    """``<j0, lam_i>_Gamma`` for the interface constraint rows."""
    T = spaces.trace
    out = np.zeros(T.ndof)
    if j0 is None:
        return out
    mesh = spaces.mesh
    gam = _gamma(mesh)
    q = _load_rule(spaces, degree, "edge")
    p = mesh.vertices
    a = p[mesh.edges[gam.edges, 0]]
    b = p[mesh.edges[gam.edges, 1]]
    pts = a[:, None, :] * q.points[None, :, :1] + b[:, None, :] * q.points[None, :, 1:]
    jv = _eval(j0, pts, False)
    w = q.weights[None, :] * mesh.edge_lengths[gam.edges][:, None]
    loc = np.einsum("eiq,eq->ei", T.tabulate(q.points).values, jv * w)
    np.add.at(out, T.cell_dofs[T.local_index[gam.edges]], loc)
    return out


def boundary_values(spaces, field_s, field_d):
    """
    Combined velocity vector holding essential boundary values.

    Stokes values come from nodal interpolation on the outer Stokes
    boundary, Darcy values from normal moments on the outer Darcy boundary.
    Non-essential entries are zero.
    """
    us = np.zeros(spaces.stokes.ndof)
    ud = np.zeros(spaces.darcy.ndof)
    if field_s is not None:
        us = np.where(spaces.stokes.essential, interpolate_stokes(spaces.stokes, field_s), 0.0)
    if field_d is not None:
        ud = np.where(spaces.darcy.essential, rt_dofs(spaces.darcy, field_d), 0.0)
    return np.concatenate([us, ud])
