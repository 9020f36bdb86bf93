"""
Reconstruction of discrete velocities into RT1 and RT1 interpolation.

The reconstruction maps a combined velocity vector to RT1 coefficients on
both subdomains. On each triangle its value has the same edge normal
moments against P1(e) and the same cell moments against constants as the
input field. Because the RT1 degrees of freedom are exactly these moments,
no local solve is needed: the matrix rows are the functionals applied to
the velocity basis.
"""

import numpy as np
import scipy.sparse as sp

from .quadrature import make_quadrature
from .spaces import (RAVIART_THOMAS, FeFunction, build_space, rt_dofs,
                     tabulate_on_edges)
from .mesh import interface_edges

_DROP = 1e-14


class ReconstructionOperator:
    """
    Sparse reconstruction matrix ``(n_rt, n_velocity)``.

    Rows follow the layout ``[StokesRT, Darcy]``, columns the combined
    velocity layout. The Darcy block is the identity.
    """

    def __init__(self, spaces, matrix):
        self.spaces = spaces
        self.matrix = matrix.tocsr()

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, v):
        return self.matrix @ v

    def apply(self, v):
        return self.matrix @ np.asarray(v)

    @property
    def T(self):
        return self.matrix.T

    def stokes_block(self):
        ns, nrs = self.spaces.stokes.ndof, self.spaces.stokes_rt.ndof
        return self.matrix[:nrs, :ns]

    def darcy_block(self):
        ns, nrs = self.spaces.stokes.ndof, self.spaces.stokes_rt.ndof
        return self.matrix[nrs:, ns:]


def _stokes_block(spaces, degree=8):
    mesh = spaces.mesh
    V, R = spaces.stokes, spaces.stokes_rt
    if not np.array_equal(V.cells, R.cells):
        raise RuntimeError("Stokes velocity and RT spaces disagree on cells")
    eq = make_quadrature("edge", degree)
    tq = make_quadrature("triangle", degree)
    rows, cols, vals = [], [], []

    # edge normal moments, taken on one owner cell per edge
    edge_ids = R.extra["edge_ids"]
    owner = mesh.edge_tris[edge_ids, 0]
    if np.any(V.local_index[owner] < 0):
        raise RuntimeError("edge owner outside the Stokes subdomain")
    s = eq.points[:, 1]
    tab = tabulate_on_edges(V, edge_ids, owner, s)
    vn = np.einsum("elqx,ex->elq", tab.values, mesh.edge_normals[edge_ids])
    w = eq.weights[None, :] * mesh.edge_lengths[edge_ids][:, None]
    cdofs = V.cell_dofs[V.local_index[owner]]
    for slot, lam in ((0, 1.0 - s), (1, s)):
        m = np.einsum("elq,eq->el", vn, w * lam[None, :])
        rows.append(np.repeat(2 * np.arange(len(edge_ids)) + slot, V.nloc))
        cols.append(cdofs.ravel())
        vals.append(m.ravel())

    # interior moments: J^{-1} times the physical cell integral
    J, det = mesh.jacobians(V.cells)
    vt = V.tabulate(tq.points)
    integral = np.einsum("clqx,q,c->clx", vt.values, tq.weights, det)
    ref = np.einsum("cyx,clx->cly", np.linalg.inv(J), integral)
    for comp in (0, 1):
        rows.append(np.repeat(R.cell_dofs[:, 6 + comp], V.nloc))
        cols.append(V.cell_dofs.ravel())
        vals.append(ref[:, :, comp].ravel())

    rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    keep = np.abs(vals) > _DROP * np.abs(vals).max()
    return sp.coo_matrix((vals[keep], (rows[keep], cols[keep])),
                         shape=(R.ndof, V.ndof)).tocsr()


def build_reconstruction(mesh, spaces):
    """
    Assemble the reconstruction operator on ``spaces``.

    Parameters
    ----------
    mesh : Mesh
        Must be the mesh the spaces were built on.
    spaces : Spaces

    Returns
    -------
    ReconstructionOperator
    """
    if spaces.mesh is not mesh:
        raise ValueError("spaces were built on a different mesh")
    Ps = _stokes_block(spaces)
    Pd = sp.identity(spaces.darcy.ndof, format="csr")
    return ReconstructionOperator(spaces, sp.block_diag([Ps, Pd], format="csr"))


def rt_interpolate(mesh, field, degree=8, space=None):
    """
    RT1 interpolant of a vector field on all triangles of ``mesh``.

    ``field`` maps points ``(n, 2)`` to values ``(n, 2)``. The result lives
    in a Raviart-Thomas space over both subdomains.
    """
    if space is None:
        space = build_space(mesh, RAVIART_THOMAS)
    return FeFunction(space, rt_dofs(space, field, degree))


def l2_error(fe, field, degree=8):
    """L2 norm of ``fe - field`` over the support of ``fe.space``."""
    q = make_quadrature("triangle", degree)
    sp_ = fe.space
    tab = sp_.tabulate(q.points)
    _, det = sp_.mesh.jacobians(sp_.cells)
    uh = np.einsum("cl,clqx->cqx", fe.coeffs[sp_.cell_dofs], tab.values)
    ex = np.asarray(field(tab.points.reshape(-1, 2))).reshape(uh.shape)
    return float(np.sqrt(np.einsum("cqx,q,c->", (uh - ex) ** 2, q.weights, det)))


def divergence_l2(fe, degree=8):
    """L2 norm of the elementwise divergence of an RT function."""
    q = make_quadrature("triangle", degree)
    sp_ = fe.space
    tab = sp_.tabulate(q.points)
    _, det = sp_.mesh.jacobians(sp_.cells)
    d = np.einsum("cl,clq->cq", fe.coeffs[sp_.cell_dofs], tab.div)
    return float(np.sqrt(np.einsum("cq,q,c->", d ** 2, q.weights, det)))


# -- diagnostics on reconstructed fields ----------------------------------------

def rt_divergence(spaces, w, degree=6):
    """Elementwise divergence of an RT-target vector at quadrature points."""
    q = make_quadrature("triangle", degree)
    ws, wd = spaces.split_rt(w)
    out = []
    for R, c in ((spaces.stokes_rt, ws), (spaces.darcy, wd)):
        tab = R.tabulate(q.points)
        out.append(np.einsum("cl,clq->cq", c[R.cell_dofs], tab.div).ravel())
    return np.concatenate(out)


def rt_interface_jump(spaces, w, degree=6):
    """``w^s.n^s + w^d.n^d`` at Gamma quadrature points of an RT-target vector."""
    mesh = spaces.mesh
    gam = interface_edges(mesh)
    s = make_quadrature("edge", degree).points[:, 1]
    ws, wd = spaces.split_rt(w)
    jump = 0.0
    for R, c, cells, sign in ((spaces.stokes_rt, ws, gam.stokes_tris, 1.0),
                              (spaces.darcy, wd, gam.darcy_tris, -1.0)):
        tab = tabulate_on_edges(R, gam.edges, cells, s)
        v = np.einsum("el,elqx->eqx", c[R.cell_dofs[R.local_index[cells]]], tab.values)
        jump = jump + sign * np.einsum("eqx,ex->eq", v, gam.normals)
    return np.asarray(jump).ravel()


def consistency_functional(spaces, phi_s, phi_d, psi, reconstructed=False,
                           degree=10):
    """
    Evaluate ``b(psi, phi) - <psi^s.n^s + psi^d.n^d, phi^d>_Gamma``.

    Parameters
    ----------
    spaces : Spaces
    phi_s, phi_d : callable
        Scalar fields on the Stokes and Darcy subdomains.
    psi : array_like
        Combined velocity vector, or an RT-target vector when
        ``reconstructed`` is true.
    """
    mesh = spaces.mesh
    psi = np.asarray(psi, dtype=float)
    if reconstructed:
        Vs = spaces.stokes_rt
        cs, cd = spaces.split_rt(psi)
    else:
        Vs = spaces.stokes
        cs, cd = spaces.split_velocity(psi)
    q = make_quadrature("triangle", degree)
    total = 0.0
    for V, c, phi in ((Vs, cs, phi_s), (spaces.darcy, cd, phi_d)):
        tab = V.tabulate(q.points)
        _, det = mesh.jacobians(V.cells)
        div = np.einsum("cl,clq->cq", c[V.cell_dofs], tab.div)
        ph = np.asarray(phi(tab.points.reshape(-1, 2))).reshape(div.shape)
        total -= np.einsum("cq,cq,q,c->", div, ph, q.weights, det)

    gam = interface_edges(mesh)
    eq = make_quadrature("edge", degree)
    s = eq.points[:, 1]
    w = eq.weights[None, :] * mesh.edge_lengths[gam.edges][:, None]
    jump = 0.0
    pts = None
    for V, c, cells, sign in ((Vs, cs, gam.stokes_tris, 1.0),
                              (spaces.darcy, cd, gam.darcy_tris, -1.0)):
        tab = tabulate_on_edges(V, gam.edges, cells, s)
        v = np.einsum("el,elqx->eqx", c[V.cell_dofs[V.local_index[cells]]], tab.values)
        jump = jump + sign * np.einsum("eqx,ex->eq", v, gam.normals)
        pts = tab.points
    pd = np.asarray(phi_d(pts.reshape(-1, 2))).reshape(w.shape)
    total -= float(np.sum(jump * pd * w))
    return float(total)
