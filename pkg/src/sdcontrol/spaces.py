"""
Finite element spaces for the coupled problem (polynomial order k = 2).

Four spaces are used:

* ``StokesVelocity`` -- continuous P2 enriched with the cubic cell bubble,
  per velocity component, on the Stokes triangles;
* ``Pressure`` -- discontinuous P1 on all triangles;
* ``DarcyVelocity`` -- Raviart-Thomas RT1 on the Darcy triangles;
* ``InterfaceTrace`` -- discontinuous P1 on interface edges.

A fifth space, ``StokesRT``, is RT1 on the Stokes triangles; it is the
target of the velocity reconstruction.

RT1 degrees of freedom on an edge are the normal moments against the two
barycentric coordinates of the edge endpoints, taken with the edge's stored
normal and ordered by ascending global vertex index. The two interior
degrees of freedom are the cell moments against the constant vector fields.
Reference functions are mapped by the contravariant Piola transform.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import mesh as msh
from .quadrature import make_quadrature

STOKES_VELOCITY = "StokesVelocity"
PRESSURE = "Pressure"
DARCY_VELOCITY = "DarcyVelocity"
INTERFACE_TRACE = "InterfaceTrace"
STOKES_RT = "StokesRT"
RAVIART_THOMAS = "RaviartThomas"

# reference triangle (0,0), (1,0), (0,1); edge i joins vertices i+1, i+2
REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
REF_EDGE_VERTICES = np.array([[1, 2], [2, 0], [0, 1]])
REF_NORMALS = np.array([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
REF_NORMALS /= np.linalg.norm(REF_NORMALS, axis=1)[:, None]
REF_EDGE_LENGTHS = np.array([np.sqrt(2.0), 1.0, 1.0])


def _bary(xhat):
    xhat = np.atleast_2d(xhat)
    return np.column_stack([1.0 - xhat[:, 0] - xhat[:, 1], xhat[:, 0], xhat[:, 1]])


_BARY_GRAD = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


# -- reference bases ---------------------------------------------------------

def p1_reference(xhat):
    """Values ``(3, n)`` and gradients ``(3, n, 2)`` of the P1 basis."""
    lam = _bary(xhat)
    n = len(lam)
    return lam.T.copy(), np.broadcast_to(_BARY_GRAD[:, None, :], (3, n, 2)).copy()


def p2_bubble_reference(xhat):
    """
    Values ``(7, n)`` and gradients ``(7, n, 2)`` of the P2 + bubble basis.

    Ordering: three vertex functions, three edge-midpoint functions (edge i
    opposite vertex i) and the bubble ``27 l0 l1 l2``. The six P2 functions
    are the plain Lagrange basis, so they sum to one.
    """
    lam = _bary(xhat)
    g = _BARY_GRAD
    n = len(lam)
    val = np.empty((7, n))
    grad = np.empty((7, n, 2))
    for i in range(3):
        val[i] = lam[:, i] * (2.0 * lam[:, i] - 1.0)
        grad[i] = (4.0 * lam[:, i] - 1.0)[:, None] * g[i]
    for i in range(3):
        a, b = REF_EDGE_VERTICES[i]
        val[3 + i] = 4.0 * lam[:, a] * lam[:, b]
        grad[3 + i] = 4.0 * (lam[:, b][:, None] * g[a] + lam[:, a][:, None] * g[b])
    val[6] = 27.0 * lam[:, 0] * lam[:, 1] * lam[:, 2]
    grad[6] = 27.0 * (lam[:, 1] * lam[:, 2])[:, None] * g[0] \
        + 27.0 * (lam[:, 0] * lam[:, 2])[:, None] * g[1] \
        + 27.0 * (lam[:, 0] * lam[:, 1])[:, None] * g[2]
    return val, grad


def _rt1_prime(xhat):
    """Monomial spanning set of RT1: values (8, n, 2) and divergences (8, n)."""
    x, y = xhat[:, 0], xhat[:, 1]
    one, zero = np.ones_like(x), np.zeros_like(x)
    val = np.stack([
        np.stack([one, zero], -1), np.stack([x, zero], -1),
        np.stack([y, zero], -1), np.stack([zero, one], -1),
        np.stack([zero, x], -1), np.stack([zero, y], -1),
        np.stack([x * x, x * y], -1), np.stack([x * y, y * y], -1),
    ])
    div = np.stack([zero, one, zero, zero, zero, one, 3.0 * x, 3.0 * y])
    return val, div


def reference_rt1_dofs(func):
    """
    Apply the 8 reference RT1 functionals to a vector field.

    ``func`` maps reference points ``(n, 2)`` to values ``(m, n, 2)``; the
    result has shape ``(8, m)``.
    """
    eq = make_quadrature("edge", 6)
    tq = make_quadrature("triangle", 6)
    rows = []
    for i in range(3):
        a, b = REF_EDGE_VERTICES[i]
        pts = eq.points[:, :1] * REF_VERTICES[a] + eq.points[:, 1:] * REF_VERTICES[b]
        vn = func(pts) @ REF_NORMALS[i]
        w = eq.weights * REF_EDGE_LENGTHS[i]
        rows.append(vn @ (w * eq.points[:, 0]))
        rows.append(vn @ (w * eq.points[:, 1]))
    pts = tq.points[:, 1:]
    v = func(pts)
    rows.append(v[..., 0] @ tq.weights)
    rows.append(v[..., 1] @ tq.weights)
    return np.array(rows)


@lru_cache(maxsize=None)
def _rt1_coefficients():
    D = reference_rt1_dofs(lambda p: _rt1_prime(p)[0])
    return np.linalg.inv(D)  # column l holds the prime coefficients of basis l


def rt1_reference(xhat):
    """Values ``(8, n, 2)`` and divergences ``(8, n)`` of the reference RT1 basis."""
    xhat = np.atleast_2d(xhat)
    C = _rt1_coefficients()
    pv, pd = _rt1_prime(xhat)
    return np.einsum("ml,mnx->lnx", C, pv), np.einsum("ml,mn->ln", C, pd)


# -- spaces --------------------------------------------------------------------

@dataclass
class Tabulation:
    """Basis data on a set of cells at common barycentric points."""
    values: np.ndarray
    grads: np.ndarray = None
    div: np.ndarray = None
    points: np.ndarray = None  # physical points (nc, nq, 2)


class Space:
    """
    A finite element space on a subset of cells of a mesh.

    Attributes
    ----------
    kind : str
    mesh : Mesh
    cells : (nc,) int array of triangle ids (interface edge ids for traces)
    cell_dofs : (nc, nloc) global dof indices
    cell_signs : (nc, nloc) orientation signs (+1/-1)
    ndof : int
    essential : (ndof,) bool mask of dofs fixed by essential conditions
    """

    def __init__(self, kind, mesh, cells, cell_dofs, cell_signs, ndof,
                 essential, k=2):
        self.kind = kind
        self.mesh = mesh
        self.cells = np.asarray(cells)
        self.cell_dofs = np.asarray(cell_dofs)
        self.cell_signs = np.asarray(cell_signs, dtype=float)
        self.ndof = int(ndof)
        self.essential = np.asarray(essential, dtype=bool)
        self.k = k
        self.local_index = -np.ones(
            mesh.num_edges if kind == INTERFACE_TRACE else mesh.num_triangles,
            dtype=np.int64)
        self.local_index[self.cells] = np.arange(len(self.cells))
        self.extra = {}

    @property
    def nloc(self):
        return self.cell_dofs.shape[1]

    def __repr__(self):
        return "Space(%s, ndof=%d)" % (self.kind, self.ndof)

    def tabulate(self, bary, rows=None):
        """
        Evaluate local basis functions at barycentric points.

        ``rows`` selects entries of ``self.cells`` (default: all). Signs are
        already applied, so ``sum_l c[cell_dofs[l]] * values[l]`` is the
        field on the cell. For traces ``bary`` has shape ``(nq, 2)``.
        """
        bary = np.atleast_2d(np.asarray(bary, dtype=float))
        rows = np.arange(len(self.cells)) if rows is None else np.asarray(rows)
        signs = self.cell_signs[rows]
        if self.kind == INTERFACE_TRACE:
            val = np.broadcast_to(bary.T[None], (len(rows), 2, len(bary)))
            return Tabulation(val * signs[:, :, None])
        cells = self.cells[rows]
        xhat = bary[:, 1:]
        J, det = self.mesh.jacobians(cells)
        pts = self.mesh.to_physical(cells, bary)
        if self.kind == PRESSURE:
            v, g = p1_reference(xhat)
            Jit = np.linalg.inv(J).transpose(0, 2, 1)
            grads = np.einsum("cxy,lqy->clqx", Jit, g)
            vals = np.broadcast_to(v[None], (len(cells),) + v.shape)
            return Tabulation(vals * signs[:, :, None],
                              grads * signs[:, :, None, None], points=pts)
        if self.kind == STOKES_VELOCITY:
            v, g = p2_bubble_reference(xhat)
            Jit = np.linalg.inv(J).transpose(0, 2, 1)
            sg = np.einsum("cxy,lqy->clqx", Jit, g)  # (nc, 7, nq, 2)
            nc, nq = len(cells), len(bary)
            vals = np.zeros((nc, 14, nq, 2))
            grads = np.zeros((nc, 14, nq, 2, 2))
            vals[:, :7, :, 0] = v[None]
            vals[:, 7:, :, 1] = v[None]
            grads[:, :7, :, 0, :] = sg
            grads[:, 7:, :, 1, :] = sg
            div = np.concatenate([sg[..., 0], sg[..., 1]], axis=1)
            return Tabulation(vals, grads, div, pts)
        # Raviart-Thomas: contravariant Piola map
        v, d = rt1_reference(xhat)
        vals = np.einsum("cxy,lqy->clqx", J, v) / det[:, None, None, None]
        div = d[None] / det[:, None, None]
        return Tabulation(vals * signs[:, :, None, None],
                          div=div * signs[:, :, None], points=pts)

    def local_field(self, coeffs, bary, rows=None):
        """Values of a coefficient vector at barycentric points, per cell."""
        tab = self.tabulate(bary, rows)
        rows = np.arange(len(self.cells)) if rows is None else np.asarray(rows)
        c = np.asarray(coeffs)[self.cell_dofs[rows]]
        if tab.values.ndim == 4:
            return np.einsum("cl,clqx->cqx", c, tab.values)
        return np.einsum("cl,clq->cq", c, tab.values)


def eval_basis(space, triangle, point):
    """
    Local basis data of ``space`` on one triangle at one barycentric point.

    Returns a :class:`Tabulation` with the point axis squeezed out.
    """
    row = space.local_index[triangle]
    if row < 0:
        raise ValueError("triangle %d is not in %s" % (triangle, space.kind))
    tab = space.tabulate(np.atleast_2d(point), [row])
    squeeze = lambda a: None if a is None else a[0][:, 0]
    return Tabulation(squeeze(tab.values), squeeze(tab.grads), squeeze(tab.div))


def dof_map(space, triangle):
    """Global dof indices and orientation signs of ``space`` on ``triangle``."""
    row = space.local_index[triangle]
    if row < 0:
        raise ValueError("entity %d is not in %s" % (triangle, space.kind))
    return space.cell_dofs[row].copy(), space.cell_signs[row].copy()


def _stokes_velocity_space(mesh):
    cells = mesh.cells(msh.STOKES)
    tri = mesh.triangles[cells]
    vert_ids, vmap = np.unique(tri, return_inverse=True)
    vmap = vmap.reshape(tri.shape)
    edge_ids, emap = np.unique(mesh.tri_edges[cells], return_inverse=True)
    emap = emap.reshape(tri.shape)
    nv, ne, nc = len(vert_ids), len(edge_ids), len(cells)
    nscalar = nv + ne + nc
    scalar = np.column_stack([vmap, nv + emap, nv + ne + np.arange(nc)])
    dofs = np.hstack([scalar, nscalar + scalar])

    ess_scalar = np.zeros(nscalar, dtype=bool)
    bnd = edge_ids[mesh.edge_tag[edge_ids] == msh.STOKES_BOUNDARY]
    bverts = np.unique(mesh.edges[bnd])
    ess_scalar[np.searchsorted(vert_ids, bverts)] = True
    ess_scalar[nv + np.searchsorted(edge_ids, bnd)] = True
    space = Space(STOKES_VELOCITY, mesh, cells, dofs, np.ones(dofs.shape),
                  2 * nscalar, np.concatenate([ess_scalar, ess_scalar]))
    space.extra.update(vertex_ids=vert_ids, edge_ids=edge_ids,
                       nscalar=nscalar)
    return space


def _rt_space(mesh, subdomain, kind):
    cells = np.arange(mesh.num_triangles) if subdomain is None else mesh.cells(subdomain)
    tri = mesh.triangles[cells]
    edge_ids, emap = np.unique(mesh.tri_edges[cells], return_inverse=True)
    emap = emap.reshape(tri.shape)
    ne, nc = len(edge_ids), len(cells)
    dofs = np.empty((nc, 8), dtype=np.int64)
    signs = np.empty((nc, 8))
    gl_edges = mesh.tri_edges[cells]
    for i in range(3):
        first = tri[:, (i + 1) % 3]
        lower = mesh.edges[gl_edges[:, i], 0]
        slot0 = np.where(first == lower, 0, 1)
        dofs[:, 2 * i] = 2 * emap[:, i] + slot0
        dofs[:, 2 * i + 1] = 2 * emap[:, i] + 1 - slot0
        s = mesh.tri_edge_sign[cells, i]
        signs[:, 2 * i] = s
        signs[:, 2 * i + 1] = s
    dofs[:, 6] = 2 * ne + 2 * np.arange(nc)
    dofs[:, 7] = 2 * ne + 2 * np.arange(nc) + 1
    signs[:, 6:] = 1.0
    ess = np.zeros(2 * ne + 2 * nc, dtype=bool)
    if kind == DARCY_VELOCITY:
        b = np.flatnonzero(mesh.edge_tag[edge_ids] == msh.DARCY_BOUNDARY)
        ess[2 * b] = True
        ess[2 * b + 1] = True
    space = Space(kind, mesh, cells, dofs, signs, 2 * ne + 2 * nc, ess)
    space.extra.update(edge_ids=edge_ids)
    return space


def _pressure_space(mesh):
    nt = mesh.num_triangles
    dofs = np.arange(3 * nt).reshape(nt, 3)
    return Space(PRESSURE, mesh, np.arange(nt), dofs, np.ones(dofs.shape),
                 3 * nt, np.zeros(3 * nt, dtype=bool))


def _trace_space(mesh):
    gamma = np.flatnonzero(mesh.edge_tag == msh.INTERFACE)
    dofs = np.arange(2 * len(gamma)).reshape(-1, 2)
    return Space(INTERFACE_TRACE, mesh, gamma, dofs, np.ones(dofs.shape),
                 2 * len(gamma), np.zeros(2 * len(gamma), dtype=bool))


def build_space(mesh, kind, k=2):
    if k != 2:
        raise NotImplementedError("only k = 2 is implemented")
    if kind == STOKES_VELOCITY:
        return _stokes_velocity_space(mesh)
    if kind == DARCY_VELOCITY:
        return _rt_space(mesh, msh.DARCY, DARCY_VELOCITY)
    if kind == STOKES_RT:
        return _rt_space(mesh, msh.STOKES, STOKES_RT)
    if kind == RAVIART_THOMAS:
        return _rt_space(mesh, None, RAVIART_THOMAS)
    if kind == PRESSURE:
        return _pressure_space(mesh)
    if kind == INTERFACE_TRACE:
        return _trace_space(mesh)
    raise ValueError("unknown space kind %r" % (kind,))


class Spaces:
    """
    The discrete spaces of one mesh and the combined velocity layout.

    Combined velocity vectors are ordered ``[Stokes (x then y), Darcy RT]``;
    reconstructed (RT) vectors are ordered ``[Stokes RT, Darcy RT]``.
    """

    def __init__(self, mesh, k=2):
        self.mesh = mesh
        self.k = k
        self.stokes = build_space(mesh, STOKES_VELOCITY, k)
        self.darcy = build_space(mesh, DARCY_VELOCITY, k)
        self.pressure = build_space(mesh, PRESSURE, k)
        self.trace = build_space(mesh, INTERFACE_TRACE, k)
        self.stokes_rt = build_space(mesh, STOKES_RT, k)
        self.quad_degree = 2 * k + 2
        self.edge_quad_degree = 2 * k + 1
        # loads carry non-polynomial data; integrate them more accurately
        self.load_quad_degree = 10

    @property
    def n_velocity(self):
        return self.stokes.ndof + self.darcy.ndof

    @property
    def n_rt(self):
        return self.stokes_rt.ndof + self.darcy.ndof

    @property
    def velocity_essential(self):
        return np.concatenate([self.stokes.essential, self.darcy.essential])

    def split_velocity(self, v):
        v = np.asarray(v)
        return v[:self.stokes.ndof], v[self.stokes.ndof:]

    def split_rt(self, w):
        w = np.asarray(w)
        return w[:self.stokes_rt.ndof], w[self.stokes_rt.ndof:]

    def join_velocity(self, vs, vd):
        return np.concatenate([vs, vd])


def build_spaces(mesh, k=2):
    return Spaces(mesh, k)


# -- edge geometry helpers -------------------------------------------------------

def edge_bary_in_cell(mesh, edge_ids, cells, s):
    """
    Barycentric coordinates in ``cells`` of points on ``edge_ids``.

    ``s`` (nq,) parametrises each edge from its lower to its higher global
    vertex. Returns ``(ne, nq, 3)``.
    """
    tri = mesh.triangles[cells]
    a = mesh.edges[edge_ids, 0]
    b = mesh.edges[edge_ids, 1]
    bary = np.zeros((len(edge_ids), len(s), 3))
    ia = np.argmax(tri == a[:, None], axis=1)
    ib = np.argmax(tri == b[:, None], axis=1)
    r = np.arange(len(edge_ids))
    bary[r, :, ia] = 1.0 - s[None, :]
    bary[r, :, ib] = s[None, :]
    return bary


def tabulate_on_edges(space, edge_ids, cells, s):
    """
    Tabulate ``space`` (cell based) on edge points, one cell per edge.

    Each edge can have a different local position in its cell, so the edge
    set is grouped by barycentric pattern before tabulating.
    """
    bary = edge_bary_in_cell(space.mesh, edge_ids, cells, s)
    rows = space.local_index[cells]
    if np.any(rows < 0):
        raise ValueError("cells not in %s" % space.kind)
    out = None
    key = bary.reshape(len(edge_ids), -1).round(12)
    patterns, which = np.unique(key, axis=0, return_inverse=True)
    which = which.reshape(-1)
    for p in range(len(patterns)):
        sel = np.flatnonzero(which == p)
        tab = space.tabulate(bary[sel[0]], rows[sel])
        if out is None:
            out = Tabulation(
                np.empty((len(edge_ids),) + tab.values.shape[1:]),
                None if tab.grads is None else np.empty((len(edge_ids),) + tab.grads.shape[1:]),
                None if tab.div is None else np.empty((len(edge_ids),) + tab.div.shape[1:]),
                np.empty((len(edge_ids),) + tab.points.shape[1:]))
        out.values[sel] = tab.values
        if tab.grads is not None:
            out.grads[sel] = tab.grads
        if tab.div is not None:
            out.div[sel] = tab.div
        out.points[sel] = tab.points
    return out


# -- functions ------------------------------------------------------------------

class FeFunction:
    """A coefficient vector bound to a :class:`Space`."""

    def __init__(self, space, coeffs=None):
        self.space = space
        if coeffs is None:
            coeffs = np.zeros(space.ndof)
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (space.ndof,):
            raise ValueError("expected %d coefficients, got %s"
                             % (space.ndof, coeffs.shape))
        self.coeffs = coeffs

    def __call__(self, points):
        """Evaluate at physical points (vector spaces return ``(n, 2)``)."""
        if self.space.kind == INTERFACE_TRACE:
            raise NotImplementedError("evaluate traces with local_field")
        cells, bary = self.space.mesh.locate(points)
        rows = self.space.local_index[cells]
        if np.any(rows < 0):
            raise ValueError("point outside the support of %s" % self.space.kind)
        out = None
        for r in np.unique(rows):
            sel = np.flatnonzero(rows == r)
            val = self.space.local_field(self.coeffs, bary[sel], [r])[0]
            if out is None:
                out = np.zeros((len(rows),) + val.shape[1:])
            out[sel] = val
        return out


# -- interpolation ---------------------------------------------------------------

def stokes_nodes(space):
    """Physical coordinates of the scalar P2 + bubble nodes, by scalar dof."""
    mesh = space.mesh
    ex = space.extra
    verts = mesh.vertices[ex["vertex_ids"]]
    e = mesh.edges[ex["edge_ids"]]
    mids = 0.5 * (mesh.vertices[e[:, 0]] + mesh.vertices[e[:, 1]])
    cents = mesh.vertices[mesh.triangles[space.cells]].mean(axis=1)
    return verts, mids, cents


def interpolate_stokes(space, field):
    """
    Nodal interpolant of a vector field into P2 + bubble.

    The bubble coefficient is the centroid value minus the centroid value of
    the P2 part, so polynomials of degree two are reproduced exactly.
    """
    verts, mids, cents = stokes_nodes(space)
    nv, ne = len(verts), len(mids)
    ns = space.extra["nscalar"]
    vals = np.vstack([field(verts), field(mids)])
    c = np.zeros(space.ndof)
    c[:nv + ne] = vals[:, 0]
    c[ns:ns + nv + ne] = vals[:, 1]
    centroid = np.array([[1.0, 1.0, 1.0]]) / 3.0
    p2_at_c = space.local_field(c, centroid)[:, 0, :]
    bub = field(cents) - p2_at_c
    c[nv + ne:ns] = bub[:, 0]
    c[ns + nv + ne:] = bub[:, 1]
    return c


def rt_dofs(space, field, degree=8):
    """
    RT1 degrees of freedom (edge and interior moments) of a vector field.

    Works for ``DarcyVelocity`` and ``StokesRT`` spaces. Edge moments use
    each edge's stored normal and are computed once per edge.
    """
    mesh = space.mesh
    eq = make_quadrature("edge", degree)
    tq = make_quadrature("triangle", degree)
    out = np.zeros(space.ndof)
    edge_ids = space.extra["edge_ids"]
    p = mesh.vertices
    a = p[mesh.edges[edge_ids, 0]]
    b = p[mesh.edges[edge_ids, 1]]
    pts = a[:, None, :] * eq.points[None, :, :1] + b[:, None, :] * eq.points[None, :, 1:]
    vals = field(pts.reshape(-1, 2)).reshape(len(edge_ids), -1, 2)
    vn = np.einsum("eqx,ex->eq", vals, mesh.edge_normals[edge_ids])
    w = eq.weights[None, :] * mesh.edge_lengths[edge_ids][:, None]
    out[0:2 * len(edge_ids):2] = np.sum(vn * w * eq.points[None, :, 0], axis=1)
    out[1:2 * len(edge_ids):2] = np.sum(vn * w * eq.points[None, :, 1], axis=1)
    # interior: reference moments = J^{-1} * physical cell integral
    J, det = mesh.jacobians(space.cells)
    xq = mesh.to_physical(space.cells, tq.points)
    fv = field(xq.reshape(-1, 2)).reshape(xq.shape)
    integral = np.einsum("cqx,q->cx", fv, tq.weights) * det[:, None]
    ref = np.linalg.solve(J, integral[:, :, None])[:, :, 0]
    out[space.cell_dofs[:, 6]] = ref[:, 0]
    out[space.cell_dofs[:, 7]] = ref[:, 1]
    return out


def interpolate_pressure(space, field):
    """Nodal P1-discontinuous interpolant (vertex values per triangle)."""
    mesh = space.mesh
    corners = mesh.vertices[mesh.triangles[space.cells]]
    return field(corners.reshape(-1, 2)).reshape(-1)
