"""
Two-subdomain triangulations for the coupled Stokes-Darcy problem.

The geometry is the union of two axis-aligned rectangles that share one full
edge, the interface. Triangles carry a subdomain tag (``STOKES`` or
``DARCY``), edges carry a boundary tag, and every edge owns a single unit
normal that fixes the sign convention for normal-flux degrees of freedom.
On interface edges the stored normal points from the Stokes side into the
Darcy side.
"""

from dataclasses import dataclass

import numpy as np

STOKES = 0
DARCY = 1

INTERIOR = 0
INTERFACE = 1
STOKES_BOUNDARY = 2
DARCY_BOUNDARY = 3


class GeometryError(ValueError):
    """Raised when the two rectangles do not form a valid coupled domain."""


@dataclass(frozen=True)
class Rectangle:
    x0: float
    x1: float
    y0: float
    y1: float

    @classmethod
    def from_bounds(cls, bounds):
        x0, x1, y0, y1 = (float(b) for b in bounds)
        return cls(x0, x1, y0, y1)

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    @property
    def area(self):
        return self.width * self.height


def shared_edge(rs, rd, tol=1e-12):
    """Return (segment, n^s) for the edge shared by ``rs`` and ``rd``."""
    for r in (rs, rd):
        if r.width <= tol or r.height <= tol:
            raise GeometryError("degenerate rectangle %r" % (r,))
    same_x = abs(rs.x0 - rd.x0) < tol and abs(rs.x1 - rd.x1) < tol
    same_y = abs(rs.y0 - rd.y0) < tol and abs(rs.y1 - rd.y1) < tol
    if same_x and abs(rs.y0 - rd.y1) < tol:
        return ((rs.x0, rs.y0), (rs.x1, rs.y0)), np.array([0.0, -1.0])
    if same_x and abs(rs.y1 - rd.y0) < tol:
        return ((rs.x0, rs.y1), (rs.x1, rs.y1)), np.array([0.0, 1.0])
    if same_y and abs(rs.x0 - rd.x1) < tol:
        return ((rs.x0, rs.y0), (rs.x0, rs.y1)), np.array([-1.0, 0.0])
    if same_y and abs(rs.x1 - rd.x0) < tol:
        return ((rs.x1, rs.y0), (rs.x1, rs.y1)), np.array([1.0, 0.0])
    raise GeometryError("rectangles do not share a full edge")


class Mesh:
    """
    Conforming triangulation of two rectangles with a tagged interface.

    Attributes
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array, counter-clockwise
    subdomain : (nt,) int array, ``STOKES`` or ``DARCY``
    edges : (ne, 2) int array, vertex pairs sorted ascending
    edge_tag : (ne,) int array, one of the edge tags of this module
    edge_normals : (ne, 2) float array, unit normal owned by each edge
    tri_edges : (nt, 3) int array, edge opposite local vertex i
    tri_edge_sign : (nt, 3) int array, +1 where the stored edge normal is
        outward for the triangle, -1 otherwise
    edge_tris : (ne, 2) int array, adjacent triangles (-1 if absent); for
        interface edges column 0 is the Stokes and column 1 the Darcy one
    interface_normal : (2,) float array, n^s on the interface
    """

    def __init__(self, vertices, triangles, subdomain, interface_normal,
                 rect_s=None, rect_d=None):
        vertices = np.asarray(vertices, dtype=float)
        triangles = np.asarray(triangles, dtype=np.int64)
        subdomain = np.asarray(subdomain, dtype=np.int64)

        # enforce counter-clockwise orientation
        area = _signed_area(vertices, triangles)
        flip = area < 0
        triangles[flip] = triangles[flip][:, [0, 2, 1]]

        self.vertices = vertices
        self.triangles = triangles
        self.subdomain = subdomain
        self.interface_normal = np.asarray(interface_normal, dtype=float)
        self.rect_s = rect_s
        self.rect_d = rect_d
        self._build_edges()
        for arr in (self.vertices, self.triangles, self.subdomain,
                    self.edges, self.edge_tag, self.edge_normals,
                    self.tri_edges, self.tri_edge_sign, self.edge_tris):
            arr.setflags(write=False)

    def _build_edges(self):
        t = self.triangles
        nt = len(t)
        local = np.stack([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]], axis=1)
        pairs = np.sort(local.reshape(-1, 2), axis=1)
        edges, inverse, counts = np.unique(pairs, axis=0, return_inverse=True,
                                           return_counts=True)
        inverse = inverse.reshape(-1)
        self.edges = edges
        self.tri_edges = inverse.reshape(nt, 3)
        ne = len(edges)

        owner = np.repeat(np.arange(nt), 3)
        edge_tris = -np.ones((ne, 2), dtype=np.int64)
        order = np.argsort(inverse, kind="stable")
        first = np.ones(len(order), dtype=bool)
        first[1:] = inverse[order][1:] != inverse[order][:-1]
        edge_tris[inverse[order][first], 0] = owner[order][first]
        edge_tris[inverse[order][~first], 1] = owner[order][~first]
        if np.any(counts > 2):
            raise GeometryError("non-manifold edge in triangulation")

        sub = self.subdomain
        tag = np.full(ne, INTERIOR, dtype=np.int64)
        boundary = counts == 1
        tag[boundary & (sub[edge_tris[:, 0]] == STOKES)] = STOKES_BOUNDARY
        tag[boundary & (sub[edge_tris[:, 0]] == DARCY)] = DARCY_BOUNDARY
        two = ~boundary
        cross = two & (sub[edge_tris[:, 0]] != sub[np.maximum(edge_tris[:, 1], 0)])
        tag[cross] = INTERFACE
        # interface edges list the Stokes triangle first
        swap = cross & (sub[edge_tris[:, 0]] == DARCY)
        edge_tris[swap] = edge_tris[swap][:, ::-1]
        self.edge_tag = tag
        self.edge_tris = edge_tris

        p = self.vertices
        d = p[edges[:, 1]] - p[edges[:, 0]]
        length = np.linalg.norm(d, axis=1)
        normals = np.stack([d[:, 1], -d[:, 0]], axis=1) / length[:, None]
        # boundary normals outward, interface normals equal to n^s
        mid = 0.5 * (p[edges[:, 0]] + p[edges[:, 1]])
        centroid = p[t].mean(axis=1)
        out = mid - centroid[edge_tris[:, 0]]
        flip = np.einsum("ij,ij->i", normals, out) < 0
        normals[flip] *= -1.0
        self.edge_normals = normals
        self.edge_lengths = length

        # sign of stored normal relative to each triangle's outward normal
        tmid = mid[self.tri_edges]
        outward = tmid - centroid[:, None, :]
        dots = np.einsum("tij,tij->ti", normals[self.tri_edges], outward)
        self.tri_edge_sign = np.where(dots > 0, 1, -1).astype(np.int64)

    # -- geometry queries ---------------------------------------------------

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_triangles(self):
        return len(self.triangles)

    @property
    def num_edges(self):
        return len(self.edges)

    def jacobians(self, cells=None):
        """Affine map Jacobians ``J = [v1 - v0, v2 - v0]`` and determinants."""
        t = self.triangles if cells is None else self.triangles[cells]
        p = self.vertices
        J = np.stack([p[t[:, 1]] - p[t[:, 0]], p[t[:, 2]] - p[t[:, 0]]], axis=2)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        return J, det

    def areas(self):
        return _signed_area(self.vertices, self.triangles)

    def diameters(self):
        return self.edge_lengths[self.tri_edges].max(axis=1)

    @property
    def h(self):
        return float(self.diameters().max())

    def inradii(self):
        per = self.edge_lengths[self.tri_edges].sum(axis=1)
        return 2.0 * self.areas() / per

    def cells(self, subdomain):
        return np.flatnonzero(self.subdomain == subdomain)

    def to_physical(self, cells, bary):
        """Map barycentric points ``(nq, 3)`` on ``cells`` to ``(nc, nq, 2)``."""
        corners = self.vertices[self.triangles[cells]]
        return np.einsum("qi,cix->cqx", bary, corners)

    def locate(self, points, tol=1e-12):
        """
        Find a containing triangle and barycentric coordinates for points.

        Brute force; intended for sampling and tests, not inner loops.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        J, det = self.jacobians()
        Jinv = np.linalg.inv(J)
        v0 = self.vertices[self.triangles[:, 0]]
        cells = np.empty(len(points), dtype=np.int64)
        bary = np.empty((len(points), 3))
        chunk = max(1, 2 ** 20 // self.num_triangles)
        for s in range(0, len(points), chunk):
            x = points[s:s + chunk]
            ref = np.einsum("tij,ptj->pti", Jinv, x[:, None, :] - v0[None])
            lam = np.concatenate([1.0 - ref.sum(axis=2, keepdims=True), ref], axis=2)
            ok = lam.min(axis=2) >= -tol
            missing = ~ok.any(axis=1)
            if np.any(missing):
                raise ValueError("point %s outside the mesh" % (x[np.argmax(missing)],))
            first = ok.argmax(axis=1)
            cells[s:s + chunk] = first
            bary[s:s + chunk] = lam[np.arange(len(x)), first]
        return cells, bary

    # -- validation -----------------------------------------------------------

    def check(self):
        """Assert the structural invariants; returns ``self`` for chaining."""
        if np.any(_signed_area(self.vertices, self.triangles) <= 0):
            raise GeometryError("non-positive triangle area")
        counts = (self.edge_tris >= 0).sum(axis=1)
        inner = np.isin(self.edge_tag, (INTERIOR, INTERFACE))
        if np.any(counts[inner] != 2) or np.any(counts[~inner] != 1):
            raise GeometryError("triangulation is not conforming")
        V, E, T = self.num_vertices, self.num_edges, self.num_triangles
        if V - E + T != 1:
            raise GeometryError("Euler characteristic %d != 1" % (V - E + T))
        gamma = self.edge_tag == INTERFACE
        if np.any(self.subdomain[self.edge_tris[gamma, 0]] != STOKES) or \
                np.any(self.subdomain[self.edge_tris[gamma, 1]] != DARCY):
            raise GeometryError("interface edge adjacency is inconsistent")
        if not np.allclose(self.edge_normals[gamma], self.interface_normal):
            raise GeometryError("interface normals differ from n^s")
        return self

    def __repr__(self):
        return "Mesh(vertices=%d, triangles=%d, edges=%d, h=%.4g)" % (
            self.num_vertices, self.num_triangles, self.num_edges, self.h)


def _signed_area(p, t):
    a, b, c = p[t[:, 0]], p[t[:, 1]], p[t[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                  - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def _cell_count(length, n0):
    n = length * n0
    m = int(round(n))
    if m < 1 or abs(n - m) > 1e-9:
        raise GeometryError(
            "side length %g is not a multiple of 1/%d" % (length, n0))
    return m


def build_two_domain_mesh(rect_s, rect_d, n0):
    """
    Structured triangulation of two rectangles sharing one full edge.

    Each rectangle is cut into squares of side ``1/n0`` and every square is
    split by one diagonal, alternating the diagonal direction checkerboard
    fashion. The two rectangles share their vertices along the interface.

    Parameters
    ----------
    rect_s, rect_d : Rectangle or 4-sequence ``(x0, x1, y0, y1)``
        Stokes and Darcy rectangles.
    n0 : int
        Number of subdivisions per unit length (>= 1).
    """
    if int(n0) != n0 or n0 < 1:
        raise ValueError("n0 must be a positive integer, got %r" % (n0,))
    n0 = int(n0)
    if not isinstance(rect_s, Rectangle):
        rect_s = Rectangle.from_bounds(rect_s)
    if not isinstance(rect_d, Rectangle):
        rect_d = Rectangle.from_bounds(rect_d)
    _, normal = shared_edge(rect_s, rect_d)

    xmin = min(rect_s.x0, rect_d.x0)
    ymin = min(rect_s.y0, rect_d.y0)
    points, tris, subs = [], [], []
    for tag, r in ((STOKES, rect_s), (DARCY, rect_d)):
        nx = _cell_count(r.width, n0)
        ny = _cell_count(r.height, n0)
        xs = np.linspace(r.x0, r.x1, nx + 1)
        ys = np.linspace(r.y0, r.y1, ny + 1)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        base = sum(len(q) for q in points)
        points.append(np.column_stack([X.ravel(), Y.ravel()]))
        gi0 = int(round((r.x0 - xmin) * n0))
        gj0 = int(round((r.y0 - ymin) * n0))
        for i in range(nx):
            for j in range(ny):
                a = base + i * (ny + 1) + j
                b = a + (ny + 1)
                c = b + 1
                d = a + 1
                if (gi0 + i + gj0 + j) % 2 == 0:
                    tris += [(a, b, c), (a, c, d)]
                else:
                    tris += [(a, b, d), (b, c, d)]
                subs += [tag, tag]
    points = np.vstack(points)
    # merge coincident interface vertices
    key = np.round(points * n0 * 4.0).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True,
                                  return_inverse=True)
    inverse = inverse.reshape(-1)
    vertices = points[first]
    triangles = inverse[np.asarray(tris, dtype=np.int64)]
    mesh = Mesh(vertices, triangles, np.asarray(subs), normal, rect_s, rect_d)
    return mesh.check()


def refine_uniform(m):
    """Red refinement: split each triangle into four congruent children."""
    nv = m.num_vertices
    mid = 0.5 * (m.vertices[m.edges[:, 0]] + m.vertices[m.edges[:, 1]])
    vertices = np.vstack([m.vertices, mid])
    t = m.triangles
    ma, mb, mc = (nv + m.tri_edges[:, i] for i in range(3))
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    children = np.stack([
        np.column_stack([a, mc, mb]),
        np.column_stack([mc, b, ma]),
        np.column_stack([mb, ma, c]),
        np.column_stack([ma, mb, mc]),
    ], axis=1).reshape(-1, 3)
    subdomain = np.repeat(m.subdomain, 4)
    return Mesh(vertices, children, subdomain, m.interface_normal,
                m.rect_s, m.rect_d)


def refine(m, levels):
    for _ in range(levels):
        m = refine_uniform(m)
    return m


@dataclass(frozen=True)
class InterfaceEdges:
    """Interface edges with their Stokes/Darcy neighbours and n^s."""
    edges: np.ndarray
    stokes_tris: np.ndarray
    darcy_tris: np.ndarray
    normals: np.ndarray

    def __len__(self):
        return len(self.edges)

    def __iter__(self):
        return iter(zip(self.edges, self.stokes_tris, self.darcy_tris,
                        self.normals))


def interface_edges(m):
    gamma = np.flatnonzero(m.edge_tag == INTERFACE)
    return InterfaceEdges(gamma, m.edge_tris[gamma, 0], m.edge_tris[gamma, 1],
                          m.edge_normals[gamma].copy())
