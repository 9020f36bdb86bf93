"""Legacy ASCII VTK output for meshes and point-sampled solutions."""

import numpy as np

_TRIANGLE = 5


def _header(fh, title):
    fh.write("# vtk DataFile Version 3.0\n%s\nASCII\nDATASET UNSTRUCTURED_GRID\n" % title)


def _cells(fh, tris):
    fh.write("CELLS %d %d\n" % (len(tris), 4 * len(tris)))
    for t in tris:
        fh.write("3 %d %d %d\n" % tuple(t))
    fh.write("CELL_TYPES %d\n" % len(tris))
    fh.write("%d\n" % _TRIANGLE * len(tris))


def write_mesh_vtk(path, mesh):
    """Write triangles with their subdomain tag as cell data."""
    with open(path, "w") as fh:
        _header(fh, "two-domain mesh")
        fh.write("POINTS %d double\n" % mesh.num_vertices)
        for x, y in mesh.vertices:
            fh.write("%.16g %.16g 0\n" % (x, y))
        _cells(fh, mesh.triangles)
        fh.write("CELL_DATA %d\nSCALARS subdomain int 1\nLOOKUP_TABLE default\n"
                 % mesh.num_triangles)
        fh.write("".join("%d\n" % s for s in mesh.subdomain))


def _corner_values(space, coeffs):
    corners = np.eye(3)
    return space.local_field(coeffs, corners)  # (nc, 3[, 2])


def write_solution_vtk(path, sol, which="u"):
    """
    Write velocity ``which`` and its pressure sampled at triangle corners.

    Vertices are duplicated per triangle so that discontinuous fields are
    represented exactly at the sample points.
    """
    spaces = sol.system.spaces
    mesh = spaces.mesh
    v = sol.u if which == "u" else sol.z
    pres = sol.p if which == "u" else sol.r
    vs, vd = spaces.split_velocity(v)
    nt = mesh.num_triangles
    vel = np.zeros((nt, 3, 2))
    vel[spaces.stokes.cells] = _corner_values(spaces.stokes, vs)
    vel[spaces.darcy.cells] = _corner_values(spaces.darcy, vd)
    pr = np.zeros((nt, 3))
    pr[spaces.pressure.cells] = _corner_values(spaces.pressure, pres)
    pts = mesh.vertices[mesh.triangles].reshape(-1, 2)
    with open(path, "w") as fh:
        _header(fh, "solution (%s, %s scheme)" % (which, sol.system.scheme))
        fh.write("POINTS %d double\n" % len(pts))
        for x, y in pts:
            fh.write("%.16g %.16g 0\n" % (x, y))
        _cells(fh, np.arange(3 * nt).reshape(nt, 3))
        fh.write("CELL_DATA %d\nSCALARS subdomain int 1\nLOOKUP_TABLE default\n" % nt)
        fh.write("".join("%d\n" % s for s in mesh.subdomain))
        fh.write("POINT_DATA %d\nVECTORS velocity double\n" % len(pts))
        for a, b in vel.reshape(-1, 2):
            fh.write("%.16g %.16g 0\n" % (a, b))
        fh.write("SCALARS pressure double 1\nLOOKUP_TABLE default\n")
        fh.write("".join("%.16g\n" % p for p in pr.ravel()))

