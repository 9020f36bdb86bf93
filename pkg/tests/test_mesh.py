import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdcontrol import mesh as msh
from sdcontrol.mesh import (GeometryError, Rectangle, build_two_domain_mesh,
                            interface_edges, refine, refine_uniform)

RS = Rectangle(0.0, 1.0, 1.0, 2.0)
RD = Rectangle(0.0, 1.0, 0.0, 1.0)


def test_single_subdivision_counts():
    m = build_two_domain_mesh(RS, RD, 1).check()
    assert m.num_triangles == 4
    assert len(interface_edges(m)) == 1


def test_two_subdivisions_counts():
    m = build_two_domain_mesh(RS, RD, 2).check()
    assert m.num_triangles == 16
    assert len(interface_edges(m)) == 2


def test_degenerate_rectangle():
    with pytest.raises(GeometryError):
        build_two_domain_mesh(Rectangle(0.0, 0.0, 1.0, 2.0), RD, 2)


def test_disjoint_rectangles():
    with pytest.raises(GeometryError):
        build_two_domain_mesh(Rectangle(0.0, 1.0, 1.5, 2.0), RD, 2)


def test_zero_subdivisions():
    with pytest.raises(ValueError):
        build_two_domain_mesh(RS, RD, 0)


def test_refinement_counts_and_h():
    m = build_two_domain_mesh(RS, RD, 1)
    r1 = refine_uniform(m)
    assert r1.num_triangles == 16
    assert r1.h == pytest.approx(m.h / 2, rel=1e-15)
    assert refine(m, 2).num_triangles == 64


def test_interface_normals_and_lengths():
    m = refine(build_two_domain_mesh(RS, RD, 2), 1)
    gam = interface_edges(m)
    assert np.allclose(gam.normals, [0.0, -1.0])
    assert np.allclose(np.linalg.norm(gam.normals, axis=1), 1.0)
    assert m.edge_lengths[gam.edges].sum() == pytest.approx(1.0, rel=1e-14)
    # normal points from the Stokes into the Darcy triangle
    c = m.vertices[m.triangles].mean(axis=1)
    d = c[gam.darcy_tris] - c[gam.stokes_tris]
    assert np.all(np.einsum("ij,ij->i", d, gam.normals) > 0)
    assert np.all(m.subdomain[gam.stokes_tris] == msh.STOKES)
    assert np.all(m.subdomain[gam.darcy_tris] == msh.DARCY)


def test_interface_edges_double_under_refinement():
    m = build_two_domain_mesh(RS, RD, 3)
    assert len(interface_edges(refine_uniform(m))) == 2 * len(interface_edges(m))


def test_interface_vertices_match():
    m = build_two_domain_mesh(RS, RD, 3)
    on_gamma = np.isclose(m.vertices[:, 1], 1.0)
    # one shared vertex per interface node, no duplicates
    assert on_gamma.sum() == 4
    assert len(np.unique(m.vertices.round(12), axis=0)) == m.num_vertices


def test_side_by_side_geometry():
    rs = Rectangle(1.0, 2.0, 0.0, 1.0)
    m = build_two_domain_mesh(rs, RD, 2).check()
    assert np.allclose(m.interface_normal, [-1.0, 0.0])


def test_mesh_is_immutable():
    m = build_two_domain_mesh(RS, RD, 1)
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 5.0


@settings(max_examples=10, deadline=None)
@given(n0=st.integers(1, 4), levels=st.integers(0, 2))
def test_invariants_hold_after_refinement(n0, levels):
    m = refine(build_two_domain_mesh(RS, RD, n0), levels)
    m.check()
    assert np.all(m.areas() > 0)
    assert m.num_vertices - m.num_edges + m.num_triangles == 1
    counts = (m.edge_tris >= 0).sum(axis=1)
    inner = np.isin(m.edge_tag, (msh.INTERIOR, msh.INTERFACE))
    assert np.all(counts[inner] == 2) and np.all(counts[~inner] == 1)


def test_shape_regularity_constant():
    m = build_two_domain_mesh(RS, RD, 2)
    ratios = []
    for _ in range(3):
        ratios.append((m.diameters() / m.inradii()).max())
        m = refine_uniform(m)
    assert np.allclose(ratios, ratios[0], rtol=1e-12)


def test_locate_returns_barycentrics():
    m = build_two_domain_mesh(RS, RD, 2)
    pts = np.array([[0.3, 0.2], [0.9, 1.7]])
    cells, bary = m.locate(pts)
    back = np.einsum("ni,nix->nx", bary, m.vertices[m.triangles[cells]])
    assert np.allclose(back, pts)
