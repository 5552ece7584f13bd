import numpy as np
import pytest

from hivesdf.sparse import NodeSet, node_of
from hivesdf.surface import (Mesh, ScalarGrid, grid_points, marching_cubes, read_obj, rescale_nodes,
                             sample_field, surface_nodes, write_obj)


def sphere(r=0.5):
    return lambda p: np.linalg.norm(p, axis=1) - r


def test_sample_field_sphere_n3():
    g = sample_field(sphere(), 3)
    assert g.values[1, 1, 1] == -0.5
    assert g.values[0, 0, 0] == pytest.approx(np.sqrt(3) - 0.5, abs=1e-15)


def test_sample_field_constant_and_corners():
    g = sample_field(lambda p: np.full(len(p), 2.5), 4)
    assert np.all(g.values == 2.5)
    pts = grid_points(2)
    assert len(pts) == 8 and set(map(tuple, pts)) == {(a, b, c) for a in (-1, 1) for b in (-1, 1) for c in (-1, 1)}


def test_sample_field_errors():
    with pytest.raises(ValueError):
        sample_field(sphere(), 1)

    def broken(p):
        raise ZeroDivisionError("boom")
    with pytest.raises(RuntimeError, match="first point"):
        sample_field(broken, 3)


def test_sample_field_chunking_is_transparent():
    a = sample_field(sphere(), 9, chunk=10)
    b = sample_field(sphere(), 9)
    assert np.array_equal(a.values, b.values)


def test_marching_cubes_empty():
    assert marching_cubes(ScalarGrid(4, np.ones(64))).is_empty
    assert marching_cubes(ScalarGrid(4, -np.ones(64))).is_empty


def test_marching_cubes_plane_exact():
    mesh = marching_cubes(sample_field(lambda p: p[:, 2] - 0.25, 33))
    assert not mesh.is_empty
    assert np.abs(mesh.vertices[:, 2] - 0.25).max() <= 1e-9
    # normals point toward increasing values
    assert np.all(mesh.face_normals()[:, 2] > 0.99)


def test_marching_cubes_sphere_vertices_near_surface():
    n = 65
    mesh = marching_cubes(sample_field(sphere(), n))
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(r - 0.5).max() < 2.0 / (n - 1) * np.sqrt(3)
    assert mesh.boundary_edges() == 0


def test_marching_cubes_vertices_on_cell_edges():
    n = 17
    mesh = marching_cubes(sample_field(sphere(0.6), n))
    lattice = (mesh.vertices + 1.0) / (2.0 / (n - 1))
    on_node = np.abs(lattice - np.round(lattice)) < 1e-9
    # a vertex on an edge has at least two coordinates on lattice nodes
    assert np.all(on_node.sum(axis=1) >= 2)


def test_marching_cubes_deterministic():
    g = sample_field(sphere(0.4), 21)
    a, b = marching_cubes(g), marching_cubes(g)
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.triangles, b.triangles)


def test_surface_nodes_empty():
    assert len(surface_nodes(ScalarGrid(3, np.ones(27)))) == 0


def test_surface_nodes_plane_n3():
    nodes = surface_nodes(sample_field(lambda p: p[:, 2], 3))
    # the middle layer is exactly zero; only cells holding a negative value count
    z = node_of(nodes.indices, 3)[:, 2]
    assert len(nodes) == 18 and set(z.tolist()) == {0, 1}


def test_surface_nodes_offset_plane_is_two_layers():
    nodes = surface_nodes(sample_field(lambda p: p[:, 2] - 0.3, 3))
    z = node_of(nodes.indices, 3)[:, 2]
    assert len(nodes) == 18 and set(z.tolist()) == {1, 2}


def test_surface_nodes_brute_force(rng):
    n = 6
    g = ScalarGrid(n, rng.normal(size=n ** 3))
    v = g.values
    expect = set()
    for k in range(n - 1):
        for j in range(n - 1):
            for i in range(n - 1):
                c = v[k:k + 2, j:j + 2, i:i + 2]
                if c.min() < 0 <= c.max():
                    for dz in (0, 1):
                        for dy in (0, 1):
                            for dx in (0, 1):
                                expect.add((i + dx) + (j + dy) * n + (k + dz) * n * n)
    assert set(surface_nodes(g).indices.tolist()) == expect


def test_surface_nodes_sphere_fraction():
    n = 33
    nodes = surface_nodes(sample_field(sphere(), n))
    assert 0 < len(nodes) < 0.15 * n ** 3


def test_rescale_identity_and_empty():
    s = NodeSet([(1, 2, 0), (2, 2, 2)], 3)
    assert np.array_equal(rescale_nodes(s, 3, 3).indices, s.indices)
    assert len(rescale_nodes(NodeSet.from_indices([], 3), 3, 9)) == 0
    with pytest.raises(ValueError):
        rescale_nodes(s, 5, 3)


def test_rescale_centre_node_3_to_5():
    out = rescale_nodes(NodeSet([(1, 1, 1)], 3), 3, 5)
    # source footprint is [-0.5, 0.5]^3; nodes at -0.5, 0, 0.5 on each axis
    expect = {(a, b, c) for a in (1, 2, 3) for b in (1, 2, 3) for c in (1, 2, 3)}
    assert {tuple(v) for v in node_of(out.indices, 5).tolist()} == expect


def test_rescale_matches_world_intervals(rng):
    src_n, dst_n = 5, 17
    src = NodeSet(rng.integers(0, src_n, (6, 3)), src_n)
    half = 1.0 / (src_n - 1)
    centres = -1.0 + node_of(src.indices, src_n) * 2.0 / (src_n - 1)
    world = grid_points(dst_n)
    expect = set()
    for c in centres:
        inside = np.all(np.abs(world - c) <= half + 1e-9, axis=1)
        expect |= set(np.flatnonzero(inside).tolist())
    assert set(rescale_nodes(src, src_n, dst_n).indices.tolist()) == expect


def test_obj_round_trip(tmp_path):
    mesh = marching_cubes(sample_field(sphere(), 9))
    write_obj(mesh, tmp_path / "m.obj")
    back = read_obj(tmp_path / "m.obj")
    assert np.array_equal(back.triangles, mesh.triangles)
    assert np.allclose(back.vertices, mesh.vertices, rtol=1e-8, atol=1e-9)
    assert (tmp_path / "m.obj").read_text().startswith("v ")


def test_mesh_validates_indices():
    with pytest.raises(ValueError):
        Mesh(np.zeros((3, 3)), [[0, 1, 3]])
