import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_sheet, square_mesh, unit_sphere
from geosiam.mesh_geo import (
    HemisphereError,
    MeshError,
    SurfaceMesh,
    geodesic_between_points,
    geodesic_distance,
    geodesic_distances,
    load_mesh,
    nearest_vertex,
    nearest_vertices,
    save_mesh,
    target_coordinate,
    target_coordinates,
    vertex_normal,
    vertex_normals,
)
from oracles import floyd_warshall

SQUARE = """meshv1 4 2
v 0 0 0 0 0 0 0 0
v 1 0 0 1 0 0 0 0
v 1 1 0 1 1 0 0 1
v 0 1 0 0 1 0 0 1
t 0 1 2
t 0 2 3
"""


def test_load_minimal_square(tmp_path):
    p = tmp_path / "sq.mesh"
    p.write_text(SQUARE)
    mesh = load_mesh(p)
    assert mesh.n_vertices == 4 and mesh.n_triangles == 2
    assert list(mesh.region) == [0, 0, 1, 1]


def test_load_rejects_out_of_range_index(tmp_path):
    p = tmp_path / "bad.mesh"
    p.write_text(SQUARE.replace("t 0 2 3", "t 0 2 99"))
    with pytest.raises(MeshError, match="99"):
        load_mesh(p)


@pytest.mark.parametrize(
    "text",
    ["", "mesh 4 2\n", "meshv1 4 2\nv 0 0 0\n", SQUARE.replace("t 0 1 2", "t 0 1 x")],
)
def test_load_rejects_malformed(tmp_path, text):
    p = tmp_path / "m.mesh"
    p.write_text(text)
    with pytest.raises(MeshError):
        load_mesh(p)


def test_world_mesh_roundtrip(tmp_path, small_world):
    mesh, _ = small_world
    save_mesh(mesh, tmp_path / "w.mesh")
    back = load_mesh(tmp_path / "w.mesh")
    assert back.same_fields(mesh)
    assert np.array_equal(back.vertices, mesh.vertices)


def test_nearest_vertex_exact_hit_and_tie():
    mesh = random_sheet(30, 0)
    assert nearest_vertex(mesh, mesh.vertices[7]) == 7
    verts = np.array([[0, 5, 0], [5, 5, 0], [-1, 0, 0], [5, -5, 0], [0, -5, 0], [1, 0, 0]], dtype=float)
    tri = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 5]])
    m = SurfaceMesh(verts, tri, verts.copy(), np.zeros(6, dtype=int), np.zeros(6, dtype=int))
    assert nearest_vertex(m, [0, 0, 0]) == 2


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_nearest_vertex_matches_linear_scan(seed):
    mesh = random_sheet(40, seed % 7)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 11, size=(5, 3))
    for p in pts:
        best, best_d = -1, np.inf
        for i, v in enumerate(mesh.vertices):
            d = float(np.sum((v - p) ** 2))
            if d < best_d:
                best, best_d = i, d
        assert nearest_vertex(mesh, p) == best
    assert list(nearest_vertices(mesh, pts)) == [nearest_vertex(mesh, p) for p in pts]


def test_geodesic_identity_and_single_edge():
    mesh = random_sheet(25, 1)
    r = geodesic_distance(mesh, 4, 4)
    assert r.distance == 0 and r.path == [4]
    a, b = mesh.triangles[0][:2]
    r = geodesic_distance(mesh, a, b)
    assert r.distance == pytest.approx(np.linalg.norm(mesh.vertices[a] - mesh.vertices[b]), rel=0, abs=1e-12)
    assert r.path == [a, b]


def test_geodesic_path_is_connected_and_sums_to_distance():
    mesh = random_sheet(80, 2)
    r = geodesic_distance(mesh, 0, 50)
    edges = {tuple(e) for e in mesh.edges}
    steps = list(zip(r.path[:-1], r.path[1:]))
    assert all(tuple(sorted(s)) in edges for s in steps)
    total = sum(np.linalg.norm(mesh.vertices[a] - mesh.vertices[b]) for a, b in steps)
    assert total == pytest.approx(r.distance, rel=1e-12)


def test_geodesic_matches_floyd_warshall():
    mesh = random_sheet(120, 3)
    e = mesh.edges
    w = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    fw = floyd_warshall(mesh.n_vertices, e, w)
    rng = np.random.default_rng(0)
    for a, b in rng.integers(0, mesh.n_vertices, size=(40, 2)):
        d = geodesic_distance(mesh, a, b).distance
        assert abs(d - fw[a, b]) <= 1e-9 * max(fw[a, b], 1e-12)


def test_batch_distances_equal_single_queries():
    mesh = random_sheet(90, 4)
    rng = np.random.default_rng(1)
    src = np.repeat(rng.integers(0, 90, size=5), 4)
    dst = rng.integers(0, 90, size=len(src))
    batch = geodesic_distances(mesh, src, dst)
    single = [geodesic_distance(mesh, a, b).distance for a, b in zip(src, dst)]
    np.testing.assert_allclose(batch, single, rtol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_metric_properties(seed):
    mesh = random_sheet(60, seed % 5)
    rng = np.random.default_rng(seed)
    a, b, c = rng.integers(0, 60, size=3)
    dab = geodesic_distance(mesh, a, b).distance
    assert dab == pytest.approx(geodesic_distance(mesh, b, a).distance, rel=1e-12)
    dac = geodesic_distance(mesh, a, c).distance
    dbc = geodesic_distance(mesh, b, c).distance
    assert dac <= dab + dbc + 1e-9
    assert dab >= np.linalg.norm(mesh.vertices[a] - mesh.vertices[b]) - 1e-12


def test_cross_hemisphere_query_raises():
    mesh = square_mesh()
    with pytest.raises(MeshError):
        square_mesh(hemisphere=(0, 0, 1, 1))  # a triangle may not span hemispheres
    left = random_sheet(20, 0, hemisphere=0)
    right = random_sheet(20, 0, hemisphere=1)
    both = SurfaceMesh(
        np.vstack([left.vertices, right.vertices + [20, 0, 0]]),
        np.vstack([left.triangles, right.triangles + 20]),
        np.vstack([left.inflated, right.inflated]),
        np.concatenate([left.hemisphere, right.hemisphere]),
        np.zeros(40, dtype=np.int64),
    )
    with pytest.raises(HemisphereError):
        geodesic_distance(both, 0, 25)
    with pytest.raises(HemisphereError):
        geodesic_distances(both, [0], [25])
    assert geodesic_distance(mesh, 0, 2).distance == pytest.approx(np.sqrt(2))


def test_geodesic_between_points_composes():
    mesh = random_sheet(70, 5)
    assert geodesic_between_points(mesh, [3, 3, 0], [3, 3, 0]) == 0
    a, b = mesh.triangles[3][:2]
    assert geodesic_between_points(mesh, mesh.vertices[a] + 1e-6, mesh.vertices[b]) == pytest.approx(
        np.linalg.norm(mesh.vertices[a] - mesh.vertices[b])
    )
    rng = np.random.default_rng(2)
    for p1, p2 in rng.uniform(0, 10, size=(10, 2, 3)):
        direct = geodesic_distance(mesh, nearest_vertex(mesh, p1), nearest_vertex(mesh, p2)).distance
        assert geodesic_between_points(mesh, p1, p2) == direct


def test_target_coordinate_mirroring():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    infl = np.array([[3, 1, 2], [3, 1, 2], [3, 1, 2]], dtype=float)
    tri = np.array([[0, 1, 2]])
    left = SurfaceMesh(verts, tri, infl, np.zeros(3, dtype=int), np.zeros(3, dtype=int))
    right = SurfaceMesh(verts, tri, infl, np.ones(3, dtype=int), np.zeros(3, dtype=int))
    np.testing.assert_array_equal(target_coordinate(left, 0), [3, 1, 2])
    np.testing.assert_array_equal(target_coordinate(right, 0), [-3, 1, 2])
    np.testing.assert_array_equal(target_coordinate(right, 1), target_coordinate(right, 1))


def test_mirrored_twins_share_target_coordinates(small_world):
    mesh, _ = small_world
    half = mesh.n_vertices // 2
    left = np.arange(half)
    np.testing.assert_array_equal(target_coordinates(mesh, left), target_coordinates(mesh, left + half))
    twin = mesh.vertices[left + half].copy()
    twin[:, 0] *= -1
    np.testing.assert_allclose(twin, mesh.vertices[left], atol=1e-12)
    assert np.array_equal(mesh.region[left], mesh.region[left + half])


def test_vertex_normal_flat_sheet():
    mesh = random_sheet(30, 6, z_noise=0.0)
    for v in range(0, 30, 5):
        n = vertex_normal(mesh, v)
        assert abs(abs(n[2]) - 1) < 1e-12


def test_vertex_normal_on_sphere_is_radial():
    mesh = unit_sphere(400)
    normals = vertex_normals(mesh)
    ang = np.degrees(np.arccos(np.clip(np.einsum("ij,ij->i", normals, mesh.vertices), -1, 1)))
    assert ang.max() < 5.0
    np.testing.assert_allclose(vertex_normal(mesh, 17), normals[17], atol=1e-12)


def test_vertex_normal_scale_invariant():
    mesh = random_sheet(40, 7)
    scaled = SurfaceMesh(mesh.vertices * 3.7, mesh.triangles, mesh.inflated, mesh.hemisphere, mesh.region)
    for v in (0, 11, 23):
        np.testing.assert_allclose(vertex_normal(scaled, v), vertex_normal(mesh, v), atol=1e-12)
