import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial import ConvexHull, Delaunay

sys.path.insert(0, str(Path(__file__).parent))

from geosiam.mesh_geo import SurfaceMesh  # noqa: E402


def random_sheet(n, seed, hemisphere=0, z_noise=0.3):
    """Delaunay triangulation of ``n`` random points with a bumpy z."""
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 10, size=(n, 2))
    tri = Delaunay(xy).simplices.astype(np.int64)
    z = z_noise * rng.normal(size=n)
    verts = np.column_stack([xy, z])
    return SurfaceMesh(
        verts, tri, verts.copy(), np.full(n, hemisphere), np.zeros(n, dtype=np.int64)
    )


def unit_sphere(n):
    """Near-uniform Fibonacci tessellation of the unit sphere."""
    k = np.arange(n) + 0.5
    polar = np.arccos(1 - 2 * k / n)
    azim = np.pi * (1 + 5**0.5) * k
    p = np.column_stack([np.cos(azim) * np.sin(polar), np.sin(azim) * np.sin(polar), np.cos(polar)])
    tri = ConvexHull(p).simplices.astype(np.int64)
    # orient every face outwards
    fn = np.cross(p[tri[:, 1]] - p[tri[:, 0]], p[tri[:, 2]] - p[tri[:, 0]])
    flip = np.einsum("ij,ij->i", fn, p[tri].mean(axis=1)) < 0
    tri[flip] = tri[flip][:, ::-1]
    return SurfaceMesh(p, tri, p.copy(), np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64))


def square_mesh(hemisphere=(0, 0, 0, 0)):
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    tri = np.array([[0, 1, 2], [0, 2, 3]])
    return SurfaceMesh(verts, tri, verts.copy(), np.array(hemisphere), np.zeros(4, dtype=np.int64))


@pytest.fixture(scope="session")
def small_world():
    """A reduced default world that keeps unit tests fast."""
    from geosiam.synthworld import WorldSpec, build_world

    return build_world(WorldSpec(seed=11, grid_u=61, grid_v=16))


@pytest.fixture(scope="session")
def small_patches(small_world):
    """(dataset, train pairs) drawn from ``small_world``."""
    from geosiam.sampler import annotate_distances, build_pairs, sample_patches

    mesh, world = small_world
    ds = sample_patches(world, mesh, 240, seed=0)
    pairs = annotate_distances(build_pairs(ds, 300, seed=0), ds, mesh)
    return ds, pairs
