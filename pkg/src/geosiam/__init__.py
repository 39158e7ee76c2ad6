"""Self-supervised geodesic pretraining for cortical area segmentation on a synthetic brain."""

__version__ = "0.1.0"

from .mesh_geo import SurfaceMesh, geodesic_distance, geodesic_distances, load_mesh, save_mesh
from .segnet import FROM_SIAMESE, RANDOM, PatchSegmenter, dice, err_seg
from .siamese import COMBINED, COORD_ONLY, DIST_ONLY, SiameseDistanceRegressor
from .synthworld import WorldSpec, build_world

__all__ = [
    "__version__",
    "SurfaceMesh",
    "geodesic_distance",
    "geodesic_distances",
    "load_mesh",
    "save_mesh",
    "WorldSpec",
    "build_world",
    "SiameseDistanceRegressor",
    "PatchSegmenter",
    "DIST_ONLY",
    "COORD_ONLY",
    "COMBINED",
    "RANDOM",
    "FROM_SIAMESE",
    "dice",
    "err_seg",
]
