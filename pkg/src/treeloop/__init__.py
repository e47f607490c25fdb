"""Weakly-supervised tree instance segmentation for airborne lidar.

Pipeline: watershed initialization over the canopy height model, human
cluster rating through a browser tool, a KDE-voxel convnet that imitates the
operator, pseudo-label construction with geometric acceptance rules, and an
iterative rate-retrain loop around a pluggable segmentation backend.
"""

__version__ = "0.1.0"

from .cloud import PointCloud, ingest_xyz
from .clusters import Cluster, ClusterSet
from .config import Config
from .kde import VoxelGrid, kde_voxelize
from .labels import LabelMap
from .ratings import RatingClass, RatingRecord
from .tiles import Tile, build_tiles

__all__ = [
    "Cluster", "ClusterSet", "Config", "LabelMap", "PointCloud",
    "RatingClass", "RatingRecord", "Tile", "VoxelGrid",
    "build_tiles", "ingest_xyz", "kde_voxelize", "__version__",
]
