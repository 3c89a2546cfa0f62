"""Grasp-type classification for single-view (2.5-D) point clouds.

Subpackages:

- ``cloud``    geometric preprocessing (normals, normalization, sampling)
- ``formats``  PCD files, dataset manifests, grasp labels
- ``synth``    synthetic labeled dataset generation
- ``nn``       dense neural-network kernel with manual gradients
- ``model``    the PointNet classifier (basic xyz and extended xyz+normals)
- ``pipeline`` splits, training loop, metrics, cross-validation
- ``cli``      command-line workflows
"""

from .labels import GraspLabel, LABEL_NAMES, NUM_CLASSES
from .cloud import (
    AugmentationParams,
    NormalEstimationParams,
    PointCloud,
    augment,
    centroid,
    covariance_eigen,
    estimate_normals,
    knn,
    normalize_unit_sphere,
    sample_uniform,
)

__all__ = [
    "GraspLabel",
    "LABEL_NAMES",
    "NUM_CLASSES",
    "PointCloud",
    "AugmentationParams",
    "NormalEstimationParams",
    "augment",
    "centroid",
    "covariance_eigen",
    "estimate_normals",
    "knn",
    "normalize_unit_sphere",
    "sample_uniform",
]

__version__ = "0.1.0"
