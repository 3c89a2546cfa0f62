"""Pure geometric operations on point clouds.

Centroid, unit-sphere normalization, exact k-nearest-neighbor queries,
covariance-based surface normal estimation, uniform sampling, and training
augmentation. All functions are pure: randomness comes in through an
explicit ``numpy.random.Generator`` and nothing mutates its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateCloudError,
    DegenerateNeighborhoodError,
    EmptyCloudError,
    IndexOutOfRangeError,
    InvalidConfigError,
    KTooLargeError,
    TooFewNeighborsError,
)
from .labels import GraspLabel

#: Eigenvalues below this are treated as zero when detecting collinear
#: neighborhoods.
_DEGENERATE_EIGENVALUE = 1e-15

_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass
class PointCloud:
    """An ordered set of 3-D points in meters, with optional unit normals.

    Invariants (checked on construction): at least one point, all
    coordinates finite, and when normals are present they match the point
    count and are unit length within 1e-6.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    label: GraspLabel | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        if pts.shape[0] == 0:
            raise EmptyCloudError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        self.points = pts

        if self.normals is not None:
            nrm = np.ascontiguousarray(np.asarray(self.normals, dtype=np.float64))
            if nrm.shape != pts.shape:
                raise ValueError(
                    f"normals shape {nrm.shape} does not match points shape {pts.shape}"
                )
            if not np.all(np.isfinite(nrm)):
                raise ValueError("normal components must be finite")
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                worst = int(np.argmax(np.abs(lengths - 1.0)))
                raise ValueError(
                    f"normal {worst} has length {lengths[worst]:.9f}, expected 1 within 1e-6"
                )
            self.normals = nrm

        if self.label is not None:
            self.label = GraspLabel(self.label)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None


@dataclass
class CovarianceEigen:
    """Covariance matrix of a neighborhood and its eigendecomposition.

    Eigenvalues are sorted ascending; ``eigenvectors[:, j]`` pairs with
    ``eigenvalues[j]`` and each eigenvector's sign is fixed so its first
    nonzero component is positive.
    """

    covariance: np.ndarray  # (3, 3)
    eigenvalues: np.ndarray  # (3,) ascending
    eigenvectors: np.ndarray  # (3, 3), columns


@dataclass
class NormalEstimationParams:
    """Neighborhood size and sensor position for normal estimation."""

    k: int = 100
    viewpoint: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.k < 3:
            raise InvalidConfigError(f"k must be at least 3, got {self.k}")
        vp = np.asarray(self.viewpoint, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(vp)):
            raise InvalidConfigError("viewpoint must be finite")
        self.viewpoint = vp


@dataclass
class AugmentationParams:
    """Up-axis rotation plus clipped Gaussian position jitter."""

    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    up_axis: str = "y"

    def __post_init__(self):
        if self.jitter_sigma < 0:
            raise InvalidConfigError("jitter_sigma must be nonnegative")
        if self.jitter_clip < self.jitter_sigma:
            raise InvalidConfigError("jitter_clip must be at least jitter_sigma")
        if self.up_axis not in _AXES:
            raise InvalidConfigError(f"up_axis must be one of x, y, z, got {self.up_axis!r}")


def centroid(cloud: PointCloud) -> np.ndarray:
    """Arithmetic mean of the points, as a length-3 vector."""
    if len(cloud) == 0:  # unreachable through the constructor, kept defensive
        raise EmptyCloudError("cannot take centroid of an empty cloud")
    return cloud.points.mean(axis=0)


def normalize_unit_sphere(cloud: PointCloud) -> tuple[PointCloud, np.ndarray, float]:
    """Shift to zero mean and scale into the unit sphere.

    Returns ``(normalized_cloud, shift, scale)`` where the original points
    are recovered as ``out * scale + shift``. Normals are carried through
    unchanged (translation and uniform scaling preserve directions).

    Raises DegenerateCloudError when all points coincide.
    """
    shift = centroid(cloud)
    shifted = cloud.points - shift
    radius = float(np.linalg.norm(shifted, axis=1).max())
    if radius == 0.0:
        raise DegenerateCloudError("all points coincide; no scale to normalize by")
    out = shifted / radius
    scale = radius
    # Rounding can leave the farthest point a few ulps outside the sphere;
    # contract requires max norm <= 1 exactly.
    m = float(np.linalg.norm(out, axis=1).max())
    while m > 1.0:
        out = out / m
        scale *= m
        m = float(np.linalg.norm(out, axis=1).max())
    return PointCloud(out, normals=cloud.normals, label=cloud.label), shift, scale


def knn(cloud: PointCloud, query_index: int, k: int) -> np.ndarray:
    """Indices of the k points nearest to ``points[query_index]``.

    The query point itself is included (its distance is zero). Ties are
    broken deterministically toward the lower index. Exact brute force.
    """
    n = len(cloud)
    if not 0 <= query_index < n:
        raise IndexOutOfRangeError(f"query index {query_index} outside [0, {n})")
    if not 1 <= k <= n:
        raise KTooLargeError(f"k={k} outside [1, {n}]")
    diff = cloud.points - cloud.points[query_index]
    d2 = np.einsum("ij,ij->i", diff, diff)
    order = np.lexsort((np.arange(n), d2))
    return order[:k].copy()


def _jacobi_eigh3(mats: np.ndarray, max_sweeps: int = 30) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a batch of symmetric 3x3 matrices.

    Cyclic Jacobi rotations, vectorized over the batch; converges to
    machine precision in a handful of sweeps. Returns ``(vals, vecs)``
    unsorted; ``vecs[b, :, j]`` pairs with ``vals[b, j]``.
    """
    a = np.array(mats, dtype=np.float64)
    m = a.shape[0]
    v = np.broadcast_to(np.eye(3), (m, 3, 3)).copy()
    scale = np.abs(a).max(axis=(1, 2))
    scale[scale == 0.0] = 1.0
    for _ in range(max_sweeps):
        off = np.maximum(
            np.abs(a[:, 0, 1]), np.maximum(np.abs(a[:, 0, 2]), np.abs(a[:, 1, 2]))
        )
        if np.all(off <= 1e-15 * scale):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[:, p, q]
            active = np.abs(apq) > 1e-18 * scale
            if not np.any(active):
                continue
            theta = np.zeros(m)
            np.divide(a[:, q, q] - a[:, p, p], 2.0 * apq, out=theta, where=active)
            denom = np.abs(theta) + np.sqrt(theta * theta + 1.0)
            t = np.where(theta == 0.0, 1.0, np.sign(theta)) / denom
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)

            r = 3 - p - q  # the remaining index
            app, aqq = a[:, p, p].copy(), a[:, q, q].copy()
            arp, arq = a[:, r, p].copy(), a[:, r, q].copy()
            a[:, p, p] = c * c * app - 2.0 * s * c * apq + s * s * aqq
            a[:, q, q] = s * s * app + 2.0 * s * c * apq + c * c * aqq
            a[:, p, q] = 0.0
            a[:, q, p] = 0.0
            a[:, r, p] = c * arp - s * arq
            a[:, p, r] = a[:, r, p]
            a[:, r, q] = s * arp + c * arq
            a[:, q, r] = a[:, r, q]

            vp = v[:, :, p].copy()
            v[:, :, p] = c[:, None] * vp - s[:, None] * v[:, :, q]
            v[:, :, q] = s[:, None] * vp + c[:, None] * v[:, :, q]
    vals = np.stack([a[:, 0, 0], a[:, 1, 1], a[:, 2, 2]], axis=1)
    return vals, v


def _sorted_eigh3(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched 3x3 symmetric eigendecomposition with canonical ordering.

    Ascending eigenvalues; each eigenvector's sign makes its first
    component of magnitude > 1e-12 positive.
    """
    vals, vecs = _jacobi_eigh3(mats)
    order = np.argsort(vals, axis=1, kind="stable")
    vals = np.take_along_axis(vals, order, axis=1)
    vecs = np.take_along_axis(vecs, order[:, None, :], axis=2)
    # Sign convention, applied per eigenvector column.
    for j in range(3):
        col = vecs[:, :, j]
        signs = np.where(
            np.abs(col[:, 0]) > 1e-12,
            np.sign(col[:, 0]),
            np.where(np.abs(col[:, 1]) > 1e-12, np.sign(col[:, 1]), np.sign(col[:, 2])),
        )
        signs[signs == 0.0] = 1.0
        vecs[:, :, j] = col * signs[:, None]
    return vals, vecs


def _neighborhood_covariances(points: np.ndarray, neighbor_indices: np.ndarray) -> np.ndarray:
    """Biased covariance (divide by k) of each row of neighbor indices."""
    gathered = points[neighbor_indices]  # (..., k, 3)
    centered = gathered - gathered.mean(axis=-2, keepdims=True)
    return np.einsum("...ki,...kj->...ij", centered, centered) / neighbor_indices.shape[-1]


def covariance_eigen(cloud: PointCloud, neighbor_indices) -> CovarianceEigen:
    """Neighborhood covariance (normalized by k) and its eigendecomposition."""
    idx = np.asarray(neighbor_indices, dtype=np.int64).reshape(-1)
    if idx.size < 3:
        raise TooFewNeighborsError(f"need at least 3 neighbors, got {idx.size}")
    n = len(cloud)
    if np.any(idx < 0) or np.any(idx >= n):
        raise IndexOutOfRangeError("neighbor index outside [0, n)")
    cov = _neighborhood_covariances(cloud.points, idx[None, :])[0]
    vals, vecs = _sorted_eigh3(cov[None])
    return CovarianceEigen(covariance=cov, eigenvalues=vals[0], eigenvectors=vecs[0])


def estimate_normals(
    cloud: PointCloud, params: NormalEstimationParams | None = None
) -> PointCloud:
    """Estimate unit surface normals from k-neighborhood covariances.

    Each point's normal is the eigenvector of the smallest eigenvalue of
    its k-nearest-neighborhood covariance (the neighborhood includes the
    point itself), flipped toward ``params.viewpoint`` so that
    ``normal . (viewpoint - p) >= 0``.

    Raises KTooLargeError when ``k >= n`` and DegenerateNeighborhoodError
    when a neighborhood is collinear.
    """
    if params is None:
        params = NormalEstimationParams()
    n = len(cloud)
    if params.k >= n:
        raise KTooLargeError(f"k={params.k} requires more than k points, cloud has {n}")
    tree = cKDTree(cloud.points)
    _, idx = tree.query(cloud.points, k=params.k)
    covs = _neighborhood_covariances(cloud.points, idx)
    vals, vecs = _sorted_eigh3(covs)

    degenerate = (vals[:, 0] < _DEGENERATE_EIGENVALUE) & (vals[:, 1] < _DEGENERATE_EIGENVALUE)
    if np.any(degenerate):
        raise DegenerateNeighborhoodError(int(np.argmax(degenerate)))

    normals = vecs[:, :, 0]
    toward = params.viewpoint[None, :] - cloud.points
    flip = np.einsum("ij,ij->i", normals, toward) < 0.0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(cloud.points.copy(), normals=normals, label=cloud.label)


def sample_uniform(cloud: PointCloud, m: int, rng: np.random.Generator) -> PointCloud:
    """Resample the cloud to exactly ``m`` points.

    With ``n >= m``: m distinct indices uniformly without replacement.
    With ``n < m``: every point once, plus ``m - n`` uniform redraws, so
    the source cloud is always fully covered.
    """
    n = len(cloud)
    if m < 1:
        raise ValueError(f"m must be positive, got {m}")
    if n >= m:
        idx = rng.choice(n, size=m, replace=False)
    else:
        extra = rng.choice(n, size=m - n, replace=True)
        idx = np.concatenate([np.arange(n), extra])
    normals = cloud.normals[idx] if cloud.has_normals else None
    return PointCloud(cloud.points[idx], normals=normals, label=cloud.label)


def rotation_about_axis(axis: str, angle: float) -> np.ndarray:
    """Right-handed rotation matrix about a coordinate axis."""
    if axis not in _AXES:
        raise ValueError(f"axis must be one of x, y, z, got {axis!r}")
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def augment(
    cloud: PointCloud, params: AugmentationParams, rng: np.random.Generator
) -> PointCloud:
    """One random up-axis rotation plus clipped Gaussian position jitter.

    The same rotation is applied to points and normals; jitter moves the
    positions only, so normals stay unit length.
    """
    theta = rng.uniform(0.0, 2.0 * np.pi)
    rot = rotation_about_axis(params.up_axis, theta)
    pts = cloud.points @ rot.T
    normals = cloud.normals @ rot.T if cloud.has_normals else None
    if params.jitter_sigma > 0.0:
        jitter = rng.normal(0.0, params.jitter_sigma, size=pts.shape)
        np.clip(jitter, -params.jitter_clip, params.jitter_clip, out=jitter)
        pts = pts + jitter
    return PointCloud(pts, normals=normals, label=cloud.label)
