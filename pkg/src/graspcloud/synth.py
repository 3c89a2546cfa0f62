"""Synthetic labeled 2.5-D point clouds of graspable primitives.

Surfaces of boxes, cylinders, and spheres are sampled uniformly by area
with exact analytic normals, posed, and reduced to a single-view subset
with a perspective depth buffer, emulating one capture from a depth
sensor. Class recipes map shape families to the four grasp types so the
full training pipeline can run without any external dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import PointCloud
from .errors import InvalidConfigError, ViewpointInsideObjectError
from .formats import DatasetIndex, ManifestRow, write_manifest, write_pcd
from .labels import GraspLabel
from .parallel import ordered_map

_KINDS = ("box", "cylinder", "sphere")


@dataclass
class ShapeSpec:
    """A posed primitive. ``dimensions`` are the full axis-aligned extents
    of the canonical (unposed) shape: a cylinder's axis is y, so its
    dimensions are (diameter, height, diameter); a sphere's are all equal.
    ``rotation`` is a unit quaternion in (w, x, y, z) order.
    """

    kind: str
    dimensions: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    surface_density: float = 2e5

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InvalidConfigError(f"kind must be one of {_KINDS}, got {self.kind!r}")
        dims = np.asarray(self.dimensions, dtype=np.float64).reshape(3)
        if np.any(dims <= 0):
            raise InvalidConfigError("dimensions must be positive")
        self.dimensions = dims
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise InvalidConfigError("rotation quaternion must be unit norm")
        self.rotation = q
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.kind == "cylinder" and abs(dims[0] - dims[2]) > 1e-12:
            raise InvalidConfigError("cylinder dimensions must be (d, h, d)")
        if self.kind == "sphere" and (
            abs(dims[0] - dims[1]) > 1e-12 or abs(dims[0] - dims[2]) > 1e-12
        ):
            raise InvalidConfigError("sphere dimensions must be equal")
        if self.surface_density <= 0:
            raise InvalidConfigError("surface_density must be positive")


@dataclass
class SynthConfig:
    """Dataset-level generation settings."""

    per_class: int
    noise_sigma: float = 0.002
    camera_distance: float = 0.6
    grid_resolution: int = 256
    seed: int = 0
    hard_mode: bool = False  # overlapping scale/aspect distributions

    def __post_init__(self):
        if self.per_class < 1:
            raise InvalidConfigError("per_class must be at least 1")
        if self.grid_resolution < 16:
            raise InvalidConfigError("grid_resolution must be at least 16")
        if self.noise_sigma < 0:
            raise InvalidConfigError("noise_sigma must be nonnegative")
        if self.camera_distance <= 0:
            raise InvalidConfigError("camera_distance must be positive")


def quaternion_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quaternion_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def axis_angle_quaternion(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = angle / 2.0
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def _sample_box(dims, n, rng):
    a, b, c = dims
    areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    for face in range(6):
        m = faces == face
        axis, sign = divmod(face, 2)
        sign = 1.0 if sign == 0 else -1.0
        others = [i for i in range(3) if i != axis]
        pts[m, axis] = sign * dims[axis] / 2.0
        pts[m, others[0]] = u[m] * dims[others[0]]
        pts[m, others[1]] = v[m] * dims[others[1]]
        nrm[m, axis] = sign
    return pts, nrm


def _sample_cylinder(dims, n, rng):
    r, h = dims[0] / 2.0, dims[1]
    areas = np.array([2 * np.pi * r * h, np.pi * r * r, np.pi * r * r])
    part = rng.choice(3, size=n, p=areas / areas.sum())
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    lat = part == 0
    pts[lat, 0] = r * np.cos(theta[lat])
    pts[lat, 2] = r * np.sin(theta[lat])
    pts[lat, 1] = rng.uniform(-h / 2.0, h / 2.0, size=int(lat.sum()))
    nrm[lat, 0] = np.cos(theta[lat])
    nrm[lat, 2] = np.sin(theta[lat])
    for which, sign in ((1, 1.0), (2, -1.0)):
        m = part == which
        rho = r * np.sqrt(rng.uniform(0.0, 1.0, size=int(m.sum())))
        pts[m, 0] = rho * np.cos(theta[m])
        pts[m, 2] = rho * np.sin(theta[m])
        pts[m, 1] = sign * h / 2.0
        nrm[m, 1] = sign
    return pts, nrm


def _sample_sphere(dims, n, rng):
    r = dims[0] / 2.0
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return r * dirs, dirs


def surface_area(spec: ShapeSpec) -> float:
    a, b, c = spec.dimensions
    if spec.kind == "box":
        return 2.0 * (a * b + b * c + a * c)
    if spec.kind == "cylinder":
        r, h = a / 2.0, b
        return 2.0 * np.pi * r * h + 2.0 * np.pi * r * r
    r = a / 2.0
    return 4.0 * np.pi * r * r


def generate_primitive(spec: ShapeSpec, rng: np.random.Generator) -> PointCloud:
    """Sample the primitive's surface uniformly by area, posed, with exact
    outward normals."""
    n = max(1, int(round(spec.surface_density * surface_area(spec))))
    sampler = {"box": _sample_box, "cylinder": _sample_cylinder, "sphere": _sample_sphere}
    pts, nrm = sampler[spec.kind](spec.dimensions, n, rng)
    rot = quaternion_matrix(spec.rotation)
    pts = pts @ rot.T + spec.translation
    nrm = nrm @ rot.T
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(pts, normals=nrm)


def single_view_cull(
    cloud: PointCloud, viewpoint, grid_resolution: int = 256
) -> PointCloud:
    """Keep only the surface visible from ``viewpoint``.

    Points are perspective-projected onto a ``grid_resolution`` squared
    image plane facing the cloud centroid; within each cell only points
    within 1% depth of the nearest survive. Normals are re-oriented toward
    the viewpoint.
    """
    vp = np.asarray(viewpoint, dtype=np.float64).reshape(3)
    center = cloud.points.mean(axis=0)
    radius = float(np.linalg.norm(cloud.points - center, axis=1).max())
    if np.linalg.norm(vp - center) <= radius:
        raise ViewpointInsideObjectError(
            "viewpoint lies inside the cloud's bounding sphere"
        )
    forward = center - vp
    forward /= np.linalg.norm(forward)
    up_hint = np.array([0.0, 1.0, 0.0])
    if abs(forward @ up_hint) > 0.99:
        up_hint = np.array([1.0, 0.0, 0.0])
    right = np.cross(forward, up_hint)
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)

    v = cloud.points - vp
    depth = v @ forward
    u = (v @ right) / depth
    w = (v @ up) / depth
    res = grid_resolution
    iu = _to_cells(u, res)
    iw = _to_cells(w, res)
    cell = iu * res + iw
    nearest = np.full(res * res, np.inf)
    np.minimum.at(nearest, cell, depth)
    keep = depth <= nearest[cell] * 1.01

    normals = None
    if cloud.has_normals:
        normals = cloud.normals[keep].copy()
        flip = np.einsum("ij,ij->i", normals, vp - cloud.points[keep]) < 0.0
        normals[flip] *= -1.0
    return PointCloud(cloud.points[keep], normals=normals, label=cloud.label)


def _to_cells(coords: np.ndarray, res: int) -> np.ndarray:
    lo, hi = coords.min(), coords.max()
    span = hi - lo
    if span <= 0.0:
        return np.zeros(len(coords), dtype=np.int64)
    idx = np.floor((coords - lo) / span * res).astype(np.int64)
    return np.clip(idx, 0, res - 1)


# -- class recipes ---------------------------------------------------------------

# Dimension ranges in meters. The palmar-wrist-neutral heights stay above
# 1.5x the largest possible rotated cross-section (plus noise margin) so
# the tall-object guarantee holds for every generated cloud.
_EASY = {
    GraspLabel.PINCH: dict(thickness=(0.004, 0.012), width=(0.05, 0.10)),
    GraspLabel.TRIPOD: dict(diameter=(0.03, 0.06), aspect=(0.8, 1.3)),
    GraspLabel.PALMAR_WRIST_NEUTRAL: dict(
        cyl_d=(0.04, 0.07), box_side=(0.03, 0.05), height=(0.15, 0.24)
    ),
    GraspLabel.PALMAR_WRIST_PRONATED: dict(cross=(0.04, 0.07), length=(0.15, 0.24)),
}

_HARD = {
    GraspLabel.PINCH: dict(thickness=(0.005, 0.022), width=(0.04, 0.12)),
    GraspLabel.TRIPOD: dict(diameter=(0.025, 0.072), aspect=(0.85, 1.45)),
    GraspLabel.PALMAR_WRIST_NEUTRAL: dict(
        cyl_d=(0.035, 0.075), box_side=(0.03, 0.05), height=(0.15, 0.30)
    ),
    GraspLabel.PALMAR_WRIST_PRONATED: dict(cross=(0.03, 0.075), length=(0.12, 0.30)),
}


def _class_shape(label: GraspLabel, rng: np.random.Generator, hard: bool) -> ShapeSpec:
    r = _HARD[label] if hard else _EASY[label]
    yaw = axis_angle_quaternion([0.0, 1.0, 0.0], rng.uniform(0.0, 2.0 * np.pi))
    if label == GraspLabel.PINCH:
        t = rng.uniform(*r["thickness"])
        w = rng.uniform(*r["width"])
        l = rng.uniform(*r["width"])
        return ShapeSpec("box", (w, t, l), rotation=yaw)
    if label == GraspLabel.TRIPOD:
        d = rng.uniform(*r["diameter"])
        if rng.random() < 0.5:
            return ShapeSpec("sphere", (d, d, d), rotation=yaw)
        h = d * rng.uniform(*r["aspect"])
        return ShapeSpec("cylinder", (d, h, d), rotation=yaw)
    if label == GraspLabel.PALMAR_WRIST_NEUTRAL:
        h = rng.uniform(*r["height"])
        if rng.random() < 0.5:
            d = rng.uniform(*r["cyl_d"])
            return ShapeSpec("cylinder", (d, h, d), rotation=yaw)
        sx = rng.uniform(*r["box_side"])
        sz = rng.uniform(*r["box_side"])
        return ShapeSpec("box", (sx, h, sz), rotation=yaw)
    length = rng.uniform(*r["length"])
    cross = rng.uniform(*r["cross"])
    # built upright along y, then laid down about z before the yaw
    lay = axis_angle_quaternion([0.0, 0.0, 1.0], np.pi / 2.0)
    pose = quaternion_multiply(yaw, lay)
    if rng.random() < 0.5:
        return ShapeSpec("cylinder", (cross, length, cross), rotation=pose)
    cross2 = rng.uniform(*r["cross"])
    return ShapeSpec("box", (cross, length, cross2), rotation=pose)


def _synthesize_cloud(args) -> PointCloud:
    label, seed_seq, config = args
    rng = np.random.default_rng(seed_seq)
    spec = _class_shape(label, rng, config.hard_mode)
    target = rng.integers(2500, 4000)
    spec.surface_density = float(target) / surface_area(spec)
    full = generate_primitive(spec, rng)

    azimuth = rng.uniform(0.0, 2.0 * np.pi)
    elevation = rng.uniform(np.deg2rad(15.0), np.deg2rad(50.0))
    vp = config.camera_distance * np.array(
        [
            np.cos(elevation) * np.cos(azimuth),
            np.sin(elevation),
            np.cos(elevation) * np.sin(azimuth),
        ]
    )
    visible = single_view_cull(full, vp, config.grid_resolution)
    pts = visible.points
    if config.noise_sigma > 0.0:
        pts = pts + rng.normal(0.0, config.noise_sigma, size=pts.shape)
    # normals are dropped: sensor-style data carries xyz only, and the
    # pipeline re-estimates normals from geometry
    return PointCloud(pts, label=label)


def generate_dataset(config: SynthConfig) -> tuple[list[PointCloud], DatasetIndex]:
    """``per_class`` clouds for each grasp class, plus a matching manifest.

    Pure function of the config: the same seed reproduces every cloud bit
    for bit, regardless of worker count.
    """
    root = np.random.SeedSequence(config.seed)
    children = root.spawn(4 * config.per_class)
    jobs = []
    rows = []
    for label in GraspLabel:
        for i in range(config.per_class):
            idx = int(label) * config.per_class + i
            jobs.append((label, children[idx], config))
            name = f"{label.token}_{i:04d}"
            rows.append(ManifestRow(f"{name}.pcd", label, name, "v0", "synthetic"))
    clouds = ordered_map(_synthesize_cloud, jobs)
    return clouds, DatasetIndex(rows)


def write_dataset(clouds: list[PointCloud], index: DatasetIndex, out_dir) -> None:
    """Write one PCD per manifest row plus ``manifest.csv`` into a directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if len(clouds) != len(index.rows):
        raise InvalidConfigError("cloud list and manifest rows differ in length")
    for cloud, row in zip(clouds, index.rows):
        (out / row.path).write_bytes(write_pcd(cloud))
    (out / "manifest.csv").write_bytes(write_manifest(index))
