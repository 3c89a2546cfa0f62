"""Point-cloud file I/O and dataset manifests.

Supports the ASCII subset of PCD v0.7 with fields ``x y z`` or
``x y z normal_x normal_y normal_z``, and a CSV manifest binding cloud
files to grasp labels. Coordinates are printed with 17 significant digits
so a write/parse round trip is bit-exact.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .errors import (
    DuplicatePathError,
    EmptyCloudError,
    EmptyManifestError,
    InvalidNormalError,
    MalformedBodyError,
    MalformedHeaderError,
    ManifestError,
    NonFiniteValueError,
    UnknownLabelError,
    UnsupportedEncodingError,
    UnsupportedFieldsError,
)
from .labels import GraspLabel, NUM_CLASSES

_HEADER_KEYS = (
    "VERSION",
    "FIELDS",
    "SIZE",
    "TYPE",
    "COUNT",
    "WIDTH",
    "HEIGHT",
    "VIEWPOINT",
    "POINTS",
    "DATA",
)

_XYZ_FIELDS = ("x", "y", "z")
_XYZN_FIELDS = ("x", "y", "z", "normal_x", "normal_y", "normal_z")

_MANIFEST_HEADER = ("path", "label", "object_id", "view_id", "source")


@dataclass
class ManifestRow:
    path: str
    label: GraspLabel
    object_id: str
    view_id: str
    source: str


@dataclass
class DatasetIndex:
    """Ordered manifest rows; paths are unique and labels validated."""

    rows: list[ManifestRow]

    def __post_init__(self):
        if not self.rows:
            raise EmptyManifestError("manifest has no rows")
        seen = set()
        for row in self.rows:
            if row.path in seen:
                raise DuplicatePathError(f"duplicate path {row.path!r}")
            seen.add(row.path)

    def __len__(self) -> int:
        return len(self.rows)


def parse_pcd(data: bytes) -> PointCloud:
    """Parse an ASCII PCD v0.7 byte sequence into a PointCloud.

    Normals, when present, must be unit length within 1e-3; they are
    renormalized when they deviate by more than 1e-6.
    """
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise UnsupportedEncodingError(f"file is not ASCII: {exc}") from None

    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    header: dict[str, list[str]] = {}
    body_start = None
    for i, line in enumerate(lines):
        tokens = line.split()
        key = tokens[0].upper()
        if key not in _HEADER_KEYS:
            raise MalformedHeaderError(f"unexpected header line {line!r}")
        if key in header:
            raise MalformedHeaderError(f"duplicate header key {key}")
        expected = _HEADER_KEYS[len(header)]
        if key != expected:
            raise MalformedHeaderError(f"expected header key {expected}, got {key}")
        header[key] = tokens[1:]
        if key == "DATA":
            body_start = i + 1
            break
    if body_start is None or len(header) != len(_HEADER_KEYS):
        missing = [k for k in _HEADER_KEYS if k not in header]
        raise MalformedHeaderError(f"missing header keys: {missing}")

    fields = tuple(header["FIELDS"])
    if fields == _XYZ_FIELDS:
        has_normals = False
    elif fields == _XYZN_FIELDS:
        has_normals = True
    else:
        raise UnsupportedFieldsError(f"unsupported FIELDS {' '.join(fields)!r}")

    nfields = len(fields)
    for key in ("SIZE", "TYPE", "COUNT"):
        if len(header[key]) != nfields:
            raise MalformedHeaderError(f"{key} must list one entry per field")
    if any(t != "F" for t in header["TYPE"]):
        raise UnsupportedFieldsError("only TYPE F fields are supported")
    if any(s not in ("4", "8") for s in header["SIZE"]):
        raise MalformedHeaderError("SIZE entries must be 4 or 8")
    if any(c != "1" for c in header["COUNT"]):
        raise UnsupportedFieldsError("only COUNT 1 fields are supported")
    if len(header["VIEWPOINT"]) != 7:
        raise MalformedHeaderError("VIEWPOINT must have 7 components")

    if len(header["DATA"]) != 1 or header["DATA"][0].lower() != "ascii":
        raise UnsupportedEncodingError(
            f"DATA must be ascii, got {' '.join(header['DATA'])!r}"
        )

    def _int_value(key: str) -> int:
        vals = header[key]
        if len(vals) != 1:
            raise MalformedHeaderError(f"{key} must have exactly one value")
        try:
            n = int(vals[0])
        except ValueError:
            raise MalformedHeaderError(f"{key} value {vals[0]!r} is not an integer") from None
        return n

    width, height, points = _int_value("WIDTH"), _int_value("HEIGHT"), _int_value("POINTS")
    if width * height != points:
        raise MalformedHeaderError(
            f"WIDTH*HEIGHT = {width * height} does not equal POINTS = {points}"
        )
    if points < 1:
        raise EmptyCloudError("PCD declares zero points")

    body = lines[body_start:]
    if len(body) != points:
        raise MalformedHeaderError(
            f"POINTS = {points} but body has {len(body)} data lines"
        )

    values = np.empty((points, nfields), dtype=np.float64)
    for r, line in enumerate(body):
        tokens = line.split()
        if len(tokens) != nfields:
            raise MalformedBodyError(
                f"data row {r} has {len(tokens)} values, expected {nfields}"
            )
        for c, tok in enumerate(tokens):
            try:
                values[r, c] = float(tok)
            except ValueError:
                raise MalformedBodyError(
                    f"data row {r}, column {c}: cannot parse {tok!r}"
                ) from None
    bad = ~np.isfinite(values)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise NonFiniteValueError(int(r), int(c))

    normals = None
    if has_normals:
        normals = values[:, 3:6]
        lengths = np.linalg.norm(normals, axis=1)
        if np.any(np.abs(lengths - 1.0) > 1e-3):
            worst = int(np.argmax(np.abs(lengths - 1.0)))
            raise InvalidNormalError(
                f"normal at row {worst} has length {lengths[worst]:.6f}, "
                "beyond the 1e-3 repair tolerance"
            )
        off = np.abs(lengths - 1.0) > 1e-6
        if off.any():
            normals = normals.copy()
            normals[off] /= lengths[off, None]
    return PointCloud(values[:, :3], normals=normals)


def write_pcd(cloud: PointCloud) -> bytes:
    """Serialize a cloud as ASCII PCD v0.7 with round-trip-exact reals."""
    fields = _XYZN_FIELDS if cloud.has_normals else _XYZ_FIELDS
    n = len(cloud)
    nfields = len(fields)
    out = io.StringIO()
    out.write("# .PCD v0.7 - Point Cloud Data file format\n")
    out.write("VERSION .7\n")
    out.write(f"FIELDS {' '.join(fields)}\n")
    out.write(f"SIZE{' 8' * nfields}\n")
    out.write(f"TYPE{' F' * nfields}\n")
    out.write(f"COUNT{' 1' * nfields}\n")
    out.write(f"WIDTH {n}\n")
    out.write("HEIGHT 1\n")
    out.write("VIEWPOINT 0 0 0 1 0 0 0\n")
    out.write(f"POINTS {n}\n")
    out.write("DATA ascii\n")
    data = (
        np.hstack([cloud.points, cloud.normals]) if cloud.has_normals else cloud.points
    )
    for row in data:
        out.write(" ".join(f"{v:.17g}" for v in row))
        out.write("\n")
    return out.getvalue().encode("ascii")


def load_manifest(data: bytes) -> DatasetIndex:
    """Parse a dataset manifest CSV into a validated index."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ManifestError(f"manifest is not UTF-8: {exc}") from None
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        head = next(reader)
    except StopIteration:
        raise EmptyManifestError("manifest is empty") from None
    if tuple(h.strip() for h in head) != _MANIFEST_HEADER:
        raise ManifestError(
            f"manifest header must be {','.join(_MANIFEST_HEADER)!r}, got {head!r}"
        )
    rows = []
    for i, record in enumerate(reader):
        if not record:
            continue
        if len(record) != len(_MANIFEST_HEADER):
            raise ManifestError(
                f"manifest row {i} has {len(record)} columns, expected 5"
            )
        path, token, object_id, view_id, source = (v.strip() for v in record)
        try:
            label = GraspLabel.from_token(token)
        except KeyError:
            raise UnknownLabelError(i, token) from None
        rows.append(ManifestRow(path, label, object_id, view_id, source))
    if not rows:
        raise EmptyManifestError("manifest has a header but no rows")
    return DatasetIndex(rows)


def write_manifest(index: DatasetIndex) -> bytes:
    """Serialize an index back to manifest CSV (inverse of load_manifest)."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(_MANIFEST_HEADER)
    for row in index.rows:
        writer.writerow([row.path, row.label.token, row.object_id, row.view_id, row.source])
    return out.getvalue().encode("utf-8")


def class_histogram(index: DatasetIndex) -> np.ndarray:
    """Per-class row counts, indexed by GraspLabel code."""
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for row in index.rows:
        counts[int(row.label)] += 1
    return counts
