"""Exception types raised across the library.

Every error the library raises deliberately derives from
:class:`GraspCloudError`, so callers (and the CLI) can catch one base class
and still get a precise type for tests and dispatch.
"""


class GraspCloudError(Exception):
    """Base class for all library errors."""


# -- geometry ----------------------------------------------------------------

class EmptyCloudError(GraspCloudError):
    """A point cloud with zero points was supplied or constructed."""


class DegenerateCloudError(GraspCloudError):
    """All points coincide, so there is no scale to normalize by."""


class IndexOutOfRangeError(GraspCloudError):
    """A point index is outside ``[0, n)``."""


class KTooLargeError(GraspCloudError):
    """A neighborhood size ``k`` exceeds what the cloud can supply."""


class TooFewNeighborsError(GraspCloudError):
    """A covariance neighborhood has fewer than 3 points."""


class DegenerateNeighborhoodError(GraspCloudError):
    """A neighborhood is collinear; no unique surface normal exists."""

    def __init__(self, point_index: int):
        self.point_index = point_index
        super().__init__(
            f"neighborhood of point {point_index} is collinear; "
            "no surface normal can be estimated (try a smaller k)"
        )


# -- file formats -------------------------------------------------------------

class FormatError(GraspCloudError):
    """Base class for file parsing/serialization errors."""


class MalformedHeaderError(FormatError):
    """PCD header is missing keys, repeats keys, or disagrees with the body."""


class MalformedBodyError(FormatError):
    """A PCD data row cannot be parsed."""


class UnsupportedFieldsError(FormatError):
    """PCD FIELDS are not ``x y z`` or ``x y z normal_x normal_y normal_z``."""


class UnsupportedEncodingError(FormatError):
    """PCD DATA encoding is not ``ascii``."""


class NonFiniteValueError(FormatError):
    """A PCD value is NaN or infinite."""

    def __init__(self, row: int, column: int):
        self.row = row
        self.column = column
        super().__init__(f"non-finite value at data row {row}, column {column}")


class InvalidNormalError(FormatError):
    """A stored normal deviates too far from unit length to repair."""


class ManifestError(FormatError):
    """Base class for dataset manifest errors."""


class UnknownLabelError(ManifestError):
    """A manifest row carries an unrecognized grasp label token."""

    def __init__(self, row: int, token: str):
        self.row = row
        self.token = token
        super().__init__(f"unknown grasp label {token!r} at manifest row {row}")


class DuplicatePathError(ManifestError):
    """Two manifest rows reference the same cloud file."""


class EmptyManifestError(ManifestError):
    """The manifest contains no data rows."""


# -- synthetic data -----------------------------------------------------------

class ViewpointInsideObjectError(GraspCloudError):
    """The camera viewpoint lies inside the cloud's bounding sphere."""


# -- neural network kernel ----------------------------------------------------

class ShapeMismatchError(GraspCloudError):
    """Tensor shapes are inconsistent with the operation's contract."""


class NonFiniteTensorError(GraspCloudError):
    """An operation produced NaN or infinity."""


class InsufficientBatchError(GraspCloudError):
    """Batch statistics would be computed over fewer than 2 samples."""


class InvalidLabelError(GraspCloudError):
    """A class label is outside the valid code range."""


# -- model --------------------------------------------------------------------

class InvalidConfigError(GraspCloudError):
    """A model or training configuration fails validation."""


class MissingNormalsError(GraspCloudError):
    """An extended (xyz+normals) model received a cloud without normals."""


class WrongPointCountError(GraspCloudError):
    """A cloud's point count does not match the model's expected count."""


class CheckpointError(GraspCloudError):
    """Base class for checkpoint serialization errors."""


class BadMagicError(CheckpointError):
    """Checkpoint bytes do not start with the expected magic marker."""


class VersionMismatchError(CheckpointError):
    """Checkpoint format version is not supported."""


class ChecksumMismatchError(CheckpointError):
    """Checkpoint integrity checksum does not match its payload."""


# -- pipeline -----------------------------------------------------------------

class ClassTooSmallError(GraspCloudError):
    """A grasp class has too few members for the requested partition."""


class BatchTooSmallError(GraspCloudError):
    """Configured batch size is too small for batch normalization."""
