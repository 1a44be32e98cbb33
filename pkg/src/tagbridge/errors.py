"""Exception types shared across the toolkit.

Every error that a pipeline command can surface maps to a distinct
process exit code (see EXIT_CODES); library callers catch the classes
directly.
"""


class TagbridgeError(Exception):
    """Base class for all toolkit errors."""


class BehindCamera(TagbridgeError):
    """A world point lies at or behind the camera's projection center."""


class DistortionInversionDiverged(TagbridgeError):
    """Fixed-point undistortion failed to converge."""


class InsufficientObservations(TagbridgeError):
    """Fewer than two rays/observations for a triangulation target."""

    def __init__(self, tag_id=None, n=0):
        self.tag_id = tag_id
        self.n = n
        what = f"tag {tag_id}: " if tag_id is not None else ""
        super().__init__(f"{what}{n} observation(s), need at least 2")


class DegenerateGeometry(TagbridgeError):
    """Geometry does not constrain the solution (parallel rays, collinear points, ...)."""


class MissingPose(TagbridgeError):
    """An observation references an image id with no known pose."""

    def __init__(self, image_id):
        self.image_id = image_id
        super().__init__(f"no pose for image id {image_id!r}")


class TooFewCorrespondences(TagbridgeError):
    """Rigid-transform estimation needs at least three point pairs."""


class ReflectionRequired(TagbridgeError):
    """Correspondences are best explained by a reflection; data is corrupt."""


class GaugeNotFixed(TagbridgeError):
    """Bundle problem frees all poses without anchoring any."""


class Underconstrained(TagbridgeError):
    """A free point is observed in fewer than two images."""

    def __init__(self, point_id, n_images):
        self.point_id = point_id
        super().__init__(f"point {point_id!r} seen in {n_images} image(s), need at least 2")


class SingularNormalEquations(TagbridgeError):
    """Damped normal equations could not be solved."""


class GimbalLock(TagbridgeError):
    """A pose's pitch angle is too close to +-90 degrees for the angle parameterization."""


class ImageTooSmall(TagbridgeError):
    """Image smaller than the census window."""


class DimensionMismatch(TagbridgeError):
    """Raster dimensions disagree."""


class InvalidSpec(TagbridgeError):
    """A synthetic scene specification violates its constraints."""


class NoCommonIds(TagbridgeError):
    """Estimated and truth point sets share no ids."""


class TooFewPoints(TagbridgeError):
    """Fewer than two common points for pairwise statistics."""


class ParseError(TagbridgeError):
    """A serialized file failed to parse."""

    def __init__(self, path, line, reason):
        self.path = path
        self.line = line
        self.reason = reason
        super().__init__(f"{path}: line {line}: {reason}")


# One distinct nonzero exit code per error class, for the CLI.
EXIT_CODES = {
    ParseError: 2,
    InsufficientObservations: 3,
    DegenerateGeometry: 4,
    TooFewCorrespondences: 5,
    MissingPose: 6,
    ReflectionRequired: 7,
    GaugeNotFixed: 8,
    Underconstrained: 9,
    SingularNormalEquations: 10,
    ImageTooSmall: 11,
    DimensionMismatch: 12,
    DistortionInversionDiverged: 13,
    InvalidSpec: 14,
    NoCommonIds: 15,
    TooFewPoints: 16,
    BehindCamera: 17,
    GimbalLock: 18,
}


def exit_code_for(exc) -> int:
    """Exit code for an exception instance (99 for unmapped toolkit errors)."""
    for cls, code in EXIT_CODES.items():
        if isinstance(exc, cls):
            return code
    return 99
