"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI maps categories to
exit codes so scripts can tell a malformed file from a config mistake.
"""

from __future__ import annotations


class OssodError(Exception):
    category = "error"


class PpmError(OssodError):
    category = "ppm"


class PpmHeaderError(PpmError):
    """Magic number, dimensions or whitespace layout are not a valid P6 header."""


class PpmTruncatedError(PpmError):
    """Payload holds fewer bytes than the header promises."""


class PpmMaxvalError(PpmError):
    """Only 8-bit pixmaps (maxval 255) are supported."""


class RasterError(OssodError):
    category = "raster"


class AnnotationError(OssodError):
    category = "annotations"


class AnnotationSyntaxError(AnnotationError):
    pass


class SchemaError(AnnotationError):
    pass


class DanglingReferenceError(AnnotationError):
    pass


class CategoryMismatchError(AnnotationError):
    pass


class MissingScoreError(AnnotationError):
    pass


class LibraryError(OssodError):
    category = "library"


class FusionError(OssodError):
    category = "fusion"


class EmaError(OssodError):
    category = "ema"


class WorldError(OssodError):
    category = "world"


class ModelError(OssodError):
    category = "model"


class ConfigError(OssodError):
    category = "config"


class TrainingError(OssodError):
    category = "training"


EXIT_CODES = {
    "error": 1,
    "ppm": 3,
    "raster": 4,
    "annotations": 5,
    "library": 6,
    "fusion": 7,
    "ema": 8,
    "world": 9,
    "model": 10,
    "config": 11,
    "training": 12,
}
