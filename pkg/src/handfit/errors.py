"""Exception hierarchy shared across the package."""


class HandfitError(Exception):
    """Base class for all errors raised by this package."""


class GeometryError(HandfitError):
    """Degenerate or invalid geometric input (non-convex hull, zero volume, ...)."""


class ModelError(HandfitError):
    """Invalid articulated model definition.

    Carries a stable ``code`` string so callers can distinguish failure modes
    (parse errors vs. structural problems) without string matching.
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# Model error codes
PARSE_ERROR = "parse_error"
NON_TREE = "non_tree"
NON_CONVEX = "non_convex"
MISSING_TAG = "missing_tag"
BAD_LIMITS = "bad_limits"
BAD_REFERENCE = "bad_reference"
BAD_SCALE = "bad_scale"
BAD_ANCHOR = "bad_anchor"
BAD_CHAIN = "bad_chain"


class DynamicsError(HandfitError):
    """Invalid simulation input (unknown body reference, non-finite parameter)."""


class FileFormatError(HandfitError):
    """Corrupt or unsupported on-disk data (depth sequences, ground truth)."""


class ConfigError(HandfitError):
    """Invalid scenario or tracker configuration."""
