"""Exception types shared across the toolkit.

ValidationError maps to CLI exit code 2, CraftRuntimeError to exit code 3.
"""


class CarpetError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(CarpetError, ValueError):
    """Bad inputs: shapes, ranges, placements, configs, manifests."""


class PlacementError(ValidationError):
    """Placement rectangle does not fit the target image."""


class CraftRuntimeError(CarpetError, RuntimeError):
    """Optimization or evaluation failed at runtime (e.g. non-finite loss)."""
