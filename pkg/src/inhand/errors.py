"""Exception types shared across the library.

The CLI maps these onto process exit codes: input/parse problems are
distinct from registration failures, which are distinct from meshing
failures.
"""

from __future__ import annotations


class InHandError(Exception):
    """Base class for all library-specific errors."""


class InvalidDepthError(InHandError):
    """A depth value was zero or negative where a positive depth is required."""


class EmptyInputError(InHandError):
    """An operation received an empty cloud or empty correspondence data."""


class InsufficientPointsError(InHandError):
    """Fewer points than the operation's minimum (e.g. cloud smaller than k)."""


class UnderConstrainedError(InHandError):
    """Not enough effective (positively weighted) pairs to determine a pose."""


class DegenerateConfigurationError(InHandError):
    """Point configuration is collinear/coincident; the solve is ambiguous."""


class NoContactError(InHandError):
    """Contact search exhausted its distance cap without finding two bones."""


class DivergenceError(InHandError):
    """ICP refinement found no usable correspondences at its starting pose."""


class MatchFileParseError(InHandError):
    """A feature-match sidecar file is malformed.

    Carries the 1-based line number of the offending line.
    """

    def __init__(self, message: str, line_number: int) -> None:
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class EmptyMeshError(InHandError):
    """Surface extraction found no zero crossing inside observed space."""


class OpenMeshError(InHandError):
    """A probe that requires a closed (watertight) mesh got an open one."""


class DegenerateMotionError(InHandError):
    """A synthetic script produced a frame with no visible surface points."""


class FileFormatError(InHandError):
    """A data file (PLY, box file, ground truth) is malformed or unsupported."""


class ManifestError(InHandError):
    """A sequence manifest is missing, malformed, or references absent files."""
