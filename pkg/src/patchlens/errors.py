"""Exception hierarchy shared across the package."""


class PatchlensError(Exception):
    """Base class for package-specific failures."""


class ShapeError(PatchlensError):
    """A tensor, plane, or grid has dimensions inconsistent with its contract."""


class FormatError(PatchlensError):
    """A serialized container violates the interchange format."""


class BadMagicError(FormatError):
    """Container does not start with the expected magic bytes."""


class TruncatedError(FormatError):
    """Container payload ends before a declared tensor does."""


class UnsupportedOperationError(PatchlensError):
    """The operation needs data or weights the caller did not provide."""


class MissingFixtureError(PatchlensError, KeyError):
    """A fixture backend has no entry for the requested window."""
