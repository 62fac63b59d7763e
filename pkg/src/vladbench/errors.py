"""Error taxonomy shared across the package.

``FormatError`` and its subclasses mark malformed *input bytes* (files that
cannot be decoded); everything else raised by this package for bad values is
a plain ``ValueError``.  The CLI maps ``FormatError`` to exit code 2 and other
value errors to exit code 3, so the distinction is load-bearing.
"""

from __future__ import annotations


class FormatError(ValueError):
    """A file does not conform to its declared binary or JSON format."""


class BadMagicError(FormatError):
    """Leading magic bytes do not match the expected format tag."""


class UnsupportedVersionError(FormatError):
    """Magic matched but the format version is not one we can decode."""


class TruncatedFileError(FormatError):
    """File ended before the payload declared in its header."""


class NonFinitePayloadError(FormatError):
    """Decoded payload contains NaN or infinity."""


class ZeroPositivesError(ValueError):
    """A query has no positive images after junk removal."""
