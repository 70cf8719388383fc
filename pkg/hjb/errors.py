"""Exceptions raised by the hjb package.

Validation problems derive from ``ValueError`` so callers that only know about
bad input can still catch them; failures of a numerical pipeline derive from
``RuntimeError``.
"""


class UsageError(ValueError):
    """An operation was called with arguments that violate its preconditions."""


class DegreeError(UsageError):
    """A polynomial or multiplier degree has the wrong parity or sign."""


class UnsupportedRegionError(UsageError):
    """A region is not one of the product shapes with closed-form moments."""


class CorruptionError(ValueError):
    """A certificate does not fit the program it claims to certify."""


class SdpaFormatError(ValueError):
    """An SDPA problem or solution file could not be parsed."""

    def __init__(self, path: str, line: int, message: str) -> None:
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class SynthesisError(RuntimeError):
    """A synthesis step could not produce a usable result."""


class InitialControllerError(SynthesisError):
    """The over-approximation program is infeasible for the given controller."""

    def __init__(self, detail: str = "") -> None:
        message = "initial controller insufficient on X^h"
        super().__init__(f"{message} ({detail})" if detail else message)
