"""Exception hierarchy shared across the toolkit.

The CLI maps these onto process exit codes: client failures exit 2,
input validation failures exit 3, numerical aborts exit 4.
"""

from __future__ import annotations


class EraseError(Exception):
    """Base class for all toolkit errors."""


class InputValidationError(EraseError):
    """Rejected input: bad shapes, bad values, missing files, misuse."""


class DegenerateRegionError(InputValidationError):
    """A required region (target / background / unmasked) is empty."""


class ClientError(EraseError):
    """External client failure (MLLM, Tag2Mask, judge).

    ``retryable`` distinguishes transport problems from permanent ones.
    """

    def __init__(self, message: str, *, retryable: bool = False):
        super().__init__(message)
        self.retryable = retryable


class ResponseParseError(ClientError):
    """A client response could not be parsed; carries the raw text."""

    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message, retryable=False)
        self.raw_text = raw_text


class NumericalAbortError(EraseError):
    """Optimization produced a non-finite loss; carries the partial trace."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class StateError(EraseError):
    """Operation invalid in the current state (e.g. double merge)."""
