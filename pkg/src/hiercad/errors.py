"""Exception hierarchy shared across the toolkit.

Every rejection carries a machine-readable ``code`` so callers (CLI,
service, tests) can branch on the reason without string matching.
"""


class CadError(Exception):
    """Base class for all toolkit errors."""

    code = "error"

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class RangeError(CadError):
    """A numeric value is outside its documented domain."""

    code = "range"


class ValidationError(CadError):
    """A structurally well-formed object violates a model invariant."""

    code = "validation"

    def __init__(self, message, code=None, **details):
        super().__init__(message, **details)
        if code is not None:
            self.code = code


class CapError(ValidationError):
    """A dataset-filter cap is exceeded; ``code`` names the violated cap."""


class ParseError(CadError):
    """Token stream rejected; ``token_index`` locates the offending token."""

    code = "parse"

    def __init__(self, message, token_index, code=None):
        super().__init__(message, token_index=token_index)
        self.token_index = token_index
        if code is not None:
            self.code = code


class GenerationError(CadError):
    """Autoregressive decoding exceeded a hard limit."""

    code = "generation"
