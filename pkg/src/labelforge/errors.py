"""Exception types shared across modules.

Module-specific failures (provider errors, schema violations, ...) live in
the module that raises them; only the cross-cutting ones are defined here.
"""

from __future__ import annotations


class LabelForgeError(Exception):
    """Base class for all package errors."""


class ParseError(LabelForgeError):
    """Input file or payload could not be parsed."""


class ValidationError(LabelForgeError):
    """A value failed validation; `field` names the offending field."""

    def __init__(self, field: str, message: str = ""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)
