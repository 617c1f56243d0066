"""Error taxonomy shared by all qlorakit modules.

Every failure a caller is expected to branch on maps to one of these
types; the CLI translates them to stable exit codes.
"""


class QlorakitError(Exception):
    """Base class for all package errors."""


class ShapeError(QlorakitError, ValueError):
    """Matrix dimensions do not compose; message names both shapes."""


class InputError(QlorakitError, ValueError):
    """A runtime input (data, tokens, file contents) violates a precondition."""


class ConfigError(QlorakitError, ValueError):
    """A configuration value or key is invalid; message names the key."""


class QAParseError(QlorakitError, ValueError):
    """An LLM response did not match the expected grammar.

    Carries the raw response text so retry logic can log it.
    """

    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text


class TransportError(QlorakitError, RuntimeError):
    """A remote backend was unreachable or kept failing; names the endpoint."""


class NumericError(QlorakitError, ArithmeticError):
    """A non-finite value appeared where the math requires finite numbers."""
