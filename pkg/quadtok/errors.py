"""
Exception hierarchy shared by the library, the CLI and the HTTP service.

Every error is a ValueError so callers that only know about bad input
(the HTTP layer, scripts) can treat them uniformly. The CLI maps each class
to a process exit code through ``exit_code``.
"""


class QuadtokError(ValueError):
    """Base class for all tokenizer errors."""

    exit_code = 1


class FormatError(QuadtokError):
    """A file or payload does not follow its declared format."""

    exit_code = 3

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{message} (field: {field})" if field else message)


class DimensionError(QuadtokError):
    """Shapes or divisibility constraints do not hold."""

    exit_code = 4


class ContractError(QuadtokError):
    """A numeric or pre/post-condition contract is violated."""

    exit_code = 4


class UnreachableTargetError(ContractError):
    """The requested patch count cannot be hit exactly by the split loop."""
