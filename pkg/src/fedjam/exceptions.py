"""Exception types raised across the package.

The CLI maps :class:`ConfigurationError` (and its subclasses) to exit code 2
and :class:`FormatError` / ``OSError`` to exit code 3.
"""


class ConfigurationError(ValueError):
    """Invalid configuration or input that violates a precondition."""


class InputError(ConfigurationError):
    """Data passed to an operation does not satisfy its preconditions."""


class DimensionError(ConfigurationError):
    """Tensor shapes do not agree with the layer or model they are fed to."""


class AggregationError(ConfigurationError):
    """Client updates that cannot be averaged together."""


class FormatError(ValueError):
    """Malformed FJAM/FJWT/partition file.

    ``offset`` is the byte offset where parsing failed when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
