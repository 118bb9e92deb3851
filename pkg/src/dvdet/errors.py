"""Exception types shared across the pipeline."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class InputFormatError(ValueError):
    """An input file or string is malformed."""


class CheckpointError(RuntimeError):
    """A checkpoint cannot be read or does not fit the configured model."""
