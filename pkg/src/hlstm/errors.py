"""Exception types shared across the toolkit."""


class ValidationError(ValueError):
    """Rejected arguments or configuration (CLI exit code 1)."""


class NumericError(ValueError):
    """Non-finite values where finite numbers are required."""


class DataError(ValueError):
    """Malformed dataset files or structurally inconsistent datasets."""


class DegenerateBatchError(RuntimeError):
    """A sampled batch carries no observed target at all; caller should resample."""
