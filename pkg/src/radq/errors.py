"""Shared exception types mapped to CLI exit codes by radq.cli."""


class ConfigError(ValueError):
    """Invalid configuration: bad dims, unknown keys, impossible strides."""


class DataError(ValueError):
    """Invalid data content: non-finite samples, oversized frames, bad specs."""


class FormatError(DataError):
    """Malformed frame/checkpoint file. Carries the byte offset of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericError(RuntimeError):
    """Non-finite value reached the training loop."""


class EvalError(ValueError):
    """Evaluation over an empty or inconsistent dataset."""
