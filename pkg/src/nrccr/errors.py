"""Exceptions shared across modules, mapped to CLI exit codes.

Config and format problems exit with code 2; numeric failures during
training exit with code 3.
"""


class ConfigError(ValueError):
    """Invalid or unknown configuration; the message names the offending key."""


class CorpusFormatError(ValueError):
    """Malformed corpus directory; the message names file and line."""


class CheckpointFormatError(ValueError):
    """Unrecognized or inconsistent checkpoint file."""


class TrainingDivergenceError(RuntimeError):
    """Non-finite loss; carries the epoch/batch coordinates."""

    def __init__(self, epoch: int, batch_index: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index
