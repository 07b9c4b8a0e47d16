"""Exception types raised across the package."""


class InvalidParameterError(ValueError):
    """A numeric or shape argument is outside its valid domain."""


class MiningError(ValueError):
    """Hard-triplet mining found no positive or no negative for an anchor."""

    def __init__(self, anchor_index, reason):
        self.anchor_index = anchor_index
        super().__init__(f"anchor {anchor_index}: {reason}")


class ConfigurationError(RuntimeError):
    """A run was requested with missing inputs, labels or checkpoints."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt or carries an unsupported version."""
