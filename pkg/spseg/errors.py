"""
Exception types raised across the segmentation pipeline.

Every error carries a one-line ``reason`` so the command line can report
failures in a machine-parsable way.
"""


class SpsegError(Exception):
    """Base class for all pipeline errors."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = " ".join(str(reason).split())


class CloudFormatError(SpsegError, ValueError):
    """Malformed point-cloud file or invalid cloud contents."""


class InfeasibleSceneError(SpsegError, ValueError):
    """Synthetic scene request that cannot be satisfied."""


class PartitionError(SpsegError, ValueError):
    """Degenerate partition parameters or broken partition invariants."""


class ShapeError(SpsegError, ValueError):
    """Tensor shapes do not conform for an operation."""


class GradCheckError(SpsegError, ArithmeticError):
    """Non-finite values met during a gradient check."""


class NoSupervisionError(SpsegError, ValueError):
    """No supervised superpoint where at least one is required."""


class AttentionInactiveError(SpsegError):
    """Coupled attention requested with an empty attended set."""


class CheckpointError(SpsegError, ValueError):
    """Checkpoint cannot be read or does not fit the model."""


class ConfigError(SpsegError, ValueError):
    """Invalid pipeline configuration."""


class SupervisionError(SpsegError, ValueError):
    """Invalid annotation rate or inconsistent supervision state."""
