"""Exception types shared across the package.

The CLI maps these onto its exit-code contract, so tests and scripts can
rely on the distinctions.
"""


class DlossError(Exception):
    """Base class for all package errors."""


class ConfigError(DlossError):
    """Invalid configuration value or combination."""


class ShapeError(DlossError):
    """Tensor shapes incompatible with the requested operation."""


class BatchTooSmallError(DlossError):
    """Operation needs more samples than the batch provides."""


class InsufficientScoresError(DlossError):
    """A score partition has too few entries for the requested statistic."""

    def __init__(self, partition: str, count: int, needed: int):
        self.partition = partition
        self.count = count
        self.needed = needed
        super().__init__(
            f"{partition} partition has {count} score(s); need at least {needed}"
        )


class InsufficientPairsError(DlossError):
    """No usable anchor/positive pairs in the batch."""


class LabelError(DlossError):
    """Label outside the admissible class range."""


class DataFormatError(DlossError):
    """Malformed or inconsistent input data (e.g. IDX files)."""


class StratificationError(DlossError):
    """A class is too small to appear in both sides of a stratified split."""


class SingletonClassError(DlossError):
    """Classes with a single sample cannot be used as retrieval queries."""

    def __init__(self, classes):
        self.classes = sorted(int(c) for c in classes)
        super().__init__(f"singleton class(es) in gallery: {self.classes}")


class GradientCoverageError(DlossError):
    """A trainable parameter received no gradient."""


class TrainingAbortedError(DlossError):
    """Too many degenerate batches; the sampler is misconfigured."""


class CheckpointVersionError(DlossError):
    """Checkpoint format version not supported by this build."""


class IntegrityError(DlossError):
    """Checkpoint payload failed its checksum."""
