"""
Exception hierarchy for the semantic-token encoder.

Library code raises these; the CLI entry point catches SemtokError,
logs it and converts it into a process exit code.
"""
from typing import Optional, Sequence


class SemtokError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SemtokError, ValueError):
    """Tensor shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes: Sequence[int]):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        rendered = " vs ".join(str(list(s)) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class MaskError(SemtokError, ValueError):
    """A softmax row has no unmasked entry."""


class CapacityError(SemtokError):
    """A token set does not fit into the configured context length."""

    def __init__(self, sample_id: str, needed: int, capacity: int):
        self.sample_id = sample_id
        self.needed = needed
        self.capacity = capacity
        super().__init__(
            f"sample {sample_id!r} needs {needed} token slots but context length is {capacity}"
        )


class CorpusParseError(SemtokError):
    """A corpus line does not conform to the interchange schema."""

    def __init__(self, line: int, field: str, message: str):
        self.line = line
        self.field = field
        super().__init__(f"line {line}: field {field!r}: {message}")


class TokenSetValidationError(SemtokError):
    """A token set violates one of its structural invariants."""

    def __init__(self, sample_id: str, field: str, message: str):
        self.sample_id = sample_id
        self.field = field
        super().__init__(f"sample {sample_id!r}: {field}: {message}")


class VocabularyError(SemtokError):
    """A caption id lies outside the text vocabulary."""


class ContractViolation(SemtokError):
    """A caller broke a documented precondition (e.g. non-normalized embeddings)."""


class TrainingDivergedError(SemtokError):
    """The training loss became non-finite."""

    def __init__(self, step: int, sample_ids: Sequence[str]):
        self.step = step
        self.sample_ids = list(sample_ids)
        super().__init__(f"non-finite loss at step {step} | batch={self.sample_ids}")


class NonFiniteGradientError(SemtokError):
    """A parameter gradient contains NaN or infinity."""

    def __init__(self, path: str):
        self.path = path
        super().__init__(f"non-finite gradient for parameter {path!r}")


class ConfigError(SemtokError):
    """A configuration value failed validation."""

    def __init__(self, field: str, constraint: str):
        self.field = field
        self.constraint = constraint
        super().__init__(f"config field {field!r}: {constraint}")


class CheckpointError(SemtokError):
    """A checkpoint file is malformed or does not match the expected model."""


class PathError(SemtokError):
    """A required file or directory is missing."""

    def __init__(self, path, message: Optional[str] = None):
        self.path = str(path)
        super().__init__(message or f"path not found: {self.path}")
