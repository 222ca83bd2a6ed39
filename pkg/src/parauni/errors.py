"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class RankError(ValueError):
    """A scalar was required but a higher-rank tensor was given."""


class AxisRangeError(ValueError):
    """An axis argument falls outside the operand's rank."""


class DomainError(ValueError):
    """A numeric argument lies outside its documented domain."""


class EmptinessError(ValueError):
    """A nonempty collection was required but an empty one was given."""


class VocabularyError(ValueError):
    """A token id falls outside the configured vocabulary."""


class LayerIndexError(IndexError):
    """A layer index falls outside 1..L."""


class DegenerateDensityError(ValueError):
    """A Gaussian transition with zero stddev has no usable density."""


class GradientsAbsentError(RuntimeError):
    """Gradients were requested before any backward pass populated them."""


class ConfigError(ValueError):
    """A configuration file or value is invalid."""


class CheckpointFormatError(ValueError):
    """A checkpoint file is malformed. Carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class InvariantError(RuntimeError):
    """A runtime invariant was violated; the operation must abort."""
