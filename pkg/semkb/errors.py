"""
Exception hierarchy shared by every semkb module
"""


class SemkbError(Exception):
    """Base class for all simulator errors"""


class InvalidConfigError(SemkbError, ValueError):
    """Out-of-range parameters or an unreadable experiment config"""


class InvalidInputError(SemkbError, ValueError):
    """Empty or otherwise unusable input data"""


class ShapeError(SemkbError, ValueError):
    """Array dimensions do not line up"""


class NumericDomainError(SemkbError):
    """Non-finite values where finite ones are required"""


class UndefinedMetricError(SemkbError):
    """Metric has no defined value for the given input (zero norm, empty set)"""


class VocabError(SemkbError, IndexError):
    """Token id outside the vocabulary"""


class ContextOverflowError(SemkbError):
    """Sequence is longer than the backbone context"""


class BackboneStateError(SemkbError):
    """Backward pass requested without a cached forward pass"""


class DegenerateDistributionError(SemkbError):
    """Every logit is -inf, nothing can be sampled"""


class GenerationError(SemkbError):
    """Source-data generation failed"""


class BackendUnavailableError(GenerationError):
    """Generation backend could not be reached or answered with an error"""


class EmptyGenerationError(GenerationError):
    """Backend output was empty once specials and prompt echo were stripped"""


class CsiFormatError(SemkbError):
    """Malformed CSIF1 file"""


class CheckpointFormatError(SemkbError):
    """Malformed CDG1 checkpoint"""
