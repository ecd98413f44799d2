"""Exception types raised across the package."""


class PromptCraftError(Exception):
    """Base class for all package errors."""


class DimensionError(PromptCraftError, ValueError):
    pass


class EmptyLossError(PromptCraftError, ValueError):
    pass


class OptimizerError(PromptCraftError, FloatingPointError):
    pass


class DeterminismError(PromptCraftError, RuntimeError):
    pass


class ContextOverflowError(PromptCraftError, ValueError):
    pass


class CorruptCheckpointError(PromptCraftError, ValueError):
    pass


class ConfigMismatchError(PromptCraftError, ValueError):
    pass


class UndefinedSimilarityError(PromptCraftError, ValueError):
    pass


class TrainingError(PromptCraftError, RuntimeError):
    """Non-finite loss or a failed reward provider inside a training loop."""
