"""Exception types shared across the package."""


class CtlmError(Exception):
    """Base class for all errors raised by this package."""


class InputError(CtlmError, ValueError):
    """Invalid user-supplied data (empty corpus, malformed text, ...)."""


class ConfigError(CtlmError, ValueError):
    """Invalid configuration value or combination."""


class RangeError(CtlmError, ValueError):
    """A token id, index, or length is outside its valid range."""


class ContractError(CtlmError, ValueError):
    """A call violated an API precondition (shape mismatch, label in negatives, ...)."""


class FormatError(CtlmError, ValueError):
    """A persisted file (checkpoint, vocabulary) is malformed."""


class TrainingError(CtlmError, RuntimeError):
    """Training cannot proceed (non-finite loss or gradients, ...)."""
