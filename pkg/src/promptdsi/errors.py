"""Exception hierarchy shared by all promptdsi modules."""


class PromptDsiError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PromptDsiError):
    """Invalid configuration or precondition on a config value."""


class DataError(PromptDsiError):
    """Malformed or inconsistent input data."""


class VocabularyError(DataError):
    """Token id outside the configured vocabulary."""


class DomainError(PromptDsiError):
    """Mathematical domain violation (e.g. zero-norm vector in a cosine)."""


class ContractError(PromptDsiError):
    """An internal API contract was violated by the caller."""


class NumericError(PromptDsiError):
    """Non-finite values where finite ones are required."""
