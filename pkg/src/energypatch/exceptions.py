"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid model, patch or experiment configuration."""


class ContractError(ValueError):
    """A precondition between two components does not hold."""


class DomainError(ValueError):
    """Input lies outside the mathematical domain of an operation."""


class NonFiniteLossError(FloatingPointError):
    """An optimization produced a NaN or infinite loss."""
