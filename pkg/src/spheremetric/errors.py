class ContractError(ValueError):
    """Raised when an input violates an operation's preconditions."""


class IngestionError(ContractError):
    """Dataset files that are missing, malformed, or inconsistent with their manifest."""


class NumericalError(ArithmeticError):
    """A computation produced NaN or Inf."""
