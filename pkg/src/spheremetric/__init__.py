"""Angular-margin deep metric learning on the hypersphere, in plain numpy."""

from spheremetric.errors import ContractError, IngestionError, NumericalError

__version__ = "0.1.0"

__all__ = ["ContractError", "IngestionError", "NumericalError", "__version__"]
