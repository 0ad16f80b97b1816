"""Entity disambiguation that scores candidates with KB facts between mentions."""
from .errors import (ContractError, FactlinkError, IntegrityError, NumericError, ParseError, ShapeError,
                     SpanError, ValidationError)

__version__ = "0.1.0"

__all__ = [
    "ContractError", "FactlinkError", "IntegrityError", "NumericError", "ParseError", "ShapeError",
    "SpanError", "ValidationError", "__version__",
]
