"""Meta-learned multi-hop reasoning over knowledge graphs with few-shot relations."""

from .errors import (CheckpointVersionError, ContractViolation, InvalidArgument, ParseError,
                     UnknownName)

__version__ = "0.1.0"

__all__ = ["CheckpointVersionError", "ContractViolation", "InvalidArgument", "ParseError",
           "UnknownName", "__version__"]
