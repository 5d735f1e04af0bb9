"""Desk-scale contrastive speech representation learning toolkit."""

from . import tensor
from .errors import (
    ConfigError,
    ContraspeechError,
    ContractError,
    DegenerateSequenceError,
    DimensionError,
    FormatError,
    OracleScopeError,
    ShortInputError,
)
from .tensor import Tape, Tensor, grad_check, no_grad

__version__ = "0.1.0"
