"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, FormatError and
OS-level errors -> 3, ContractError (and subclasses) -> 4.
"""


class ContraspeechError(Exception):
    pass


class ConfigError(ContraspeechError, ValueError):
    """Bad configuration key, value, or command argument."""


class FormatError(ContraspeechError, ValueError):
    """Malformed file content (WAV, checkpoint, feature or manifest files)."""


class ContractError(ContraspeechError, ValueError):
    """An operation was called outside its stated preconditions."""


class DimensionError(ContractError):
    """Shapes, axes or widths do not line up."""


class ShortInputError(ContractError):
    """Input sequence shorter than the minimum the operation supports."""


class DegenerateSequenceError(ContractError):
    """Sequence too short for the requested loss (e.g. U <= K)."""


class OracleScopeError(ContractError):
    """A brute-force oracle was asked for an instance outside its size guard."""


class AlignmentError(ContractError):
    """Target cannot be aligned to the available frames (infinite CTC loss)."""
