"""Exception types shared across the package.

All of these derive from ValueError so callers can catch the whole family
with one clause; the split exists so tests and the CLI can tell structural
problems (shape/contract) apart from bad input files (data/format) and
from numerical blow-ups during training.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class ContractError(ValueError):
    """An API precondition was violated by the caller."""


class DataError(ValueError):
    """A dataset record or score input failed validation."""


class FormatError(ValueError):
    """A binary or serialized file does not match its expected layout."""


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or gradient."""
