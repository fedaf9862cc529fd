"""Exception hierarchy shared by every pipeline stage."""


class LteError(Exception):
    """Base class for all library errors."""


class DataError(LteError, ValueError):
    """Input data or configuration violates a documented precondition."""


class NumericalError(LteError, ArithmeticError):
    """A numerical routine failed (non-convergence, degenerate statistics)."""


class SchemaError(DataError):
    """A serialized artifact has an unknown or incompatible schema version."""
