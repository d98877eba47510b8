class DataError(ValueError):
    """Malformed or inconsistent input data (bad rows, unknown ids, bad files)."""


class NumericalError(RuntimeError):
    """The solver produced non-finite values."""
