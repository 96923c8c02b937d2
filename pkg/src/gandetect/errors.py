"""Error hierarchy mapped onto CLI exit codes."""


class DataError(Exception):
    """Bad or missing input data (exit code 2)."""


class NumericalError(RuntimeError):
    """Non-finite loss or diverged optimization (exit code 3)."""
