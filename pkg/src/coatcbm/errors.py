"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericError`` -> 3.
"""


class CoatError(Exception):
    """Base class for all package errors."""


class DataError(CoatError, ValueError):
    """Malformed input: bad files, violated invariants, shape mismatches."""


class ShapeError(DataError):
    pass


class NumericError(CoatError, ArithmeticError):
    """A computation produced a non-finite value."""


class JudgeError(CoatError):
    """The remote relevance judge failed or answered something unparseable."""
