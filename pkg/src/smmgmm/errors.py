"""Exception hierarchy.

Every exception carries an ``exit_code`` used by the command line driver:
2 for data problems, 3 for degenerate instruments, 4 for non-convergence
and 5 for singular weight matrices.
"""


class SmmError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class DataError(SmmError):
    exit_code = 2


class ColumnNotFound(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class InvalidDesign(DataError):
    pass


class DegenerateInstrument(SmmError):
    exit_code = 3


class DegenerateIncrement(DegenerateInstrument):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SaturationFailure(DataError):
    def __init__(self, message, cells=()):
        super().__init__(message)
        self.cells = tuple(cells)


class NumericalError(SmmError):
    exit_code = 4


class NonFinite(NumericalError):
    pass


class ExpOverflow(NumericalError):
    """|X * psi| is too large to exponentiate safely."""

    exit_code = 2


class Separation(NumericalError):
    pass


class RankDeficient(DegenerateInstrument):
    pass


class NotConverged(NumericalError):
    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


class SingularMatrix(SmmError):
    exit_code = 5

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class SingularWeight(SingularMatrix):
    def __init__(self, message, index=None, condition=None):
        super().__init__(message, condition=condition)
        self.index = index


class NotOverIdentified(SmmError):
    exit_code = 2
