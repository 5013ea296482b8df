"""Exception and warning types shared across the package.

Two families matter to callers: ``DataError`` (bad input, exit code 2 in the
CLI) and ``FitError`` (a fit that could not be trusted, exit code 3).
"""


class QcombError(Exception):
    pass


class DataError(QcombError, ValueError):
    pass


class FitError(QcombError, RuntimeError):
    pass


# fitting
class SingularJacobian(FitError):
    pass


class NonFiniteModel(FitError):
    pass


class IllConditioned(FitError):
    pass


class FitDiverged(FitError):
    pass


class NoConvergence(FitError):
    """Raised by :func:`qcomb.fitcore.require_converged`; the partial result rides along."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class NegativeQuadraticTerm(FitError):
    pass


# spectra
class NoResonancesFound(DataError):
    pass


class AmbiguousCoupling(DataError):
    pass


class InsufficientModes(DataError):
    pass


# counts / timestamps
class SaturationExceeded(DataError):
    pass


class EmptyStream(DataError):
    pass


class InvalidSeed(DataError):
    pass


# franson
class InsufficientPhaseCoverage(DataError):
    pass


class ZeroTotalCounts(DataError):
    pass


class FormatError(DataError):
    def __init__(self, message, path=None, line=None, field=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{': '.join([', '.join(where), message]) if where else message}")
        self.path = path
        self.line = line
        self.field = field


class JitterDominates(UserWarning):
    pass


class NegativeVisibility(UserWarning):
    pass
