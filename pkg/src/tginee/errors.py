"""Exception types raised across the package.

Each class carries a short ``prefix`` used by the command line front end so
every failure mode prints a distinct, greppable message.
"""


class TgineeError(Exception):
    prefix = "error"

    def __str__(self):
        return f"{self.prefix}: {super().__str__()}"


class DomainError(TgineeError, ValueError):
    """Input outside the mathematical domain of a link function."""

    prefix = "domain-error"


class IndexRangeError(TgineeError, IndexError):
    prefix = "range-error"


class CovarianceSingularError(TgineeError, ArithmeticError):
    """``W + eps*I`` could not be factorized; the ridge is too small."""

    prefix = "covariance-singular"


class InsufficientDataError(TgineeError, ValueError):
    prefix = "insufficient-data"


class DegenerateGraphError(TgineeError, ValueError):
    prefix = "degenerate-graph"


class DivergedError(TgineeError, RuntimeError):
    prefix = "diverged"

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class UndefinedMetricError(TgineeError, ValueError):
    prefix = "undefined-metric"


class TaskUndefinedError(TgineeError, ValueError):
    prefix = "task-undefined"


class ConfigError(TgineeError, ValueError):
    prefix = "config-error"


class FormatError(TgineeError, ValueError):
    """Malformed edge-list, truth or checkpoint file."""

    prefix = "parse-error"

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class KruskalRefusedError(TgineeError, ValueError):
    prefix = "kruskal-refused"
