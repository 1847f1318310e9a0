"""Exception hierarchy shared by every module.

The CLI maps these onto its exit codes, so each class carries one.
"""


class HsegError(Exception):
    exit_code = 1


class UsageError(HsegError):
    exit_code = 2


class ConfigError(HsegError):
    exit_code = 2


class DimensionError(HsegError, ValueError):
    exit_code = 2


class GeometryError(HsegError, ValueError):
    exit_code = 2


class FormatError(HsegError):
    """Malformed file. ``offset`` is the byte position where parsing failed."""

    exit_code = 3

    def __init__(self, message, offset=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.path = path


class TrainingError(HsegError):
    exit_code = 4

    def __init__(self, message, step=None, member=None):
        if member is not None:
            message = f"member {member}: {message}"
        super().__init__(message)
        self.step = step
        self.member = member


class EnsembleError(HsegError):
    exit_code = 2


class UndefinedRatioError(HsegError, ArithmeticError):
    exit_code = 4


class UndefinedCorrelationError(HsegError, ArithmeticError):
    exit_code = 4


class UndefinedDistanceError(HsegError, ArithmeticError):
    """A distance between point sets where at least one set is empty."""

    exit_code = 4
