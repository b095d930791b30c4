"""Exception hierarchy shared by every module."""


class UCFLError(Exception):
    """Base class for all errors raised by ucfl."""


class ValidationError(UCFLError, ValueError):
    """An argument is outside its documented domain."""


class StructuralError(UCFLError, ValueError):
    """Shapes or dimensions of the inputs do not agree."""


class NumericError(UCFLError, ArithmeticError):
    """A computation produced non-finite values.

    ``context`` carries whatever is known about where it happened
    (client id, round, epoch) and ``partial`` may hold a partial result.
    """

    def __init__(self, message, context=None, partial=None):
        super().__init__(message)
        self.context = dict(context or {})
        self.partial = partial


class FormatError(UCFLError, ValueError):
    """A data file is malformed."""

    def __init__(self, message, path=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.path = path
        self.offset = offset


class ConfigError(UCFLError, ValueError):
    """A configuration failed schema validation; ``problems`` lists every issue."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
