class TcrError(Exception):
    pass


class DataError(TcrError):
    """
    Errors caused by inputs (files, annotations, images) rather than by the caller's usage.
    The CLI maps these to exit code 2.
    """
    pass


class InvalidSchema(DataError, ValueError):
    pass


class SchemaMismatch(DataError, ValueError):
    pass


class DegenerateFace(DataError, ValueError):
    pass


class DegenerateConfiguration(DataError, ValueError):
    pass


class DegenerateBBox(DataError, ValueError):
    pass


class EmptyInput(DataError, ValueError):
    pass


class EmptyImage(DataError, ValueError):
    pass


class DegenerateData(DataError, ValueError):
    pass


class DimensionMismatch(DataError, ValueError):
    pass


class SingularSystem(DataError, ArithmeticError):
    pass


class InsufficientData(DataError, ValueError):
    pass


class MissingCommonLandmark(DataError, LookupError):
    pass


class EmptyAfterFilter(DataError, RuntimeError):
    pass


class ConfigInvalid(DataError, ValueError):
    pass


class ModelFormatError(DataError, ValueError):
    pass


class ParseError(DataError, ValueError):
    def __init__(self, path: str, line: int, message: str) -> None:
        super().__init__(f'{path}:{line}: {message}')
        self.path = path
        self.line = line


class CountMismatch(DataError, ValueError):
    pass


class MissingFile(DataError, FileNotFoundError):
    pass


class DuplicateName(DataError, ValueError):
    pass
