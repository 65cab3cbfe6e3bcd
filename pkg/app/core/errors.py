# app/core/errors.py
from typing import Optional


class JointIEError(Exception):
    """Base class for every error raised by the extraction library."""


class SchemaError(JointIEError, ValueError):
    def __init__(self, message: str, label: Optional[str] = None):
        self.label = label
        super().__init__(f"{message} (label: {label})" if label is not None else message)


class CorpusError(JointIEError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ModelError(JointIEError):
    """Bundle format/version problems and schema or feature mismatches between models."""


class NumericalError(JointIEError, ArithmeticError):
    pass


class StageError(JointIEError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"training stage '{stage}' failed: {cause}")
