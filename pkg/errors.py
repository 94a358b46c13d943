"""Exception hierarchy shared by every module.

Each error carries the process exit code the command surface reports for it.
"""
from typing import Optional, Sequence


class ToolkitError(Exception):
    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ConfigError(ToolkitError):
    """Invalid configuration or unusable output location."""
    exit_code = 1


class ShapeError(ToolkitError, ValueError):
    exit_code = 1

    def __init__(self, op: str, *shapes: Sequence[int], detail: str = ""):
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        message = f"{op}: incompatible shapes {shown}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)
        self.op = op
        self.shapes = [tuple(s) for s in shapes]


class DataError(ConfigError, ValueError):
    """Problem in a data source, located by row and column when known."""

    def __init__(self, detail: str, row: Optional[int] = None, column: Optional[str] = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column '{column}'")
        message = f"{detail} at {', '.join(where)}" if where else detail
        super().__init__(message)
        self.row = row
        self.column = column


class NumericalError(ToolkitError, ArithmeticError):
    """A forward operation or loss produced NaN or Inf."""
    exit_code = 2


class GradientError(ToolkitError, RuntimeError):
    exit_code = 2


class TrainingAbort(ToolkitError):
    exit_code = 2

    def __init__(self, detail: str, epoch: Optional[int] = None, batch: Optional[int] = None):
        super().__init__(detail)
        self.epoch = epoch
        self.batch = batch


class AcceptanceFailure(ToolkitError):
    """Gradient check exceeded its tolerance."""
    exit_code = 3

    def __init__(self, detail: str, failed_ops: Sequence[str] = ()):
        super().__init__(detail)
        self.failed_ops = list(failed_ops)
