"""Exception hierarchy. Each error carries a machine-readable code and the CLI exit status."""

from __future__ import annotations


class ProctrackError(Exception):
    code = "error"
    exit_status = 1

    def to_dict(self) -> dict:
        return {"code": self.code, "message": str(self)}


class ValidationError(ProctrackError):
    code = "validation_error"
    exit_status = 2


class InconsistencyError(ValidationError):
    """Action/state sequence violates the transition table."""

    code = "inconsistent_timeline"

    def __init__(self, message: str, step: int | None = None, entity: str | None = None, index: int | None = None):
        super().__init__(message)
        self.step = step  # 1-based step number
        self.index = index  # 0-based position in the action sequence
        self.entity = entity


class FormatError(ValidationError):
    """Malformed input file; ``line`` is 1-based when known."""

    code = "format_error"

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path


class ConfigError(ValidationError):
    code = "config_error"


class NumericError(ProctrackError):
    code = "numeric_error"
    exit_status = 3


class ShapeError(NumericError):
    code = "shape_error"

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class BlockedPathError(NumericError):
    code = "blocked_path"


class IOFailure(ProctrackError):
    code = "io_error"
    exit_status = 4
