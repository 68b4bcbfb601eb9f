"""Error types shared across the toolkit.

Every error carries a short code string and the CLI exit code it maps to.
"""

from typing import Optional


class CookLabError(Exception):
    """Base error with a machine-readable code."""

    code = "COOKLAB"
    exit_code = 1

    def __init__(self, message: str, code: Optional[str] = None):
        super().__init__(message)
        if code is not None:
            self.code = code

    def __str__(self) -> str:
        return f"[{self.code}] {super().__str__()}"


class GeometryError(CookLabError, ValueError):
    """Invalid point-cloud input (EMPTY_CLOUD, SIZE_MISMATCH, NO_NORMALS)."""

    code = "GEOMETRY"
    exit_code = 3


class ShapeError(CookLabError, ValueError):
    """Tensor shape mismatch."""

    code = "SHAPE"


class GradientError(CookLabError):
    """Backward pass misuse (SCALAR_REQUIRED) or non-finite values."""

    code = "SCALAR_REQUIRED"


class ActionError(CookLabError, ValueError):
    """Action outside its tool's action space (ACTION_OUT_OF_RANGE, VOLUME_OUT_OF_RANGE)."""

    code = "ACTION_OUT_OF_RANGE"
    exit_code = 2


class BinError(CookLabError, ValueError):
    """Degenerate bin range."""

    code = "BAD_RANGE"


class DataError(CookLabError):
    """Dataset, checkpoint or file-format problem."""

    code = "NO_DATA"
    exit_code = 3


class PlyParseError(DataError):
    """Malformed PLY file; reports the offending line."""

    code = "PLY_PARSE"

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UsageError(CookLabError):
    """Operator error on the command line (OUTPUT_EXISTS, PLANNER_MISMATCH)."""

    code = "USAGE"
    exit_code = 2
