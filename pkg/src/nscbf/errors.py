"""Exception types raised across the package."""

from __future__ import annotations


class NSCBFError(Exception):
    """Base class for all package errors."""


class DimensionError(NSCBFError, ValueError):
    """An array argument has the wrong shape."""


class BarrierSingularityError(NSCBFError):
    """A barrier derivative or reciprocal transform was requested at a singular point.

    Raised when a distance-type leaf is differentiated at (near) zero distance,
    or when the reciprocal transform sees ``h`` at or below its floor, i.e. the
    state sits on or outside the safe-set boundary.
    """

    def __init__(self, message: str, leaf: str | None = None, value: float | None = None):
        super().__init__(message)
        self.leaf = leaf
        self.value = value


class InfeasibleQPError(NSCBFError):
    """The safety-filter QP has an empty feasible set."""

    def __init__(self, message: str, rows=(), certificate=None):
        super().__init__(message)
        self.rows = list(rows)
        self.certificate = certificate


class ControllerError(NSCBFError):
    """The feedback controller failed during simulation."""

    def __init__(self, step: int, time: float, cause: BaseException):
        super().__init__(f"controller failed at step {step} (t={time:.6g}): {type(cause).__name__}: {cause}")
        self.step = step
        self.time = time
        self.cause = cause


class SimulationError(NSCBFError):
    """The integrated state left the finite reals."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


class ConfigError(NSCBFError, ValueError):
    """Invalid run configuration."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = ""
        if key is not None:
            where += f"{key!r}"
        if line is not None:
            where += f" (line {line})"
        super().__init__(f"{where}: {message}" if where else message)
        self.key = key
        self.line = line
