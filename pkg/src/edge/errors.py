from typing import Optional


class EdgeSimError(Exception):
    """Base for every error the simulator raises on purpose."""
    exit_code = 1


class ConfigError(EdgeSimError):
    exit_code = 2


class DataError(EdgeSimError):
    exit_code = 3


class TraceParseError(DataError):
    def __init__(self, message: str, line: int, column: Optional[int] = None):
        where = f"line {line}" + (f", column {column}" if column is not None else "")
        super().__init__(f"{where}: {message}")
        self.line = line
        self.column = column


class TopologyError(DataError):
    pass


class WindowMismatchError(DataError):
    pass


class InvariantViolation(DataError):
    pass


class InfeasibleAllocationError(DataError):
    pass


class RosterFeasibleError(EdgeSimError):
    """bSearch was asked to locate a violation in a roster that fits."""


class OracleBoundError(EdgeSimError):
    pass


class UnknownStrategyError(ConfigError):
    pass
