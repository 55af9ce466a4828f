"""
Exception types raised across the forecasting toolkit.

Library modules raise these; run.py is the only place that catches them,
prints an [ERROR] line and turns them into an exit code.
"""


class GraphForecastError(Exception):
    """Base class for every error the toolkit raises on purpose"""


class ShapeError(GraphForecastError):
    """Operand shapes do not conform for the named operation"""

    def __init__(self, op, message):
        self.op = op
        super().__init__(f"{op}: {message}")


class NumericError(GraphForecastError):
    """Non-finite value where a finite one is required"""


class ContractError(GraphForecastError):
    """A documented precondition of an operation was violated"""


class ParseError(GraphForecastError):
    """Malformed input file; line is 1-based when known"""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f" line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class EmptyDatasetError(GraphForecastError):
    pass


class UnknownNodeError(GraphForecastError):
    """Adjacency refers to a node id that the series does not have"""


class DomainError(GraphForecastError):
    pass


class InsufficientDataError(GraphForecastError):
    pass


class ConfigError(GraphForecastError):
    pass


class DegenerateClusterError(GraphForecastError):
    """A sub-graph has zero soft frequency (K too large for the data)"""


class DivergenceError(GraphForecastError):
    def __init__(self, step, value):
        self.step = step
        self.value = value
        super().__init__(f"loss became non-finite ({value}) at step {step}")


class StageError(GraphForecastError):
    """Wraps an error raised inside one pipeline stage"""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
