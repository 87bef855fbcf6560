"""Exception types raised across the package.

Each class carries a short ``kind`` tag used by the command line to print
machine-parsable ``ERROR:<kind>:`` lines.
"""


class MotionFlowError(Exception):
    kind = "error"


class DimensionError(MotionFlowError, ValueError):
    kind = "dimension"


class ValidationError(MotionFlowError, ValueError):
    kind = "validation"


class ConfigError(MotionFlowError, ValueError):
    kind = "config"


class ProtocolError(MotionFlowError, RuntimeError):
    kind = "protocol"


class DivergenceError(MotionFlowError, RuntimeError):
    kind = "divergence"


class NotFittedError(MotionFlowError, AttributeError):
    kind = "not_fitted"
