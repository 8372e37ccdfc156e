"""Exception hierarchy.

Every error carries a stable string ``code`` so the CLI can map failures to
exit statuses without inspecting messages.
"""


class DeepCAError(Exception):
    code = "INTERNAL_ERROR"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class DimensionError(DeepCAError, ValueError):
    code = "DIMENSION_ERROR"


class CapacityError(DeepCAError):
    code = "CAPACITY_ERROR"


class NumericalError(DeepCAError, ArithmeticError):
    code = "NUMERICAL_ERROR"


class UsageError(DeepCAError, ValueError):
    code = "USAGE_ERROR"


class FormatError(DeepCAError):
    code = "FORMAT_ERROR"


class DivergenceError(NumericalError):
    code = "DIVERGENCE_ERROR"


class ToleranceError(DeepCAError):
    code = "TOLERANCE_ERROR"


class ConfigError(DeepCAError, ValueError):
    code = "CONFIG_ERROR"
