"""Exception types raised across the package."""


class FbsdepLabError(Exception):
    """Base class for all library errors."""


class InvalidArgument(FbsdepLabError, ValueError):
    pass


class NumericError(FbsdepLabError, ArithmeticError):
    pass


class NumericDivergence(NumericError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class IllConditionedBasis(NumericError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class NoContraction(NumericError):
    pass


class DomainOverflow(NumericError):
    pass


class InvalidTilt(InvalidArgument):
    pass


class InsufficientPaths(FbsdepLabError):
    pass


class SingularInitialization(NumericError):
    pass


class CoefficientError(NumericError):
    def __init__(self, message, node=None):
        super().__init__(message if node is None else f"{message} (node {node})")
        self.node = node


class UnclosedSystem(FbsdepLabError):
    pass


class SpecError(FbsdepLabError):
    """Problem-spec parse or validation failure."""

    def __init__(self, message, field=None, line=None):
        prefix = []
        if field is not None:
            prefix.append(field)
        if line is not None:
            prefix.append(f"line {line}")
        super().__init__(f"{': '.join(prefix)}: {message}" if prefix else message)
        self.field = field
        self.line = line
