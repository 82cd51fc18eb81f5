"""Exception hierarchy shared by every stage of the pipeline."""


class RcpError(Exception):
    """Base class for all library errors."""


class InvalidInput(RcpError, ValueError):
    pass


class DegenerateFit(RcpError):
    """Raised when a rigid fit has fewer than three usable points or rank < 2."""


class WeightShapeError(RcpError, ValueError):
    pass


class ParseError(RcpError, ValueError):
    """Malformed file content. ``location`` names the line or byte offset."""

    def __init__(self, message, path=None, location=None):
        parts = [message]
        if path is not None:
            parts.insert(0, f"{path}:")
        if location is not None:
            parts.append(f"(at {location})")
        super().__init__(" ".join(parts))
        self.path = path
        self.location = location


class NumericalFailure(RcpError, ArithmeticError):
    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration
