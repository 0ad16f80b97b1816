"""Exception types shared across the package."""


class FactlinkError(Exception):
    """Base class for all package errors."""


class ParseError(FactlinkError):
    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class IntegrityError(FactlinkError):
    """Data references something that does not exist, or violates an invariant."""


class ValidationError(FactlinkError, ValueError):
    pass


class ShapeError(FactlinkError, ValueError):
    pass


class SpanError(FactlinkError, IndexError):
    pass


class ContractError(FactlinkError):
    """A caller broke a documented precondition."""


class NumericError(FactlinkError, FloatingPointError):
    pass
