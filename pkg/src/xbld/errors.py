"""Exception types shared across the package."""


class XbldError(Exception):
    """Base class for package errors."""


class SizeError(XbldError, ValueError):
    pass


class ShapeError(XbldError, ValueError):
    pass


class EmptyMaskError(XbldError, ValueError):
    """A mask with no nonzero pixels was passed where one is required."""


class NumericInstabilityError(XbldError, FloatingPointError):
    """A loss or gradient became non-finite."""


class UnsupportedArchitectureError(XbldError, TypeError):
    pass


class ConfigError(XbldError, ValueError):
    pass
