"""Exception hierarchy shared by every eatformer module."""


class EATFormerError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EATFormerError, ValueError):
    """Operand shapes do not conform."""


class AxisError(EATFormerError, ValueError):
    """A reduction or softmax axis is out of range."""


class ConfigurationError(EATFormerError, ValueError):
    """An architecture or operator configuration is invalid."""


class GeometryError(EATFormerError, ValueError):
    """Spatial geometry is invalid (empty output, undersized input, bad length)."""


class ContractError(EATFormerError, RuntimeError):
    """A call-order or usage contract was violated (e.g. backward on a non-scalar)."""


class FormatError(EATFormerError, ValueError):
    """A container has the wrong magic bytes or version."""


class IntegrityError(EATFormerError, ValueError):
    """A container is truncated or disagrees with the architecture it claims."""


class PopulationError(EATFormerError, ValueError):
    """An evolutionary population cannot support the requested operator."""


class DataError(EATFormerError, ValueError):
    """Training data is unreadable or inconsistent."""
