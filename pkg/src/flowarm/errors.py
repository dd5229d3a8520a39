"""Exception types shared across the package."""


class FlowArmError(Exception):
    pass


class ShapeError(FlowArmError, ValueError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ContractError(FlowArmError, ValueError):
    """An argument violates a documented precondition."""


class NumericsError(FlowArmError, ArithmeticError):
    """A non-finite value (NaN/Inf) appeared in a forward or backward pass."""


class CapacityError(FlowArmError, RuntimeError):
    """A KV cache operation would exceed its frame capacity."""


class DomainError(FlowArmError, ValueError):
    """A geometric input lies outside the reachable workspace."""


class DependencyError(FlowArmError, RuntimeError):
    """A required artifact (dataset, checkpoint) is missing."""


class ConfigError(FlowArmError, ValueError):
    """Configuration file is malformed or contains unknown keys."""
