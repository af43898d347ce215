"""Shared exception types."""


class ContractViolation(ValueError):
    """A caller broke a documented precondition (bad shape, bad argument)."""


class NumericFault(ArithmeticError):
    """A computation produced NaN/Inf or was fed non-finite values."""


class CheckpointError(ContractViolation):
    """Checkpoint bytes are corrupt or incompatible with the target store."""


class BudgetExceeded(RuntimeError):
    """An exact enumeration would exceed the configured record budget."""


class BufferNotReady(Exception):
    """Replay buffer holds fewer episodes than the requested batch size."""
