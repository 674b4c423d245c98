"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names both shapes."""


class ContractError(ValueError):
    """An operation precondition or configuration invariant was violated."""
