"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """An operation precondition (other than a shape rule) was violated."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class InputError(ValueError):
    """Malformed user-facing input: files, config keys, CLI values."""
