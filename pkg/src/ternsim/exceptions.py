"""Exception hierarchy shared by every simulator module."""


class TernsimError(ValueError):
    """Base class for all simulator errors."""


class InvalidCode(TernsimError):
    """A 2-bit ternary storage code outside {0b00, 0b01, 0b11}."""


class InvalidPackedByte(TernsimError):
    """A packed weight byte >= 243 (not a valid 5-trit group)."""


class ShapeMismatch(TernsimError):
    pass


class ModeMismatch(TernsimError):
    pass


class RangeError(TernsimError):
    """An operand does not fit the bit width of the selected mode."""


class LengthMismatch(TernsimError):
    pass


class KTooLarge(TernsimError):
    pass


class ZeroSum(TernsimError):
    """Softmax denominator vanished (every exponent underflowed)."""


class InfeasibleSchedule(TernsimError):
    """Bandwidth demand cannot be rate-matched to the DRAM interface."""
