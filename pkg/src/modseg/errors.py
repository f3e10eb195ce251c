"""Exception types shared across modseg."""


class ModsegError(Exception):
    pass


class ShapeError(ModsegError, ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(ModsegError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(ModsegError, ValueError):
    pass


class EmptyMaskError(ModsegError, ValueError):
    """A mask with no foreground pixels was given where one is required."""


class SpecError(ModsegError, ValueError):
    """A synthetic dataset specification cannot be realized."""


class DataIOError(ModsegError, OSError):
    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class NumericError(ModsegError, ArithmeticError):
    """Training diverged (non-finite loss) or a numeric self-check failed."""
