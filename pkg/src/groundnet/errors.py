"""Exception taxonomy shared by all groundnet modules."""


class GroundnetError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(GroundnetError, ValueError):
    """Operands have incompatible or invalid shapes."""


class ContractError(GroundnetError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(GroundnetError, ValueError):
    """Configuration values are missing, malformed, or inconsistent."""


class ParseError(GroundnetError, ValueError):
    """A text input (embedding file, dataset line, config file) failed to parse."""


class CodecError(GroundnetError, ValueError):
    """A binary payload (PPM image, checkpoint) is corrupt or truncated."""


class NumericError(GroundnetError, ArithmeticError):
    """A computation produced or encountered non-finite values."""


class GenerationError(GroundnetError, RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""
