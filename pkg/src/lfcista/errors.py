"""Exception hierarchy shared by every lfcista module."""


class LfcistaError(Exception):
    """Base class for all library errors."""


class InvalidKernelError(LfcistaError, ValueError):
    """Kernel has an even dimension or is larger than the signal."""


class DimensionError(LfcistaError, ValueError):
    """Shapes or channel counts of operands disagree."""


class InvalidThresholdError(LfcistaError, ValueError):
    pass


class ConfigError(LfcistaError, ValueError):
    """Configuration or architecture is inconsistent."""


class DepthRangeError(LfcistaError, ValueError):
    """A depth lies outside the configured depth range."""


class BoundsError(LfcistaError, IndexError):
    pass


class NoCentralViewError(LfcistaError, ValueError):
    pass


class NumericalError(LfcistaError, ArithmeticError):
    """A computation produced non-finite values or hit a degenerate problem."""


class DegenerateProblemError(NumericalError):
    pass


class StaleCacheError(LfcistaError, RuntimeError):
    """A forward cache is used after the parameters it was built from changed."""


class FormatError(LfcistaError, OSError):
    """A binary artifact (dataset, dictionary, model, codes) cannot be parsed."""


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class ShapeError(FormatError):
    pass


class DegenerateOperatorWarning(UserWarning):
    """Emitted when the Gram operator of a dictionary is identically zero."""
