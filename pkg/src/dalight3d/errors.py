"""Exception hierarchy shared across the engine, data I/O and CLI."""


class DALightError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(DALightError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class NonFiniteError(DALightError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class TapeError(DALightError, RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, double backward)."""


class ConfigError(DALightError, ValueError):
    """Invalid configuration. ``problems`` lists one message per field."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class FormatError(DALightError, ValueError):
    """Base for malformed on-disk containers."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    def __init__(self, what, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"truncated {what}: expected {expected} bytes, got {actual}")


class DimensionOverflowError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TensorNameError(FormatError, KeyError):
    """Checkpoint and model disagree on the set of tensor names."""

    def __init__(self, missing, unexpected):
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
        parts = []
        if self.missing:
            parts.append("missing: " + ", ".join(self.missing))
        if self.unexpected:
            parts.append("unexpected: " + ", ".join(self.unexpected))
        super().__init__("; ".join(parts))

    def __str__(self):
        return self.args[0]
