"""Exception types raised by graftkit."""


class GraftkitError(Exception):
    """Base class for every error graftkit raises on purpose."""


class SplitError(GraftkitError, IndexError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ShapeMismatchError(GraftkitError, ValueError):
    def __init__(self, message, expected=None, actual=None):
        if expected is not None or actual is not None:
            message = f"{message}: expected {tuple(expected) if expected is not None else None}, got {tuple(actual) if actual is not None else None}"
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class EventFormatError(GraftkitError, ValueError):
    """Malformed or out-of-bounds event data. `offset` is a byte offset or an event index."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class EventOrderError(GraftkitError, ValueError):
    pass


class ConfigError(GraftkitError, ValueError):
    pass


class DivergenceError(GraftkitError, FloatingPointError):
    def __init__(self, message, step=None, breakdown=None):
        super().__init__(message)
        self.step = step
        self.breakdown = breakdown


class EvaluationError(GraftkitError, ValueError):
    pass
