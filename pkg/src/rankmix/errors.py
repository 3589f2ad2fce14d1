class RankmixError(Exception):
    pass


class DimensionError(RankmixError, ValueError):
    pass


class AllMasked(RankmixError, ValueError):
    """Every entry handed to a softmax was NEG_INF."""


class InvalidBudget(RankmixError, ValueError):
    pass


class WrongMode(RankmixError, ValueError):
    pass


class NonMonotonicTask(RankmixError, ValueError):
    pass


class TraceMismatch(RankmixError, ValueError):
    pass


class ConfigError(RankmixError, ValueError):
    pass


class ChecksumError(RankmixError):
    pass
