"""Exception types shared across the package."""


class MultiIDError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(MultiIDError, ValueError):
    pass


class NoFaceFound(MultiIDError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"identities not found in frame: {self.missing}")


class TargetTooSmall(MultiIDError, ValueError):
    pass


class NonFiniteParams(MultiIDError, ValueError):
    pass


class LayerOutOfRange(MultiIDError, IndexError):
    pass


class IndexOutOfRange(MultiIDError, IndexError):
    pass


class ModeInvalid(MultiIDError, ValueError):
    pass


class RankInvalid(MultiIDError, ValueError):
    pass


class TimestepOutOfRange(MultiIDError, ValueError):
    pass


class RegionOutOfBounds(MultiIDError, ValueError):
    pass


class GridInvalid(MultiIDError, ValueError):
    pass


class LambdaNegative(MultiIDError, ValueError):
    pass


class ProbsInvalid(MultiIDError, ValueError):
    pass


class CorpusEmpty(MultiIDError):
    pass


class NonFiniteLoss(MultiIDError):
    def __init__(self, step, value):
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value!r} at step {step}")


class FreezeViolation(MultiIDError):
    def __init__(self, names):
        self.names = list(names)
        super().__init__(f"frozen parameters changed: {self.names[:5]}")


class VersionMismatch(MultiIDError):
    pass


class CorruptFile(MultiIDError):
    pass


class EmptyInput(MultiIDError, ValueError):
    pass


class StrideInvalid(MultiIDError, ValueError):
    pass


class ConfigError(MultiIDError, ValueError):
    def __init__(self, message, key=None):
        self.key = key
        super().__init__(message)
