"""Exception hierarchy. Each family maps onto a CLI exit code."""


class PhotoDoodleError(Exception):
    exit_code = 1


class ConfigError(PhotoDoodleError, ValueError):
    exit_code = 2


class DataError(PhotoDoodleError):
    exit_code = 3


class NumericError(PhotoDoodleError):
    exit_code = 4


class ShapeError(ConfigError):
    """Operand shapes do not agree."""


class ContractError(ConfigError):
    """A documented precondition was violated by the caller."""


class RankError(ConfigError):
    pass


class CompatibilityError(ConfigError):
    """An adapter or checkpoint does not belong to the weights it is used with."""


class PECloningError(ConfigError):
    """Latent and condition tokens do not share position lists."""


class FormatError(DataError):
    """Malformed binary container. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IntegrityError(DataError):
    pass


class InvariantError(NumericError):
    """An internal invariant was broken; indicates a bug, not bad input."""


class GradientCheckError(NumericError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index
