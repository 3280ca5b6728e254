"""Exception hierarchy.

``DfaconError`` subclasses split into two families so the CLI can map them to
exit codes: input/configuration problems (``InputError``) and failures that
happen while computing (``RuntimeFailure``).
"""


class DfaconError(Exception):
    pass


class InputError(DfaconError):
    pass


class RuntimeFailure(DfaconError):
    pass


class ValidationError(InputError, ValueError):
    pass


class ManifestParseError(InputError, ValueError):
    pass


class ConfigurationError(InputError, ValueError):
    pass


class InsufficientDataError(InputError, ValueError):
    pass


class AmbiguityError(InputError, ValueError):
    pass


class ShapeError(InputError, ValueError):
    pass


class DecodeError(InputError, ValueError):
    pass


class DimensionMismatchError(InputError, ValueError):
    pass


class ContractError(InputError, ValueError):
    pass


class StaleIndexError(InputError, ValueError):
    pass


class NormalizationError(InputError, ValueError):
    pass


class UndefinedLossError(InputError, ValueError):
    pass


class CheckpointIntegrityError(InputError, OSError):
    pass


class IncompatibleCheckpointError(InputError, ValueError):
    pass


class ResourceError(RuntimeFailure):
    pass


class NumericError(RuntimeFailure, ArithmeticError):
    pass
