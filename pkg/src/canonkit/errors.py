"""Exception hierarchy shared across canonkit."""


class CanonkitError(Exception):
    pass


class ConfigError(CanonkitError, ValueError):
    pass


class DimensionError(CanonkitError, ValueError):
    pass


class ContractError(CanonkitError, RuntimeError):
    pass


class GroupError(CanonkitError, ValueError):
    pass


class ParseError(CanonkitError, ValueError):
    """Malformed IDX input."""


class CheckpointError(CanonkitError):
    """Base class for checkpoint container problems."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointDigestError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class BudgetMismatchError(CanonkitError, ValueError):
    """Compared canonicalizers differ too much in parameter count."""


class IdxMagicError(ParseError):
    pass


class IdxTruncatedError(ParseError):
    pass


class IdxCountMismatchError(ParseError):
    pass
