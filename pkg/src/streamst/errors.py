"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class ContractError(RuntimeError):
    """A caller violated a documented precondition."""


class ConfigError(ValueError):
    """A configuration value or file is invalid."""


class StreamClosedError(RuntimeError):
    """An encoder stream received frames after its final chunk."""


class InsufficientFramesError(ValueError):
    """An utterance is too short to produce any encoder output."""


class EmptyUtteranceError(ValueError):
    """An utterance has zero frames."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""
