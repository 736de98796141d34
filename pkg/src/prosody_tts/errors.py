"""Exception hierarchy shared across the package."""


class ProsodyTTSError(Exception):
    """Base class for every error raised on purpose by this package."""


class DimensionError(ProsodyTTSError, ValueError):
    pass


class ConfigurationError(ProsodyTTSError, ValueError):
    pass


class ContractError(ProsodyTTSError, ValueError):
    """A value was consumed in a state its producer never promised."""


class InputError(ProsodyTTSError, ValueError):
    pass


class DegenerateMaskError(ProsodyTTSError, ValueError):
    pass


class DeterminismError(ProsodyTTSError, RuntimeError):
    pass


class AlignmentError(ProsodyTTSError, ValueError):
    pass


class DegenerateCorpusError(ProsodyTTSError, ValueError):
    pass


class IntegrityError(ProsodyTTSError, ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(ProsodyTTSError, ValueError):
    pass


class ParseError(ProsodyTTSError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TrainingDivergedError(ProsodyTTSError, RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
