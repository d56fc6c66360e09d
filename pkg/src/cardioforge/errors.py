class CardioForgeError(Exception):
    """Base class for toolkit errors."""


class DomainError(CardioForgeError, ValueError):
    pass


class IntegrationDiverged(CardioForgeError, ArithmeticError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"integration diverged at step {step}")


class FitDiverged(CardioForgeError, ArithmeticError):
    pass


class ShapeError(CardioForgeError, ValueError):
    pass


class ConfigError(CardioForgeError, ValueError):
    pass


class DataError(CardioForgeError, ValueError):
    """Malformed or inconsistent input data."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingDiverged(CardioForgeError, ArithmeticError):
    def __init__(self, message: str, checkpoint: str | None = None):
        self.checkpoint = checkpoint
        super().__init__(message if checkpoint is None else f"{message} (diagnostics: {checkpoint})")
