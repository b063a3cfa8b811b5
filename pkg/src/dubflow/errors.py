"""Exception hierarchy shared by every module."""


class DubflowError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DubflowError, ValueError):
    pass


class DomainError(DubflowError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigError(DomainError):
    pass


class SingularityError(DomainError):
    pass


class InconsistentEvidenceError(DubflowError, ValueError):
    """The observed partially-masked state has zero probability under the target law."""


class DenoiserOutputError(DubflowError, ValueError):
    """A denoiser returned rows that are not probability distributions."""


class TrainingDivergedError(DubflowError, RuntimeError):
    def __init__(self, step: int, loss: float, detail: str = ""):
        self.step = step
        self.loss = loss
        msg = f"non-finite loss {loss!r} at step {step}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
