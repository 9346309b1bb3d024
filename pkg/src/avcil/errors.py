"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violated a documented precondition."""


class NumericDomainError(ArithmeticError):
    """An operation left its numeric domain (non-finite input, zero norm, ...)."""


class FormatError(ValueError):
    """A binary or JSON artifact failed to parse; the message names the offset or field."""


class ConfigError(ValueError):
    """A run configuration is invalid or inconsistent."""


class TrainingDiverged(RuntimeError):
    """The training loss left the finite range."""

    def __init__(self, step: int, epoch: int, batch: int, value: float):
        self.step = step
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(
            f"non-finite loss {value!r} at step {step}, epoch {epoch}, batch {batch}"
        )


class VerificationFailure(RuntimeError):
    """A self-check (gradient suite) reported an error above tolerance."""
