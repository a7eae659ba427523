class ContractError(ValueError):
    """Raised when an input violates an operation's preconditions."""


class StageError(ContractError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
