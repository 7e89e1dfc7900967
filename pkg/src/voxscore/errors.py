"""Exceptions shared across the package."""


class FormatError(ValueError):
    """A file or byte stream does not conform to its declared format.

    Carries enough context (line number or byte offset where known) for the
    message to point at the offending record.
    """


class TrainingDivergedError(RuntimeError):
    """Raised when a weight update would introduce non-finite values."""

    def __init__(self, iteration: int, detail: str = ""):
        self.iteration = iteration
        msg = f"non-finite update at iteration {iteration}"
        if detail:
            msg = f"{msg}: {detail}"
        super().__init__(msg)
