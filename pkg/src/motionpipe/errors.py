"""Exception types shared across the pipeline."""


class DataFormatError(ValueError):
    """A file or byte stream does not conform to its declared format."""


class ConvergenceError(RuntimeError):
    """An iterative solver exhausted its iteration budget."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and fold index."""

    def __init__(self, stage: str, fold: int, message: str):
        super().__init__(f"fold {fold}, stage {stage}: {message}")
        self.stage = stage
        self.fold = fold
