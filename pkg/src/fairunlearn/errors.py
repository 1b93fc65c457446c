"""Exception hierarchy shared by every stage of the pipeline."""


class FairUnlearnError(Exception):
    """Base class; ``stage`` is filled in by the orchestrator."""

    stage = None


class ParseError(FairUnlearnError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyInputError(FairUnlearnError):
    pass


class DegenerateSplitError(FairUnlearnError):
    pass


class DivergenceError(FairUnlearnError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class NumericalError(FairUnlearnError):
    pass


class SolverError(FairUnlearnError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class GroupEmptyError(FairUnlearnError):
    pass


class AlignmentError(FairUnlearnError):
    pass


class DegenerateRemainError(FairUnlearnError):
    pass


class SizeError(FairUnlearnError):
    pass
