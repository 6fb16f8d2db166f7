"""Exception hierarchy shared by every synkpar module."""


class SynkError(Exception):
    """Base class for all synkpar errors."""


class ShapeError(SynkError, ValueError):
    pass


class RankError(ShapeError):
    """Operation needs a buffer of rank >= 1."""


class DTypeError(SynkError, TypeError):
    pass


class BoundsError(SynkError, IndexError):
    pass


class UnsupportedOpError(SynkError, ValueError):
    pass


class DegenerateWeightError(SynkError, ValueError):
    pass


class CapacityError(SynkError, ValueError):
    pass


class UseAfterFreeError(SynkError, RuntimeError):
    pass


class LifecycleError(SynkError, RuntimeError):
    """Operation issued in the wrong pool/function state."""


class ArityError(SynkError, TypeError):
    pass


class EmptyFunctionError(SynkError, ValueError):
    pass


class SlicingConflictError(SynkError, ValueError):
    """An Overwrite update cannot be accumulated across input slices."""


class EmptyReductionError(SynkError, ValueError):
    """A reduce over zero contributing shards has no neutral element."""


class CoherenceError(SynkError, RuntimeError):
    pass


class NumericError(SynkError, FloatingPointError):
    pass


class PhaseError(SynkError, RuntimeError):
    """A rank failed while executing a phase. The pool is shut down."""

    def __init__(self, rank: int, cause: BaseException):
        super().__init__(f"rank {rank} failed: {cause!r}")
        self.rank = rank
        self.cause = cause


class BarrierTimeout(SynkError, RuntimeError):
    pass
