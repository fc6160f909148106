"""Exception types shared across the package."""


class SparselocError(Exception):
    """Base class for all sparseloc errors."""


class EmptyCloud(SparselocError):
    pass


class NonFinite(SparselocError):
    pass


class StrideMismatch(SparselocError):
    pass


class MissingSkip(SparselocError):
    pass


class ChannelMismatch(SparselocError):
    pass


class EmptyTensor(SparselocError):
    pass


class IncompleteWeights(SparselocError):
    pass


class SupportCollapse(SparselocError):
    pass


class UnrecordedNode(SparselocError):
    pass


class NonFiniteGradient(SparselocError):
    pass


class LengthMismatch(SparselocError):
    pass


class InsufficientData(SparselocError):
    pass


class DuplicateId(SparselocError):
    pass


class EmptyDb(SparselocError):
    pass


class BadSize(SparselocError):
    pass


class OutOfRange(SparselocError):
    pass


class ParseError(SparselocError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line
