"""Exception types raised across the package."""


class GapEnsError(Exception):
    """Base class for every error raised by gapens."""


class EmptyInput(GapEnsError, ValueError):
    pass


# --- SMILES parsing -------------------------------------------------------


class SmilesError(GapEnsError, ValueError):
    pass


class UnknownToken(SmilesError):
    def __init__(self, position, detail=""):
        self.position = position
        msg = f"unknown or misplaced token at position {position}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class UnclosedRing(SmilesError):
    def __init__(self, digit):
        self.digit = digit
        super().__init__(f"ring closure {digit} never closed")


class UnclosedBranch(SmilesError):
    def __init__(self):
        super().__init__("branch opened with '(' is never closed")


class OutOfVocabulary(GapEnsError, ValueError):
    def __init__(self, field, value):
        self.field = field
        self.value = value
        super().__init__(f"{field}={value} is outside the feature vocabulary")


# --- numerics -------------------------------------------------------------


class ShapeMismatch(GapEnsError, ValueError):
    pass


class IndexOutOfRange(GapEnsError, IndexError):
    pass


class InvalidBounds(GapEnsError, ValueError):
    pass


class NonPositiveSigma(GapEnsError, ValueError):
    pass


class NotScalar(GapEnsError, ValueError):
    pass


class DeadTape(GapEnsError, RuntimeError):
    pass


class BatchTooSmall(GapEnsError, ValueError):
    pass


# --- models ---------------------------------------------------------------


class EmptyBatch(GapEnsError, ValueError):
    pass


class EmptyGraph(GapEnsError, ValueError):
    pass


# --- training / checkpoints ---------------------------------------------


class BadHeader(GapEnsError, ValueError):
    pass


class ParseError(GapEnsError, ValueError):
    def __init__(self, rows, detail=""):
        self.rows = list(rows)
        msg = f"unparseable SMILES on row(s) {self.rows}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class BadFractions(GapEnsError, ValueError):
    pass


class OverlappingSplits(GapEnsError, ValueError):
    pass


class MissingTargets(GapEnsError, ValueError):
    pass


class VersionMismatch(GapEnsError, ValueError):
    pass


class CheckpointIOError(GapEnsError, OSError):
    pass


class CorruptTensor(GapEnsError, ValueError):
    def __init__(self, name, detail=""):
        self.name = name
        msg = f"tensor {name!r} is corrupt"
        super().__init__(f"{msg}: {detail}" if detail else msg)


# --- ensemble ------------------------------------------------------------


class EmptyMatrix(GapEnsError, ValueError):
    pass


class IndexMismatch(GapEnsError, ValueError):
    pass


class TooFewLearners(GapEnsError, ValueError):
    pass


class ZeroVariance(GapEnsError, ValueError):
    pass


class LengthMismatch(GapEnsError, ValueError):
    pass
