"""Exception hierarchy shared across the package.

``InputError`` subclasses signal problems with user-supplied files, flags or
configuration (CLI exit code 2); everything else is a runtime failure
(exit code 1).
"""


class RescapError(Exception):
    """Base class for all package errors."""


class InputError(RescapError):
    """Invalid user input: files, flags, configuration."""


# --- sequence I/O ---------------------------------------------------------

class MalformedFasta(InputError):
    pass


class DuplicateId(InputError):
    pass


class IllegalResidue(InputError):
    def __init__(self, char: str, position: int, seq_id: str = ""):
        self.char = char
        self.position = position
        self.seq_id = seq_id
        where = f" in record '{seq_id}'" if seq_id else ""
        super().__init__(f"illegal residue {char!r} at position {position}{where}")


class UnresolvedId(InputError):
    pass


class BadLabel(InputError):
    pass


class BadSplit(InputError):
    pass


# --- feature stores -------------------------------------------------------

class BadMagic(InputError):
    pass


class DimMismatch(InputError):
    pass


class TruncatedFile(InputError):
    pass


class NonFiniteValue(RescapError):
    pass


class MissingFeature(InputError):
    def __init__(self, seq_id: str):
        self.seq_id = seq_id
        super().__init__(f"no feature available for id '{seq_id}'")


class KindMismatch(InputError):
    pass


# --- alignment ------------------------------------------------------------

class EmptySequence(InputError):
    pass


# --- tensor engine --------------------------------------------------------

class ShapeMismatch(RescapError):
    pass


class NonFiniteGradient(RescapError):
    pass


class GraphCycle(RescapError):
    pass


class TargetOutOfRange(RescapError):
    pass


# --- model ----------------------------------------------------------------

class InvalidConfig(InputError):
    pass


class VersionMismatch(InputError):
    pass


class CorruptCheckpoint(InputError):
    pass


# --- training / evaluation ------------------------------------------------

class SingleClass(RescapError):
    pass


class TooFewSamples(InputError):
    pass


class NonFiniteLoss(RescapError):
    pass
