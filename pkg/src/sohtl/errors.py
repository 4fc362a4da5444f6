"""Exception hierarchy shared by every stage of the pipeline.

Each class carries a short ``kind`` string used by the CLI to print
``error:<kind>:<message>`` lines on standard error.
"""


class SohError(Exception):
    kind = "internal"


class InvalidInput(SohError, ValueError):
    kind = "invalid_input"


class NotFound(SohError, LookupError):
    kind = "not_found"


class SchemaError(SohError, ValueError):
    kind = "schema"


class ParseError(SohError, ValueError):
    kind = "parse"

    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class ShapeError(SohError, ValueError):
    kind = "shape"


class InsufficientData(SohError, ValueError):
    kind = "insufficient_data"


class CycleTooShort(InsufficientData):
    kind = "cycle_too_short"

    def __init__(self, cycle_index, length, required):
        super().__init__(
            f"cycle {cycle_index} has {length} samples, needs at least {required}"
        )
        self.cycle_index = cycle_index
        self.length = length
        self.required = required


class NumericalError(SohError, ArithmeticError):
    kind = "numerical"


class DivergenceError(NumericalError):
    kind = "divergence"

    def __init__(self, epoch, loss):
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class NotTransferable(SohError):
    kind = "not_transferable"

    def __init__(self, verdict):
        super().__init__(
            "target is not similar to source "
            f"(s1={verdict.s1_fraction:.3f}, s2={verdict.s2_fraction:.3f})"
        )
        self.verdict = verdict


class VersionError(SohError):
    kind = "version"

    def __init__(self, found, expected):
        super().__init__(
            f"unsupported model format version {found!r} (expected {expected!r})"
        )
        self.found = found
        self.expected = expected


class CorruptModel(SohError):
    kind = "corrupt_model"


class IoError(SohError, OSError):
    kind = "io"
