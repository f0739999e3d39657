"""
Exception hierarchy shared by every ulu_kit module.

Each error carries a full-sentence message naming the offending value and
what was expected, so the CLI can print it unchanged.
"""


class UluKitError(Exception):
    """Base class for all ulu_kit errors"""


class InvalidSpecError(UluKitError, ValueError):
    """An activation, model, training or analysis configuration is invalid"""


class ShapeMismatchError(UluKitError, ValueError):
    """
    Raised while recording a graph when operand shapes do not line up

    Args:
        node: Name of the node being recorded (e.g. "MatMul#4")
        message: What was expected and what was found
    """

    def __init__(self, node: str, message: str):
        self.node = node
        super().__init__(f"{node}: {message}")


class BackwardBeforeForwardError(UluKitError, RuntimeError):
    """backward() was called on a graph that has no recorded loss"""


class NonFiniteGradientError(UluKitError, FloatingPointError):
    """An optimizer step saw a NaN or infinite gradient and was aborted"""


class ParamStoreFormatError(UluKitError, ValueError):
    """A serialized parameter file is malformed"""


class IdxFormatError(UluKitError, ValueError):
    """Base class for IDX (MNIST container) parsing problems"""


class BadMagicError(IdxFormatError):
    """The file does not start with the expected IDX magic number"""


class TruncatedError(IdxFormatError):
    """The file ends before the payload announced by its header"""


class CountMismatchError(IdxFormatError):
    """Image and label files disagree on the number of items"""


class InvalidDatasetError(UluKitError, ValueError):
    """A Dataset violates its invariants (pixel range, label range, counts)"""


class InsufficientSamplesError(UluKitError, ValueError):
    """A stratified split asked for more samples of a class than exist"""


class EmptyDatasetError(UluKitError, ValueError):
    """An operation that needs at least one sample received none"""


class NoAdaptiveSitesError(UluKitError, ValueError):
    """LIB was requested for a model without adaptive activation sites"""
