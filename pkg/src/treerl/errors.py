"""Exception hierarchy shared by every module."""


class TreeRLError(Exception):
    """Base class for all package errors."""


class InvalidSegment(TreeRLError):
    pass


class InvalidForkPoint(TreeRLError):
    pass


class MaskedPosition(InvalidForkPoint):
    pass


class UnknownNode(TreeRLError, KeyError):
    pass


class NotALeaf(TreeRLError):
    pass


class InvalidConfig(TreeRLError, ValueError):
    pass


class UngradedLeaf(TreeRLError):
    pass


class InvalidScheme(TreeRLError, ValueError):
    pass


class VocabError(TreeRLError):
    pass


class NotTerminal(TreeRLError):
    pass


class InvalidBatch(TreeRLError, ValueError):
    pass


class BackendError(TreeRLError):
    """Raised when a generation backend fails.

    ``kind`` is a short machine-readable tag, e.g. ``"MissingLogprobs"``,
    ``"Timeout"``, ``"HTTPStatus"``, ``"MalformedResponse"``, ``"Transport"``.
    """

    def __init__(self, kind, message=""):
        super().__init__(f"{kind}: {message}" if message else kind)
        self.kind = kind


class SearchError(TreeRLError):
    pass


class MaskExhausted(SearchError):
    pass


class EmptyDataset(TreeRLError, ValueError):
    pass


class EmptyHistogram(TreeRLError, ValueError):
    pass


class OutOfDomain(TreeRLError, ValueError):
    pass


class InvariantViolation(TreeRLError):
    pass
