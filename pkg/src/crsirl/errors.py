class CRSError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(CRSError, ValueError):
    pass


class DegenerateWeightsError(CRSError, ArithmeticError):
    """Item-score weights cannot be normalised into a probability."""


class NotACandidateError(CRSError, LookupError):
    pass


class EpisodeFinishedError(CRSError, RuntimeError):
    pass


class NoActionsError(CRSError, RuntimeError):
    pass


class NoPairError(CRSError, LookupError):
    """The trajectory buffer holds no valid preference pair."""


class NumericError(CRSError, ArithmeticError):
    pass
