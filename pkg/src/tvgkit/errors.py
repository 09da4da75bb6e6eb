"""Exception hierarchy shared by every tvgkit module."""


class TvgError(Exception):
    """Base class for all tvgkit errors."""


class ConfigError(TvgError, ValueError):
    pass


class DimMismatch(TvgError, ValueError):
    pass


# -- matrix files ---------------------------------------------------------

class FormatError(TvgError, ValueError):
    """A matrix file or payload violates the ATVG layout."""


class BadMagic(FormatError):
    pass


class Truncated(FormatError):
    pass


class DimZero(FormatError):
    pass


class NonFinite(FormatError):
    pass


class IoFailure(TvgError, OSError):
    pass


# -- subtitles ------------------------------------------------------------

class SchemaError(TvgError, ValueError):
    pass


class BadTag(SchemaError):
    pass


# -- embeddings -----------------------------------------------------------

class StoreUnreadable(TvgError):
    pass


class HttpFailure(TvgError):
    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class RaggedResponse(HttpFailure):
    pass


class MissingToken(TvgError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ZeroVector(TvgError, ValueError):
    pass


class EmptyMoment(TvgError, ValueError):
    pass


# -- moments and captions -------------------------------------------------

class KTooLarge(TvgError, ValueError):
    pass


class MissingContext(TvgError, ValueError):
    pass


class EmptyCaption(TvgError, ValueError):
    pass


class NoCandidateWords(TvgError):
    pass


# -- grounding ------------------------------------------------------------

class OutOfRange(TvgError, ValueError):
    pass


class EmptyEvaluation(TvgError, ValueError):
    pass


class NoResolvableTokens(TvgError):
    pass


class UnknownVideoId(TvgError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


# -- head -----------------------------------------------------------------

class DegenerateMask(TvgError, ValueError):
    pass
