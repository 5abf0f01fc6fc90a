"""Exception hierarchy shared by all angiomatch modules."""


class AngiomatchError(Exception):
    """Base class for all errors raised by this package."""


class NonPositiveDepth(AngiomatchError, ValueError):
    """A 3D point lies at or behind the X-ray source."""


class DegenerateGeometry(AngiomatchError, ValueError):
    """Two cameras share a center, so no epipolar geometry exists."""


class InsufficientMatches(AngiomatchError, ValueError):
    pass


class NoConsensus(AngiomatchError, RuntimeError):
    pass


class InvalidT(AngiomatchError, ValueError):
    pass


class OutOfBounds(AngiomatchError, ValueError):
    pass


class ZeroVector(AngiomatchError, ValueError):
    pass


class EmptyInput(AngiomatchError, ValueError):
    pass


class NoMatches(AngiomatchError, ValueError):
    pass


class DegenerateCovariance(AngiomatchError, ValueError):
    pass


class ConfigError(AngiomatchError, ValueError):
    pass


class FormatError(AngiomatchError, ValueError):
    """A data file could not be parsed. ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
