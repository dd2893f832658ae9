"""Exception hierarchy shared by all splatpatch modules."""


class SplatpatchError(Exception):
    """Base class for all library errors."""


class EmptyInput(SplatpatchError):
    pass


class InsufficientPoints(SplatpatchError):
    pass


class DegenerateCloud(SplatpatchError):
    pass


class InvalidArgument(SplatpatchError):
    pass


class MissingNormals(SplatpatchError):
    pass


class InvalidState(SplatpatchError):
    pass


class NonFiniteInput(SplatpatchError):
    pass


class NonFiniteGradient(SplatpatchError):
    pass


class FormatError(SplatpatchError):
    """Malformed file content; message carries path and location context."""


class BadMagic(FormatError):
    pass


class UnexpectedEof(FormatError):
    pass


class VersionMismatch(FormatError):
    pass
