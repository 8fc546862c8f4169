"""Exception hierarchy shared by every packfuse module."""


class PackFuseError(Exception):
    pass


class VocabMismatch(PackFuseError, ValueError):
    pass


class EmptySequence(PackFuseError, ValueError):
    pass


class EmptyCorpus(PackFuseError, ValueError):
    pass


class NonFiniteInput(PackFuseError, ValueError):
    pass


class LengthMismatch(PackFuseError, ValueError):
    pass


class DimensionMismatch(PackFuseError, ValueError):
    pass


class PromptTooShort(PackFuseError, ValueError):
    pass


class DocTooShort(PackFuseError, ValueError):
    pass


class InvalidTau(PackFuseError, ValueError):
    pass


class TooManyModels(PackFuseError, ValueError):
    pass


class EmptyClusterSet(PackFuseError, ValueError):
    pass


class ConfigError(PackFuseError, ValueError):
    pass


class RemoteError(PackFuseError):
    """Failure talking to a remote logit server."""


class RemoteTimeout(RemoteError, TimeoutError):
    pass


class RemoteUnavailable(RemoteError, ConnectionError):
    pass


class ProtocolError(RemoteError):
    pass


class VocabHashMismatch(RemoteError):
    pass
