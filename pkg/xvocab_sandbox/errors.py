class XVocabError(Exception):
    """Base class for every error raised by the sandbox."""


class TokenizerError(XVocabError):
    pass


class ModelError(XVocabError):
    pass


class CacheError(XVocabError):
    pass


class TranslationError(XVocabError):
    pass


class AdaptError(XVocabError):
    pass


class ConfigError(XVocabError):
    pass


class VersionError(XVocabError):
    """A versioned artifact was written by a different format version."""

    def __init__(self, kind: str, found, expected):
        super().__init__(f"{kind} format version {found!r} is not supported (expected {expected!r})")
        self.found = found
        self.expected = expected
