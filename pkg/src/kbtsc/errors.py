"""Exception hierarchy shared across the package."""


class KbtscError(Exception):
    pass


# --- ingestion -------------------------------------------------------------

class FormatError(KbtscError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ParseError(FormatError):
    pass


class MissingValueError(ParseError):
    pass


class EmptyDataset(KbtscError):
    pass


class AlignmentError(KbtscError):
    pass


class InsufficientSamples(KbtscError):
    def __init__(self, label, have, need):
        self.label, self.have, self.need = label, have, need
        super().__init__(f"class {label!r} has {have} samples, need {need}")


# --- features / plotting ---------------------------------------------------

class EmptyInput(KbtscError):
    pass


class UnknownClass(KbtscError):
    pass


class ConfigError(KbtscError):
    pass


# --- knowledge bank --------------------------------------------------------

class MalformedOperation(KbtscError):
    pass


class PhaseError(KbtscError):
    pass


class CorruptSnapshot(KbtscError):
    pass


# --- transport / agents ----------------------------------------------------

class TransportError(KbtscError):
    pass


class AuthOrQuotaError(TransportError):
    def __init__(self, message, status=None):
        self.status = status
        super().__init__(message)


class ScriptExhausted(TransportError):
    pass


class MalformedOutput(KbtscError):
    pass


class SchemaError(MalformedOutput):
    def __init__(self, key, message=None):
        self.key = key
        super().__init__(message or f"missing or invalid key: {key!r}")


class RoleFailure(KbtscError):
    """A role call that still failed after every repair attempt."""

    def __init__(self, message, transcripts=()):
        self.transcripts = list(transcripts)
        super().__init__(message)


class MissingClass(KbtscError):
    pass
