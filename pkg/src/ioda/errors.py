"""Exception hierarchy shared by every layer."""


class IodaError(Exception):
    """Base class for all errors raised by this package."""

    code = "IodaError"


class MalformedAddress(IodaError, ValueError):
    code = "MalformedAddress"


class InvalidRecord(IodaError, ValueError):
    code = "InvalidRecord"


class TypeMismatch(IodaError, TypeError):
    code = "TypeMismatch"


class UnresolvedJoinSource(IodaError, KeyError):
    code = "UnresolvedJoinSource"

    def __str__(self):
        return Exception.__str__(self)


class InvalidSpec(IodaError, ValueError):
    code = "InvalidSpec"


class StoreUnavailable(IodaError, OSError):
    code = "StoreUnavailable"


class UnknownIPort(IodaError, LookupError):
    code = "UnknownIPort"


class UnknownOPort(IodaError, LookupError):
    code = "UnknownOPort"


class AccessDenied(IodaError, PermissionError):
    code = "AccessDenied"


class WrongDomain(IodaError, ValueError):
    code = "WrongDomain"


class NotFound(IodaError, LookupError):
    code = "NotFound"


class UnknownPeer(IodaError, LookupError):
    code = "UnknownPeer"


class AuthFailed(IodaError):
    code = "AuthFailed"


class ProtocolViolation(IodaError):
    code = "ProtocolViolation"


class TransportClosed(IodaError, ConnectionError):
    code = "TransportClosed"


class SessionClosed(IodaError, ConnectionError):
    code = "SessionClosed"


class ActivationFailed(IodaError):
    code = "ActivationFailed"

    def __init__(self, edge, cause):
        super().__init__(f"activation failed on edge {edge}: {cause}")
        self.edge = edge
        self.cause = cause


class UnknownRecord(IodaError, LookupError):
    code = "UnknownRecord"


class LedgerError(IodaError, ValueError):
    code = "LedgerError"


class ParseError(IodaError, ValueError):
    code = "ParseError"


class ValidationError(IodaError, ValueError):
    code = "ValidationError"


#: Error codes that may cross a wire inside an ERROR frame.
WIRE_ERRORS = {
    cls.code: cls
    for cls in (
        AccessDenied,
        UnknownOPort,
        UnknownIPort,
        NotFound,
        UnknownPeer,
        AuthFailed,
        ProtocolViolation,
        SessionClosed,
        TypeMismatch,
        InvalidRecord,
        MalformedAddress,
    )
}


def error_from_code(code, message):
    """Rebuild a local exception from an ERROR frame's code."""
    cls = WIRE_ERRORS.get(code, IodaError)
    if cls is IodaError:
        return IodaError(f"{code}: {message}")
    return cls(message)
