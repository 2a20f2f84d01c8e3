"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class WLCGTokenError(Exception):
    """Base class for all errors raised by this package."""


# token core


class Malformed(WLCGTokenError):
    """A compact token could not be parsed (segments, base64 or JSON)."""


class InvalidClaims(WLCGTokenError):
    """A claim set violates the data-model invariants."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class UnsupportedAlgorithm(WLCGTokenError):
    """The signature algorithm is not on the allowlist."""


class KidMismatch(WLCGTokenError):
    """The token header kid does not match the verification key."""


# trust anchors


class TrustError(WLCGTokenError):
    pass


class FetchFailed(TrustError):
    pass


class IssuerMismatch(TrustError):
    pass


class MalformedMetadata(TrustError):
    pass


class UnknownIssuer(TrustError):
    pass


class UnknownKid(TrustError):
    pass


class DuplicateIssuer(TrustError):
    pass


# authorization


class MalformedScopeEntry(WLCGTokenError):
    pass


class InvalidPath(WLCGTokenError):
    pass


class InvalidGroupName(WLCGTokenError):
    pass


class ConfigError(WLCGTokenError):
    pass
