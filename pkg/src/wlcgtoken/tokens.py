"""WLCG profile token model, compact JWT serialization and claim validation."""

from __future__ import annotations

import json
import secrets
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Any, Mapping
from urllib.parse import urlsplit

from .clock import Clock, SystemClock
from .errors import InvalidClaims, KidMismatch, Malformed
from .keys import KeyPair, VerificationKey, b64url_decode, b64url_encode, check_algorithm

PROFILE_VERSION = "1.0"
ANY_AUDIENCE = "https://wlcg.cern.ch/jwt/v1/any"
DEFAULT_SKEW = 60


class TokenKind(str, Enum):
    ID = "IdToken"
    ACCESS = "AccessToken"
    REFRESH = "RefreshToken"


# Row name -> (used in ID token, used in access token).
PROFILE_MATRIX: dict[str, tuple[bool, bool]] = {
    "sub": (True, True),
    "exp": (True, True),
    "iss": (True, True),
    "acr": (True, True),
    "aud": (True, True),
    "iat": (True, True),
    "nbf": (True, True),
    "jti": (True, True),
    "eduperson_assurance": (True, True),
    "wlcg.ver": (True, True),
    "wlcg.groups": (True, True),
    "auth_time": (True, False),
    "standard OIDC claims": (True, False),
    "scope": (False, True),
}

REQUIRED_CLAIMS = ("sub", "iss", "aud", "exp", "iat", "jti", "wlcg.ver")

# OpenID Connect Core standard claims, minus ``sub`` which the profile owns.
OIDC_STANDARD_CLAIMS = frozenset(
    {
        "name", "given_name", "family_name", "middle_name", "nickname",
        "preferred_username", "profile", "picture", "website", "email",
        "email_verified", "gender", "birthdate", "zoneinfo", "locale",
        "phone_number", "phone_number_verified", "address", "updated_at",
    }
)

# wire claim name -> ClaimSet attribute
_WIRE_TO_ATTR = {
    "iss": "iss",
    "sub": "sub",
    "aud": "aud",
    "exp": "exp",
    "iat": "iat",
    "nbf": "nbf",
    "jti": "jti",
    "acr": "acr",
    "eduperson_assurance": "eduperson_assurance",
    "wlcg.ver": "wlcg_ver",
    "wlcg.groups": "wlcg_groups",
    "scope": "scope",
    "auth_time": "auth_time",
}
_ATTR_TO_WIRE = {v: k for k, v in _WIRE_TO_ATTR.items()}


def _as_tuple(value):
    if isinstance(value, list):
        return tuple(value)
    return value


@dataclass(frozen=True)
class ClaimSet:
    """The profile claims as typed fields plus two extension maps.

    Fields are optional at the type level so that ``decode`` can represent any
    payload losslessly; ``invariant_violations`` states what a well-formed
    claim set must satisfy and ``encode_and_sign`` enforces it.
    """

    sub: str | None = None
    iss: str | None = None
    aud: tuple[str, ...] | None = None
    exp: int | None = None
    iat: int | None = None
    nbf: int | None = None
    jti: str | None = None
    acr: str | None = None
    eduperson_assurance: tuple[str, ...] | None = None
    wlcg_ver: str | None = None
    wlcg_groups: tuple[str, ...] | None = None
    scope: str | None = None
    auth_time: int | None = None
    oidc_standard: Mapping[str, Any] = field(default_factory=dict)
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        aud = self.aud
        if isinstance(aud, str):
            aud = (aud,)
        object.__setattr__(self, "aud", _as_tuple(aud))
        object.__setattr__(self, "wlcg_groups", _as_tuple(self.wlcg_groups))
        object.__setattr__(self, "eduperson_assurance", _as_tuple(self.eduperson_assurance))
        object.__setattr__(self, "oidc_standard", dict(self.oidc_standard))
        object.__setattr__(self, "extra", dict(self.extra))

    def replace(self, **changes) -> "ClaimSet":
        return replace(self, **changes)

    def to_payload(self) -> dict[str, Any]:
        payload: dict[str, Any] = {}
        for f in fields(self):
            wire = _ATTR_TO_WIRE.get(f.name)
            value = getattr(self, f.name)
            if wire is None or value is None:
                continue
            payload[wire] = list(value) if isinstance(value, tuple) else value
        payload.update(self.oidc_standard)
        payload.update(self.extra)
        return payload

    @classmethod
    def from_payload(cls, payload: Mapping[str, Any]) -> "ClaimSet":
        known: dict[str, Any] = {}
        oidc: dict[str, Any] = {}
        extra: dict[str, Any] = {}
        for name, value in payload.items():
            if name in _WIRE_TO_ATTR:
                known[_WIRE_TO_ATTR[name]] = value
            elif name in OIDC_STANDARD_CLAIMS:
                oidc[name] = value
            else:
                extra[name] = value
        return cls(**known, oidc_standard=oidc, extra=extra)

    def present_rows(self) -> set[str]:
        """Names of the profile-matrix rows this claim set populates."""
        rows = {wire for wire, attr in _WIRE_TO_ATTR.items() if getattr(self, attr) is not None}
        if self.oidc_standard:
            rows.add("standard OIDC claims")
        return rows

    def invariant_violations(self) -> list[str]:
        problems = []
        for wire in REQUIRED_CLAIMS:
            if getattr(self, _WIRE_TO_ATTR[wire]) is None:
                problems.append(f"missing required claim {wire}")
        for name in ("sub", "jti", "wlcg_ver"):
            value = getattr(self, name)
            if value is not None and (not isinstance(value, str) or not value):
                problems.append(f"{_ATTR_TO_WIRE[name]} must be a non-empty string")
        if self.iss is not None and not is_issuer_url(self.iss):
            problems.append("iss must be an absolute https URL")
        if self.aud is not None:
            if not isinstance(self.aud, tuple) or not self.aud:
                problems.append("aud must be non-empty")
            elif not all(isinstance(a, str) and a for a in self.aud):
                problems.append("aud entries must be non-empty strings")
        for name in ("exp", "iat", "nbf", "auth_time"):
            value = getattr(self, name)
            if value is not None and not _is_int(value):
                problems.append(f"{name} must be an integer")
        if _is_int(self.exp) and _is_int(self.iat) and not self.exp > self.iat:
            problems.append("exp must be later than iat")
        if _is_int(self.nbf) and _is_int(self.exp) and not self.nbf <= self.exp:
            problems.append("nbf must not be later than exp")
        if self.wlcg_groups is not None:
            if not isinstance(self.wlcg_groups, tuple):
                problems.append("wlcg.groups must be a list")
            else:
                problems.extend(
                    f"invalid group name {g!r}" for g in self.wlcg_groups if not is_group_name(g)
                )
        for name in ("acr", "scope"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, str):
                problems.append(f"{name} must be a string")
        if self.eduperson_assurance is not None and not (
            isinstance(self.eduperson_assurance, tuple)
            and all(isinstance(a, str) for a in self.eduperson_assurance)
        ):
            problems.append("eduperson_assurance must be a list of strings")
        for name in self.oidc_standard:
            if name not in OIDC_STANDARD_CLAIMS:
                problems.append(f"{name} is not a standard OIDC claim")
        for name in self.extra:
            if name in _WIRE_TO_ATTR or name in OIDC_STANDARD_CLAIMS:
                problems.append(f"extension claim {name} shadows a profile claim")
        return problems


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def is_group_name(value) -> bool:
    return (
        isinstance(value, str)
        and value.startswith("/")
        and len(value) > 1
        and all(value[1:].split("/"))
    )


def is_issuer_url(value, allow_http: bool = False) -> bool:
    if not isinstance(value, str):
        return False
    parts = urlsplit(value)
    if not parts.netloc or parts.query or parts.fragment:
        return False
    if parts.scheme == "https":
        return True
    # plain http is tolerated for loopback test deployments
    return parts.scheme == "http" and (
        allow_http or parts.hostname in ("localhost", "127.0.0.1", "::1")
    )


def new_jti() -> str:
    return secrets.token_hex(16)


def encode_and_sign(claims: ClaimSet, kind: TokenKind, key: KeyPair) -> str:
    if kind is TokenKind.REFRESH:
        raise ValueError("refresh tokens are opaque handles, not JWTs")
    check_algorithm(key.algorithm)
    problems = claims.invariant_violations()
    if problems:
        raise InvalidClaims(problems)
    header = {"alg": key.algorithm, "kid": key.kid, "typ": "JWT"}
    signing_input = ".".join(
        b64url_encode(json.dumps(part, separators=(",", ":")).encode())
        for part in (header, claims.to_payload())
    )
    signature = key.sign(signing_input.encode("ascii"))
    return f"{signing_input}.{b64url_encode(signature)}"


def _split(token: str) -> tuple[str, str, str]:
    if not isinstance(token, str):
        raise Malformed("token must be a string")
    parts = token.split(".")
    if len(parts) != 3:
        raise Malformed(f"expected 3 segments, found {len(parts)}")
    return parts[0], parts[1], parts[2]


def _json_segment(segment: str, what: str) -> dict[str, Any]:
    try:
        value = json.loads(b64url_decode(segment))
    except (ValueError, UnicodeDecodeError) as exc:
        raise Malformed(f"{what} is not base64url JSON") from exc
    if not isinstance(value, dict):
        raise Malformed(f"{what} is not a JSON object")
    return value


def decode(token: str) -> tuple[dict[str, Any], ClaimSet]:
    """Split and parse a compact token without validating anything."""
    header_b64, payload_b64, signature_b64 = _split(token)
    header = _json_segment(header_b64, "header")
    if not isinstance(header.get("alg"), str):
        raise Malformed("header has no alg")
    payload = _json_segment(payload_b64, "payload")
    try:
        b64url_decode(signature_b64)
    except ValueError as exc:
        raise Malformed("signature is not base64url") from exc
    return header, ClaimSet.from_payload(payload)


def verify_signature(token: str, key: VerificationKey) -> bool:
    header_b64, payload_b64, signature_b64 = _split(token)
    header = _json_segment(header_b64, "header")
    alg = check_algorithm(header.get("alg"))
    if header.get("kid") != key.kid:
        raise KidMismatch(f"token kid {header.get('kid')!r} != key kid {key.kid!r}")
    if alg != key.algorithm:
        return False
    try:
        signature = b64url_decode(signature_b64)
    except ValueError:
        return False
    return key.verify(f"{header_b64}.{payload_b64}".encode("ascii"), signature)


class ValidationFailure(str, Enum):
    MISSING_CLAIM = "MissingClaim"
    UNTRUSTED_ISSUER = "UntrustedIssuer"
    AUDIENCE_MISMATCH = "AudienceMismatch"
    EXPIRED = "Expired"
    NOT_YET_VALID = "NotYetValid"
    ISSUED_IN_FUTURE = "IssuedInFuture"
    MISSING_JTI = "MissingJti"
    MISSING_VERSION = "MissingVersion"
    BAD_CLAIM_TYPE = "BadClaimType"


@dataclass(frozen=True)
class ValidationContext:
    expected_audiences: tuple[str, ...] = ()
    accepted_issuers: tuple[str, ...] = ()
    clock: Clock = field(default_factory=SystemClock)
    skew_tolerance: int = DEFAULT_SKEW
    required_kind: TokenKind = TokenKind.ACCESS
    wildcard_audience: str | None = ANY_AUDIENCE

    def __post_init__(self):
        if self.skew_tolerance < 0:
            raise ValueError("skew_tolerance must be >= 0")
        object.__setattr__(self, "expected_audiences", tuple(self.expected_audiences))
        object.__setattr__(self, "accepted_issuers", tuple(self.accepted_issuers))


@dataclass(frozen=True)
class ValidationReport:
    failures: tuple[tuple[ValidationFailure, str], ...]

    @property
    def accepted(self) -> bool:
        return not self.failures

    @property
    def codes(self) -> set[ValidationFailure]:
        return {code for code, _ in self.failures}

    def __str__(self):
        if self.accepted:
            return "accepted"
        return "; ".join(f"{code.value}: {detail}" for code, detail in self.failures)


def validate_claims(claims: ClaimSet, ctx: ValidationContext) -> ValidationReport:
    now = ctx.clock.now()
    skew = ctx.skew_tolerance
    failures: list[tuple[ValidationFailure, str]] = []

    def fail(code, detail):
        failures.append((code, detail))

    if claims.iss not in ctx.accepted_issuers:
        fail(ValidationFailure.UNTRUSTED_ISSUER, f"issuer {claims.iss!r} is not accepted")

    aud = claims.aud or ()
    if not isinstance(aud, tuple):
        fail(ValidationFailure.BAD_CLAIM_TYPE, "aud is not a string or list")
    elif not (set(aud) & set(ctx.expected_audiences)) and not (
        ctx.wildcard_audience is not None and ctx.wildcard_audience in aud
    ):
        fail(ValidationFailure.AUDIENCE_MISMATCH, f"audience {list(aud)} not addressed to us")

    for name, check in (
        ("exp", lambda v: now < v + skew),
        ("nbf", lambda v: now >= v - skew),
        ("iat", lambda v: now >= v - skew),
    ):
        value = getattr(claims, name)
        if value is None:
            if name != "nbf":
                fail(ValidationFailure.MISSING_CLAIM, f"{name} is missing")
        elif not _is_int(value):
            fail(ValidationFailure.BAD_CLAIM_TYPE, f"{name} is not an integer")
        elif not check(value):
            code = {
                "exp": ValidationFailure.EXPIRED,
                "nbf": ValidationFailure.NOT_YET_VALID,
                "iat": ValidationFailure.ISSUED_IN_FUTURE,
            }[name]
            fail(code, f"{name}={value}, now={now}, skew={skew}")

    if not (isinstance(claims.jti, str) and claims.jti):
        fail(ValidationFailure.MISSING_JTI, "jti is missing or empty")
    if not (isinstance(claims.wlcg_ver, str) and claims.wlcg_ver):
        fail(ValidationFailure.MISSING_VERSION, "wlcg.ver is missing")
    return ValidationReport(tuple(failures))


@dataclass(frozen=True)
class ShapeIssue:
    row: str
    message: str

    def __str__(self):
        return self.message


@dataclass(frozen=True)
class ShapeReport:
    kind: TokenKind
    violations: tuple[ShapeIssue, ...]
    warnings: tuple[ShapeIssue, ...]

    @property
    def conformant(self) -> bool:
        return not self.violations


_COLUMN = {TokenKind.ID: (0, "ID-token"), TokenKind.ACCESS: (1, "access-token")}


def check_profile_shape(claims: ClaimSet, kind: TokenKind) -> ShapeReport:
    if kind not in _COLUMN:
        raise ValueError(f"{kind} has no profile shape")
    column, label = _COLUMN[kind]
    present = claims.present_rows()
    violations = [
        ShapeIssue(wire, f"missing required claim {wire}")
        for wire in REQUIRED_CLAIMS
        if wire not in present
    ]
    violations.extend(
        ShapeIssue(row, f"{row} not in {label} column")
        for row, marks in PROFILE_MATRIX.items()
        if row in present and not marks[column]
    )
    warnings = [ShapeIssue(name, f"unrecognized claim {name}") for name in claims.extra]
    return ShapeReport(kind, tuple(violations), tuple(warnings))
