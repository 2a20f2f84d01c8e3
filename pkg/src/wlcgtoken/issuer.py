"""Token issuer: client registry, stub user store, grants and publication.

:class:`TokenIssuer` holds the grant logic and is usable directly from
Python; :class:`IssuerApp` exposes it over HTTP (discovery, JWKS,
``/authorize`` and ``/token``).
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import html
import json
import logging
import secrets
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping
from urllib.parse import urlencode, urlsplit

from .authz import Capability, scope_covered
from .clock import Clock, SystemClock
from .errors import ConfigError, KidMismatch, Malformed, MalformedScopeEntry, UnsupportedAlgorithm, WLCGTokenError
from .httpio import Request, Response
from .keys import KeyPair
from .store import (
    AuthorizationCode,
    GrantStore,
    MemoryGrantStore,
    RefreshTokenRecord,
    SqliteGrantStore,
    digest,
)
from .tokens import (
    PROFILE_VERSION,
    ClaimSet,
    TokenKind,
    ValidationContext,
    check_profile_shape,
    decode,
    encode_and_sign,
    is_issuer_url,
    new_jti,
    validate_claims,
    verify_signature,
)
from .trust import OAUTH_WELL_KNOWN, OIDC_WELL_KNOWN, IssuerMetadata

log = logging.getLogger(__name__)

TOKEN_EXCHANGE_GRANT = "urn:ietf:params:oauth:grant-type:token-exchange"
ACCESS_TOKEN_TYPE = "urn:ietf:params:oauth:token-type:access_token"

# internal grant name -> grant_type wire value
GRANTS = {
    "authorization_code": "authorization_code",
    "client_credentials": "client_credentials",
    "refresh_token": "refresh_token",
    "token_exchange": TOKEN_EXCHANGE_GRANT,
}


class OAuthError(WLCGTokenError):
    error = "invalid_request"
    status = 400

    def to_response(self) -> Response:
        doc = {
            "error": self.error,
            "error_description": str(self),
            "error_type": type(self).__name__,
        }
        headers = {"WWW-Authenticate": 'Basic realm="token"'} if self.status == 401 else None
        return Response.json(doc, self.status, headers)


class InvalidRequest(OAuthError):
    pass


class InvalidClient(OAuthError):
    error = "invalid_client"
    status = 401


class UnknownClient(InvalidClient):
    pass


class RedirectMismatch(OAuthError):
    pass


class BadCredentials(OAuthError):
    error = "access_denied"
    status = 401


class InvalidGrant(OAuthError):
    error = "invalid_grant"


class UnauthorizedClient(OAuthError):
    error = "unauthorized_client"


class UnsupportedGrantType(OAuthError):
    error = "unsupported_grant_type"


class ScopeNotAllowed(OAuthError):
    error = "invalid_scope"


class ScopeBroadening(OAuthError):
    error = "invalid_scope"


class AudienceNotPermitted(OAuthError):
    error = "invalid_target"


class InvalidSubjectToken(OAuthError):
    error = "invalid_grant"


# --- passwords ---------------------------------------------------------------

PBKDF2_ITERATIONS = 100_000


def hash_password(password: str, salt: bytes | None = None, iterations: int = PBKDF2_ITERATIONS) -> str:
    salt = salt or secrets.token_bytes(16)
    dk = hashlib.pbkdf2_hmac("sha256", password.encode(), salt, iterations)
    return "pbkdf2_sha256${}${}${}".format(
        iterations, base64.b64encode(salt).decode(), base64.b64encode(dk).decode()
    )


def check_password(password: str, encoded: str) -> bool:
    try:
        scheme, iterations, salt, expected = encoded.split("$")
    except ValueError:
        return False
    if scheme != "pbkdf2_sha256":
        return False
    dk = hashlib.pbkdf2_hmac("sha256", password.encode(), base64.b64decode(salt), int(iterations))
    return hmac.compare_digest(dk, base64.b64decode(expected))


# --- registry types ----------------------------------------------------------


def _scope_list(value: str | Iterable[str] | None) -> list[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return [s for s in value.split(" ") if s]
    return list(value)


def _caps(entries: Iterable[str]) -> list[Capability]:
    return [Capability.parse(e) for e in entries]


@dataclass(frozen=True)
class ClientRegistration:
    client_id: str
    client_secret: str
    allowed_grants: frozenset[str]
    allowed_scopes: frozenset[str] = frozenset()
    redirect_uris: tuple[str, ...] = ()
    default_audiences: tuple[str, ...] = ()

    def __post_init__(self):
        grants = frozenset(self.allowed_grants)
        unknown = grants - set(GRANTS)
        if unknown:
            raise ConfigError(f"client {self.client_id}: unknown grants {sorted(unknown)}")
        object.__setattr__(self, "allowed_grants", grants)
        object.__setattr__(self, "allowed_scopes", frozenset(self.allowed_scopes))
        _caps(self.allowed_scopes)
        object.__setattr__(self, "redirect_uris", tuple(self.redirect_uris))
        object.__setattr__(self, "default_audiences", tuple(self.default_audiences))

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ClientRegistration":
        return cls(
            client_id=doc["client_id"],
            client_secret=doc["client_secret"],
            allowed_grants=frozenset(doc.get("allowed_grants", ())),
            allowed_scopes=frozenset(_scope_list(doc.get("allowed_scopes"))),
            redirect_uris=tuple(doc.get("redirect_uris", ())),
            default_audiences=tuple(doc.get("default_audiences", ())),
        )


@dataclass(frozen=True)
class UserRecord:
    username: str
    password_hash: str
    subject: str
    groups: tuple[str, ...] = ()
    assurance: tuple[str, ...] = ()
    profile: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "UserRecord":
        if "password_hash" in doc:
            pw_hash = doc["password_hash"]
        elif "password" in doc:
            pw_hash = hash_password(doc["password"])
        else:
            raise ConfigError(f"user {doc.get('username')}: no password or password_hash")
        return cls(
            username=doc["username"],
            password_hash=pw_hash,
            subject=doc.get("subject") or doc["username"],
            groups=tuple(doc.get("groups", ())),
            assurance=tuple(doc.get("assurance", ())),
            profile=dict(doc.get("profile", {})),
        )


@dataclass(frozen=True)
class Lifetimes:
    access: int = 1200
    id: int = 600
    refresh: int = 12 * 3600
    code: int = 60


@dataclass
class IssuerConfig:
    issuer: str
    keys: list[KeyPair]
    clients: list[ClientRegistration] = field(default_factory=list)
    users: list[UserRecord] = field(default_factory=list)
    lifetimes: Lifetimes = field(default_factory=Lifetimes)
    exchangeable_audiences: tuple[str, ...] = ()
    profile_version: str = PROFILE_VERSION
    key_retention_grace: int = 60
    store_path: str | None = None
    listen: str = "127.0.0.1:8080"

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], base_dir: Path | None = None) -> "IssuerConfig":
        base_dir = base_dir or Path.cwd()
        try:
            keys = [KeyPair.load(base_dir / p) for p in doc["keys"]]
            if not keys:
                raise ConfigError("issuer config needs at least one signing key")
            return cls(
                issuer=doc["issuer"],
                keys=keys,
                clients=[ClientRegistration.from_dict(c) for c in doc.get("clients", [])],
                users=[UserRecord.from_dict(u) for u in doc.get("users", [])],
                lifetimes=Lifetimes(**doc.get("lifetimes", {})),
                exchangeable_audiences=tuple(doc.get("exchangeable_audiences", ())),
                profile_version=doc.get("profile_version", PROFILE_VERSION),
                key_retention_grace=int(doc.get("key_retention_grace", 60)),
                store_path=doc.get("store"),
                listen=doc.get("listen", "127.0.0.1:8080"),
            )
        except (KeyError, TypeError, OSError, ValueError) as exc:
            raise ConfigError(f"bad issuer configuration: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "IssuerConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        return cls.from_dict(doc, path.parent)


@dataclass(frozen=True)
class TokenResponse:
    access_token: str
    expires_in: int
    id_token: str | None = None
    refresh_token: str | None = None
    token_type: str = "Bearer"
    scope: str | None = None

    def to_dict(self) -> dict[str, Any]:
        doc = {
            "access_token": self.access_token,
            "token_type": self.token_type,
            "expires_in": self.expires_in,
        }
        for name in ("id_token", "refresh_token", "scope"):
            if getattr(self, name) is not None:
                doc[name] = getattr(self, name)
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "TokenResponse":
        return cls(
            access_token=doc["access_token"],
            expires_in=doc["expires_in"],
            id_token=doc.get("id_token"),
            refresh_token=doc.get("refresh_token"),
            token_type=doc.get("token_type", "Bearer"),
            scope=doc.get("scope"),
        )


def _dedupe(items: Iterable[str]) -> list[str]:
    return list(dict.fromkeys(items))


class TokenIssuer:
    def __init__(self, config: IssuerConfig, clock: Clock | None = None, store: GrantStore | None = None):
        if not is_issuer_url(config.issuer):
            raise ConfigError(f"issuer {config.issuer!r} is not an absolute https URL")
        self.config = config
        self.clock = clock or SystemClock()
        if store is None:
            store = SqliteGrantStore(config.store_path) if config.store_path else MemoryGrantStore()
        self.store = store
        self.clients = {c.client_id: c for c in config.clients}
        if len(self.clients) != len(config.clients):
            raise ConfigError("duplicate client_id")
        self.users = {u.username: u for u in config.users}
        if len(self.users) != len(config.users):
            raise ConfigError("duplicate username")
        self._by_subject = {u.subject: u for u in config.users}
        self._active = config.keys[0]
        self._retired: list[tuple[KeyPair, int]] = [(k, self.clock.now()) for k in config.keys[1:]]
        self._key_lock = threading.Lock()
        self._dummy_secret = secrets.token_urlsafe(16)

    # --- publication ---------------------------------------------------------

    @property
    def issuer(self) -> str:
        return self.config.issuer

    @property
    def base(self) -> str:
        return self.issuer.rstrip("/")

    @property
    def active_key(self) -> KeyPair:
        return self._active

    def metadata(self) -> IssuerMetadata:
        return IssuerMetadata(
            issuer=self.issuer,
            jwks_uri=f"{self.base}/jwks",
            token_endpoint=f"{self.base}/token",
            authorization_endpoint=f"{self.base}/authorize",
            grant_types_supported=tuple(GRANTS.values()),
        )

    def serve_discovery(self) -> dict[str, Any]:
        doc = self.metadata().to_document()
        doc.update(
            response_types_supported=["code"],
            subject_types_supported=["public"],
            id_token_signing_alg_values_supported=["RS256", "ES256"],
            token_endpoint_auth_methods_supported=["client_secret_basic", "client_secret_post"],
            claims_supported=["sub", "iss", "aud", "exp", "iat", "nbf", "jti", "wlcg.ver",
                              "wlcg.groups", "eduperson_assurance", "auth_time", "scope"],
        )
        return doc

    def _retention(self) -> int:
        lt = self.config.lifetimes
        return max(lt.access, lt.id) + self.config.key_retention_grace

    def _live_keys(self) -> list[KeyPair]:
        now = self.clock.now()
        with self._key_lock:
            self._retired = [(k, t) for k, t in self._retired if now < t + self._retention()]
            return [self._active] + [k for k, _ in self._retired]

    def serve_jwks(self) -> dict[str, Any]:
        return {"keys": [k.public().to_jwk() for k in self._live_keys()]}

    def rotate_key(self, new_key: KeyPair) -> None:
        """Make ``new_key`` the signing key; the old one stays published
        until every token it signed has expired."""
        with self._key_lock:
            if new_key.kid == self._active.kid or any(k.kid == new_key.kid for k, _ in self._retired):
                raise ConfigError(f"kid {new_key.kid} already in use")
            self._retired.append((self._active, self.clock.now()))
            self._active = new_key

    # --- helpers -------------------------------------------------------------

    def authenticate_client(self, client_id: str | None, client_secret: str | None) -> ClientRegistration:
        client = self.clients.get(client_id or "")
        expected = client.client_secret if client else self._dummy_secret
        ok = hmac.compare_digest((client_secret or "").encode(), expected.encode())
        if client is None or not ok:
            raise InvalidClient("client authentication failed")
        return client

    def _client_for(self, client_id, client_secret, grant: str) -> ClientRegistration:
        client = self.authenticate_client(client_id, client_secret)
        if grant not in client.allowed_grants:
            raise UnauthorizedClient(f"client {client.client_id} may not use {grant}")
        return client

    def _sign(self, claims: ClaimSet, kind: TokenKind) -> str:
        report = check_profile_shape(claims, kind)
        if not report.conformant:
            raise RuntimeError(f"issuer produced a non-conformant {kind.value}: {report.violations}")
        return encode_and_sign(claims, kind, self._active)

    def _access_token(self, sub, scopes, aud, groups=(), assurance=(), cap_exp=None) -> tuple[str, int]:
        now = self.clock.now()
        exp = now + self.config.lifetimes.access
        if cap_exp is not None:
            exp = min(exp, cap_exp)
        claims = ClaimSet(
            sub=sub,
            iss=self.issuer,
            aud=tuple(aud) or (self.issuer,),
            iat=now,
            nbf=now,
            exp=exp,
            jti=new_jti(),
            wlcg_ver=self.config.profile_version,
            scope=" ".join(scopes) if scopes else None,
            wlcg_groups=tuple(groups) or None,
            eduperson_assurance=tuple(assurance) or None,
        )
        return self._sign(claims, TokenKind.ACCESS), exp - now

    def _id_token(self, user: UserRecord, client: ClientRegistration, auth_time: int, nonce=None) -> str:
        now = self.clock.now()
        profile = {"preferred_username": user.username, **user.profile}
        claims = ClaimSet(
            sub=user.subject,
            iss=self.issuer,
            aud=(client.client_id,),
            iat=now,
            nbf=now,
            exp=now + self.config.lifetimes.id,
            jti=new_jti(),
            wlcg_ver=self.config.profile_version,
            wlcg_groups=user.groups or None,
            eduperson_assurance=user.assurance or None,
            auth_time=auth_time,
            oidc_standard=profile,
            extra={"nonce": nonce} if nonce else {},
        )
        return self._sign(claims, TokenKind.ID)

    def _new_refresh(self, client_id, subject, scopes, auth_time) -> str:
        now = self.clock.now()
        handle = secrets.token_urlsafe(32)
        self.store.save_refresh(
            handle,
            RefreshTokenRecord(
                handle_hash=digest(handle),
                client_id=client_id,
                subject=subject,
                granted_scopes=tuple(scopes),
                issued_at=now,
                expires_at=now + self.config.lifetimes.refresh,
                auth_time=auth_time,
            ),
        )
        return handle

    # --- authorization endpoint ------------------------------------------------

    def authorize_endpoint(self, client_id, redirect_uri, requested_scopes, username, password, nonce=None) -> str:
        client = self.clients.get(client_id or "")
        if client is None:
            raise UnknownClient(f"unknown client {client_id!r}")
        if "authorization_code" not in client.allowed_grants:
            raise UnauthorizedClient(f"client {client_id} may not use authorization_code")
        if redirect_uri not in client.redirect_uris:
            raise RedirectMismatch(f"redirect_uri {redirect_uri!r} is not registered")
        user = self.users.get(username or "")
        if user is None or not check_password(password or "", user.password_hash):
            raise BadCredentials("bad username or password")
        try:
            requested = _dedupe(_scope_list(requested_scopes))
            allowed = _caps(client.allowed_scopes)
            granted = [s for s in requested if not scope_covered(_caps([s]), allowed)]
        except MalformedScopeEntry as exc:
            raise InvalidRequest(str(exc)) from exc
        now = self.clock.now()
        code = secrets.token_urlsafe(32)
        self.store.save_code(
            code,
            AuthorizationCode(client_id, user.subject, tuple(granted), redirect_uri, now,
                              now + self.config.lifetimes.code, nonce),
        )
        return code

    # --- token endpoint grants -------------------------------------------------

    def token_endpoint_code(self, client_id, client_secret, code, redirect_uri=None) -> TokenResponse:
        client = self._client_for(client_id, client_secret, "authorization_code")
        record = self.store.consume_code(code or "")
        if record is None:
            raise InvalidGrant("unknown or already used authorization code")
        if record.client_id != client.client_id:
            raise InvalidGrant("code was issued to another client")
        if self.clock.now() >= record.expires_at:
            raise InvalidGrant("authorization code expired")
        if redirect_uri is not None and redirect_uri != record.redirect_uri:
            raise InvalidGrant("redirect_uri does not match the authorization request")
        user = self._by_subject.get(record.subject)
        if user is None:
            raise InvalidGrant("user no longer exists")
        access, expires_in = self._access_token(
            user.subject, record.scopes, client.default_audiences, user.groups, user.assurance
        )
        return TokenResponse(
            access_token=access,
            expires_in=expires_in,
            id_token=self._id_token(user, client, record.auth_time, record.nonce),
            refresh_token=self._new_refresh(client.client_id, user.subject, record.scopes, record.auth_time),
            scope=" ".join(record.scopes) or None,
        )

    def token_endpoint_client_credentials(self, client_id, client_secret, requested_scopes=None) -> TokenResponse:
        client = self._client_for(client_id, client_secret, "client_credentials")
        requested = _dedupe(_scope_list(requested_scopes)) or sorted(client.allowed_scopes)
        try:
            missing = scope_covered(_caps(requested), _caps(client.allowed_scopes))
        except MalformedScopeEntry as exc:
            raise InvalidRequest(str(exc)) from exc
        if missing:
            raise ScopeNotAllowed(f"scopes not allowed for {client.client_id}: {[str(m) for m in missing]}")
        access, expires_in = self._access_token(client.client_id, requested, client.default_audiences)
        return TokenResponse(access_token=access, expires_in=expires_in, scope=" ".join(requested) or None)

    def token_endpoint_refresh(self, client_id, client_secret, refresh_handle, narrowed_scopes=None) -> TokenResponse:
        client = self._client_for(client_id, client_secret, "refresh_token")
        record = self.store.get_refresh(refresh_handle or "")
        now = self.clock.now()
        if record is None or record.revoked or now >= record.expires_at:
            raise InvalidGrant("refresh token is unknown, revoked or expired")
        if record.client_id != client.client_id:
            raise InvalidGrant("refresh token was issued to another client")
        if narrowed_scopes is None:
            scopes = list(record.granted_scopes)
        else:
            scopes = _dedupe(_scope_list(narrowed_scopes))
            try:
                missing = scope_covered(_caps(scopes), _caps(record.granted_scopes))
            except MalformedScopeEntry as exc:
                raise InvalidRequest(str(exc)) from exc
            if missing:
                raise ScopeBroadening(f"scopes exceed the original grant: {[str(m) for m in missing]}")
        user = self._by_subject.get(record.subject)
        if user is None:
            raise InvalidGrant("user no longer exists")
        # rotate-on-use: only the caller that wins the revocation proceeds
        if not self.store.revoke_refresh(refresh_handle):
            raise InvalidGrant("refresh token was already used")
        access, expires_in = self._access_token(
            user.subject, scopes, client.default_audiences, user.groups, user.assurance
        )
        new_handle = self._new_refresh(client.client_id, user.subject, record.granted_scopes, record.auth_time)
        return TokenResponse(access_token=access, expires_in=expires_in, refresh_token=new_handle,
                             scope=" ".join(scopes) or None)

    def verify_own_token(self, token: str) -> ClaimSet:
        """Signature, issuer and lifetime check for a token this issuer signed."""
        try:
            header, claims = decode(token)
            keys = {k.kid: k for k in self._live_keys()}
            key = keys.get(header.get("kid"))
            if key is None or not verify_signature(token, key.public()):
                raise InvalidSubjectToken("subject token signature is not valid")
        except (Malformed, UnsupportedAlgorithm, KidMismatch) as exc:
            raise InvalidSubjectToken(f"subject token rejected: {exc}") from exc
        ctx = ValidationContext(
            expected_audiences=claims.aud if isinstance(claims.aud, tuple) else (),
            accepted_issuers=(self.issuer,),
            clock=self.clock,
            skew_tolerance=0,
        )
        report = validate_claims(claims, ctx)
        if not report.accepted:
            raise InvalidSubjectToken(f"subject token rejected: {report}")
        if not check_profile_shape(claims, TokenKind.ACCESS).conformant:
            raise InvalidSubjectToken("subject token is not an access token")
        return claims

    def token_endpoint_exchange(
        self, client_id, client_secret, subject_token, requested_audience, requested_scopes=None
    ) -> TokenResponse:
        client = self._client_for(client_id, client_secret, "token_exchange")
        parent = self.verify_own_token(subject_token or "")
        if requested_audience not in self.config.exchangeable_audiences:
            raise AudienceNotPermitted(f"audience {requested_audience!r} is not exchangeable")
        parent_scopes = _scope_list(parent.scope)
        try:
            parent_caps = _caps(parent_scopes)
            allowed_caps = _caps(client.allowed_scopes)
            if requested_scopes is None:
                scopes = [s for s in parent_scopes if not scope_covered(_caps([s]), allowed_caps)]
            else:
                scopes = _dedupe(_scope_list(requested_scopes))
                broader = scope_covered(_caps(scopes), parent_caps)
                if broader:
                    raise ScopeBroadening(
                        f"scopes exceed the subject token: {[str(m) for m in broader]}"
                    )
                not_allowed = scope_covered(_caps(scopes), allowed_caps)
                if not_allowed:
                    raise ScopeNotAllowed(
                        f"scopes not allowed for {client.client_id}: {[str(m) for m in not_allowed]}"
                    )
        except MalformedScopeEntry as exc:
            raise InvalidRequest(str(exc)) from exc
        access, expires_in = self._access_token(
            parent.sub,
            scopes,
            (requested_audience,),
            parent.wlcg_groups or (),
            parent.eduperson_assurance or (),
            cap_exp=parent.exp,
        )
        log.info(
            "token exchange: sub=%s actor=%s audience=%s parent_jti=%s parent_aud=%s",
            parent.sub, client.client_id, requested_audience, parent.jti, list(parent.aud or ()),
        )
        return TokenResponse(access_token=access, expires_in=expires_in, scope=" ".join(scopes) or None)


_LOGIN_FORM = """<!doctype html>
<html><body><h1>Sign in</h1>
<form method="post" action="{action}">
{hidden}
<label>Username <input name="username"></label>
<label>Password <input name="password" type="password"></label>
<button type="submit">Sign in</button>
</form></body></html>
"""


class IssuerApp:
    """HTTP front end for a :class:`TokenIssuer`."""

    def __init__(self, issuer: TokenIssuer):
        self.issuer = issuer
        self.base_path = urlsplit(issuer.issuer).path.rstrip("/")

    def handle(self, request: Request) -> Response:
        path = request.path
        bp = self.base_path
        try:
            if request.method == "GET" and path in (bp + OIDC_WELL_KNOWN, OAUTH_WELL_KNOWN + bp):
                return Response.json(self.issuer.serve_discovery())
            if request.method == "GET" and path == bp + "/jwks":
                return Response.json(self.issuer.serve_jwks(), headers={"Cache-Control": "max-age=300"})
            if path == bp + "/authorize":
                if request.method == "GET":
                    return self._login_form(request)
                if request.method == "POST":
                    return self._authorize(request)
                return Response.text("method not allowed", 405)
            if path == bp + "/token":
                if request.method != "POST":
                    return Response.text("method not allowed", 405)
                return Response.json(self._token(request).to_dict())
        except OAuthError as exc:
            log.info("%s: %s", type(exc).__name__, exc)
            return exc.to_response()
        return Response.text("not found", 404)

    def _login_form(self, request: Request) -> Response:
        hidden = "\n".join(
            f'<input type="hidden" name="{html.escape(k)}" value="{html.escape(v)}">'
            for k, v in request.query.items()
            if k in ("client_id", "redirect_uri", "scope", "state", "nonce")
        )
        page = _LOGIN_FORM.format(action=html.escape(self.base_path + "/authorize"), hidden=hidden)
        return Response(200, {"Content-Type": "text/html; charset=utf-8"}, page.encode())

    def _authorize(self, request: Request) -> Response:
        form = request.form()
        code = self.issuer.authorize_endpoint(
            form.get("client_id"),
            form.get("redirect_uri"),
            form.get("scope", ""),
            form.get("username"),
            form.get("password"),
            form.get("nonce") or None,
        )
        params = {"code": code}
        if form.get("state"):
            params["state"] = form["state"]
        sep = "&" if "?" in form["redirect_uri"] else "?"
        return Response(302, {"Location": form["redirect_uri"] + sep + urlencode(params)})

    def _token(self, request: Request) -> TokenResponse:
        form = request.form()
        basic = request.basic_auth()
        if basic:
            client_id, client_secret = basic
        else:
            client_id, client_secret = form.get("client_id"), form.get("client_secret")
        grant = form.get("grant_type")
        iss = self.issuer
        if grant == "authorization_code":
            return iss.token_endpoint_code(client_id, client_secret, form.get("code"), form.get("redirect_uri"))
        if grant == "client_credentials":
            return iss.token_endpoint_client_credentials(client_id, client_secret, form.get("scope"))
        if grant == "refresh_token":
            return iss.token_endpoint_refresh(client_id, client_secret, form.get("refresh_token"), form.get("scope") or None)
        if grant == TOKEN_EXCHANGE_GRANT:
            token_type = form.get("subject_token_type", ACCESS_TOKEN_TYPE)
            if token_type != ACCESS_TOKEN_TYPE:
                raise InvalidRequest(f"unsupported subject_token_type {token_type}")
            return iss.token_endpoint_exchange(
                client_id, client_secret, form.get("subject_token"), form.get("audience"),
                form.get("scope") or None,
            )
        raise UnsupportedGrantType(f"grant_type {grant!r} is not supported")
