"""OAuth2-protected storage resource.

:class:`ResourceGuard` runs the bearer-token pipeline for one request:

    extract -> decode -> resolve_key -> verify_signature
            -> validate_claims -> check_shape -> authorize

The first failing stage decides the outcome. Token problems give 401 with a
``Bearer`` challenge, authorization denials give 403. :class:`StorageApp`
puts a small path-structured store behind the guard.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping

from .authz import (
    AuthzDecision,
    AuthzPolicy,
    GroupName,
    ResourceRequest,
    authorize,
    parse_scope,
    path_segments,
)
from .clock import Clock, SystemClock
from .errors import (
    ConfigError,
    InvalidGroupName,
    InvalidPath,
    KidMismatch,
    Malformed,
    MalformedScopeEntry,
    TrustError,
    UnsupportedAlgorithm,
)
from .httpio import Request, Response
from .tokens import (
    ANY_AUDIENCE,
    DEFAULT_SKEW,
    ClaimSet,
    TokenKind,
    ValidationContext,
    check_profile_shape,
    decode,
    validate_claims,
    verify_signature,
)
from .trust import DEFAULT_TTL, TrustAnchorCache

log = logging.getLogger(__name__)

STAGES = (
    "extract",
    "decode",
    "resolve_key",
    "verify_signature",
    "validate_claims",
    "check_shape",
    "authorize",
)

DEFAULT_OPERATION_MAP = {
    "GET": "storage.read",
    "HEAD": "storage.read",
    "PUT": "storage.write",
    "MKCOL": "storage.create",
}


class GuardStatus(str, Enum):
    ALLOWED = "Allowed"
    UNAUTHENTICATED = "Unauthenticated"
    FORBIDDEN = "Forbidden"


_HTTP_STATUS = {GuardStatus.ALLOWED: 200, GuardStatus.UNAUTHENTICATED: 401, GuardStatus.FORBIDDEN: 403}


@dataclass(frozen=True)
class GuardOutcome:
    status: GuardStatus
    decision: AuthzDecision | None = None
    challenge: str | None = None
    description: str | None = None
    claims: ClaimSet | None = None

    def __post_init__(self):
        if self.status is GuardStatus.UNAUTHENTICATED and not self.challenge:
            raise ValueError("an Unauthenticated outcome needs a challenge")

    @property
    def http_status(self) -> int:
        return _HTTP_STATUS[self.status]


@dataclass(frozen=True)
class GuardConfig:
    accepted_issuers: tuple[str, ...]
    expected_audiences: tuple[str, ...]
    policy: AuthzPolicy = field(default_factory=AuthzPolicy)
    skew_tolerance: int = DEFAULT_SKEW
    operation_map: Mapping[str, str] = field(default_factory=lambda: dict(DEFAULT_OPERATION_MAP))
    honor_wildcard_audience: bool = True
    wildcard_audience: str = ANY_AUDIENCE
    replay_cache_size: int = 0
    realm: str = "storage"

    def __post_init__(self):
        object.__setattr__(self, "accepted_issuers", tuple(self.accepted_issuers))
        object.__setattr__(self, "expected_audiences", tuple(self.expected_audiences))
        object.__setattr__(self, "operation_map", {k.upper(): v for k, v in self.operation_map.items()})
        for op in self.operation_map.values():
            ResourceRequest(op, "/")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "GuardConfig":
        try:
            return cls(
                accepted_issuers=tuple(doc["accepted_issuers"]),
                expected_audiences=tuple(doc["expected_audiences"]),
                policy=AuthzPolicy.from_dict(doc.get("policy", {})),
                skew_tolerance=int(doc.get("skew_tolerance", DEFAULT_SKEW)),
                operation_map=doc.get("operation_map", DEFAULT_OPERATION_MAP),
                honor_wildcard_audience=bool(doc.get("honor_wildcard_audience", True)),
                wildcard_audience=doc.get("wildcard_audience", ANY_AUDIENCE),
                replay_cache_size=int(doc.get("replay_cache_size", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad resource configuration: {exc}") from exc


class ReplayCache:
    """Bounded LRU of (jti, exp) pairs; a repeated live jti is a replay."""

    def __init__(self, size: int):
        self.size = size
        self._seen: OrderedDict[str, int] = OrderedDict()
        self._lock = threading.Lock()

    def seen_before(self, jti: str, exp: int, now: int) -> bool:
        with self._lock:
            old = self._seen.get(jti)
            if old is not None and now < old:
                return True
            self._seen[jti] = exp
            self._seen.move_to_end(jti)
            while len(self._seen) > self.size:
                self._seen.popitem(last=False)
            return False


def _challenge(error: str | None = None, description: str | None = None) -> str:
    if error is None:
        return "Bearer"
    desc = (description or "").replace("\\", "").replace('"', "'")
    return f'Bearer error="{error}", error_description="{desc}"'


class ResourceGuard:
    def __init__(
        self,
        config: GuardConfig,
        trust: TrustAnchorCache,
        clock: Clock | None = None,
        observer: Callable[[str], None] | None = None,
    ):
        self.config = config
        self.trust = trust
        self.clock = clock or SystemClock()
        self.observer = observer
        self.replay = ReplayCache(config.replay_cache_size) if config.replay_cache_size else None
        self.ctx = ValidationContext(
            expected_audiences=config.expected_audiences,
            accepted_issuers=config.accepted_issuers,
            clock=self.clock,
            skew_tolerance=config.skew_tolerance,
            required_kind=TokenKind.ACCESS,
            wildcard_audience=config.wildcard_audience if config.honor_wildcard_audience else None,
        )

    def _enter(self, stage: str) -> None:
        if self.observer is not None:
            self.observer(stage)

    def _unauthenticated(self, description: str, claims=None) -> GuardOutcome:
        log.info("401 invalid_token: %s", description)
        return GuardOutcome(
            GuardStatus.UNAUTHENTICATED,
            challenge=_challenge("invalid_token", description),
            description=description,
            claims=claims,
        )

    def guard(self, method: str, path: str, authorization: str | None) -> GuardOutcome:
        self._enter("extract")
        scheme, _, token = (authorization or "").partition(" ")
        if scheme.lower() != "bearer":
            return GuardOutcome(
                GuardStatus.UNAUTHENTICATED, challenge=_challenge(), description="no bearer token"
            )
        token = token.strip()

        self._enter("decode")
        try:
            header, claims = decode(token)
        except Malformed as exc:
            return self._unauthenticated(f"malformed token: {exc}")
        kid = header.get("kid")
        if not isinstance(kid, str) or not isinstance(claims.iss, str):
            return self._unauthenticated("token lacks kid or iss")

        self._enter("resolve_key")
        try:
            key = self.trust.get_key(claims.iss, kid)
        except TrustError as exc:
            return self._unauthenticated(f"{type(exc).__name__}: {exc}")

        self._enter("verify_signature")
        try:
            valid = verify_signature(token, key)
        except (UnsupportedAlgorithm, KidMismatch) as exc:
            return self._unauthenticated(f"{type(exc).__name__}: {exc}")
        if not valid:
            return self._unauthenticated("signature verification failed")

        self._enter("validate_claims")
        report = validate_claims(claims, self.ctx)
        if not report.accepted:
            return self._unauthenticated(str(report), claims)
        if self.replay is not None and self.replay.seen_before(claims.jti, claims.exp, self.clock.now()):
            return self._unauthenticated("token replayed", claims)

        self._enter("check_shape")
        shape = check_profile_shape(claims, TokenKind.ACCESS)
        if not shape.conformant:
            return self._unauthenticated(
                "not an access token: " + "; ".join(map(str, shape.violations)), claims
            )
        try:
            if claims.scope is not None:
                parse_scope(claims.scope)
            for g in claims.wlcg_groups or ():
                GroupName.parse(g)
        except (MalformedScopeEntry, InvalidGroupName) as exc:
            return self._unauthenticated(f"malformed authorization claims: {exc}", claims)

        self._enter("authorize")
        operation = self.config.operation_map.get(method.upper())
        if operation is None:
            raise ValueError(f"method {method} has no operation mapping")
        try:
            req = ResourceRequest(operation, path)
        except InvalidPath as exc:
            decision = AuthzDecision(False, None, (f"malformed request path: {exc}",))
        else:
            decision = authorize(claims, req, self.config.policy)
        if decision.allowed:
            return GuardOutcome(GuardStatus.ALLOWED, decision=decision, claims=claims)
        return GuardOutcome(
            GuardStatus.FORBIDDEN,
            decision=decision,
            challenge=_challenge("insufficient_scope", f"{operation} on {path} not permitted"),
            description=decision.trace[-1] if decision.trace else "denied",
            claims=claims,
        )


class NotFound(Exception):
    pass


class AlreadyExists(Exception):
    pass


class MemoryTree:
    """In-memory tree of collections and files keyed by segment tuples."""

    def __init__(self):
        self._files: dict[tuple[str, ...], bytes] = {}
        self._collections: set[tuple[str, ...]] = {()}
        self._lock = threading.Lock()

    def _ensure_parents(self, segs):
        for i in range(len(segs)):
            self._collections.add(segs[:i])

    def read(self, path: str) -> bytes | list[str]:
        segs = path_segments(path)
        with self._lock:
            if segs in self._files:
                return self._files[segs]
            if segs in self._collections:
                children = {p[len(segs)] for p in list(self._files) + list(self._collections)
                            if len(p) > len(segs) and p[: len(segs)] == segs}
                return sorted(children)
        raise NotFound(path)

    def write(self, path: str, data: bytes) -> None:
        segs = path_segments(path)
        with self._lock:
            if segs in self._collections:
                raise AlreadyExists(path)
            self._ensure_parents(segs)
            self._files[segs] = bytes(data)

    def create(self, path: str) -> None:
        segs = path_segments(path)
        with self._lock:
            if segs in self._collections or segs in self._files:
                raise AlreadyExists(path)
            self._ensure_parents(segs)
            self._collections.add(segs)


class DirectoryTree:
    """The same interface backed by a real directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _locate(self, path: str) -> Path:
        return self.root.joinpath(*path_segments(path))

    def read(self, path):
        target = self._locate(path)
        if target.is_file():
            return target.read_bytes()
        if target.is_dir():
            return sorted(p.name for p in target.iterdir())
        raise NotFound(path)

    def write(self, path, data):
        target = self._locate(path)
        with self._lock:
            if target.is_dir():
                raise AlreadyExists(path)
            target.parent.mkdir(parents=True, exist_ok=True)
            tmp = target.with_name(target.name + ".partial")
            tmp.write_bytes(data)
            tmp.replace(target)

    def create(self, path):
        target = self._locate(path)
        with self._lock:
            if target.exists():
                raise AlreadyExists(path)
            target.mkdir(parents=True)


class StorageApp:
    """``GET``/``PUT``/``MKCOL`` over ``<mount>/<path>``, behind a guard."""

    def __init__(self, guard: ResourceGuard, tree=None, mount: str = "/storage"):
        self.guard = guard
        self.tree = tree if tree is not None else MemoryTree()
        self.mount = mount.rstrip("/")
        self.served = 0

    def handle(self, request: Request) -> Response:
        if request.path != self.mount and not request.path.startswith(self.mount + "/"):
            return Response.text("not found", 404)
        rel = request.path[len(self.mount):] or "/"
        method = request.method
        if method not in self.guard.config.operation_map:
            return Response.text("method not allowed", 405)
        outcome = self.guard.guard(method, rel, request.header("authorization"))
        if outcome.status is GuardStatus.UNAUTHENTICATED:
            doc = {"error": "invalid_token", "error_description": outcome.description}
            return Response.json(doc, 401, {"WWW-Authenticate": outcome.challenge})
        if outcome.status is GuardStatus.FORBIDDEN:
            doc = {
                "error": "insufficient_scope",
                "error_description": outcome.description,
                "trace": list(outcome.decision.trace) if outcome.decision else [],
            }
            return Response.json(doc, 403, {"WWW-Authenticate": outcome.challenge})
        self.served += 1
        operation = self.guard.config.operation_map[method]
        try:
            if operation == "storage.read":
                data = self.tree.read(rel)
                if isinstance(data, list):
                    return Response.json({"path": rel, "children": data})
                return Response(200, {"Content-Type": "application/octet-stream"},
                                b"" if method == "HEAD" else data)
            if operation == "storage.write":
                self.tree.write(rel, request.body)
                return Response.json({"path": rel, "size": len(request.body)}, 201)
            if operation == "storage.create":
                self.tree.create(rel)
                return Response.json({"path": rel}, 201)
        except NotFound:
            return Response.json({"error": "not_found", "path": rel}, 404)
        except AlreadyExists:
            return Response.json({"error": "conflict", "path": rel}, 405)
        return Response.text("method not allowed", 405)


@dataclass
class ResourceConfig:
    guard: GuardConfig
    trust_ttl: int = DEFAULT_TTL
    allow_http: bool = False
    listen: str = "127.0.0.1:8081"
    storage_root: str | None = None
    mount: str = "/storage"

    @classmethod
    def load(cls, path: str | Path) -> "ResourceConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        root = doc.get("storage_root")
        return cls(
            guard=GuardConfig.from_dict(doc),
            trust_ttl=int(doc.get("trust_ttl", DEFAULT_TTL)),
            allow_http=bool(doc.get("allow_http", False)),
            listen=doc.get("listen", "127.0.0.1:8081"),
            storage_root=str(path.parent / root) if root else None,
            mount=doc.get("mount", "/storage"),
        )

    def build(self, transport, clock: Clock | None = None) -> StorageApp:
        clock = clock or SystemClock()
        trust = TrustAnchorCache(
            transport, self.guard.accepted_issuers, clock, self.trust_ttl, self.allow_http
        )
        tree = DirectoryTree(self.storage_root) if self.storage_root else MemoryTree()
        return StorageApp(ResourceGuard(self.guard, trust, clock), tree, self.mount)
