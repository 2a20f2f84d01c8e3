"""Issuer discovery and verification-key caching.

A :class:`TrustAnchorCache` resolves ``(issuer, kid)`` to a verification key.
Fresh anchors are served from memory; stale or missing ones are refreshed
with one discovery fetch plus one JWKS fetch. Concurrent misses for the same
issuer coalesce behind a per-issuer lock, so only one of them hits the
network.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping
from urllib.parse import urlsplit

from .clock import Clock, SystemClock
from .errors import (
    DuplicateIssuer,
    FetchFailed,
    IssuerMismatch,
    MalformedMetadata,
    UnknownIssuer,
    UnknownKid,
    UnsupportedAlgorithm,
)
from .httpio import HttpTransport
from .keys import VerificationKey
from .tokens import is_issuer_url

log = logging.getLogger(__name__)

DEFAULT_TTL = 6 * 3600

OIDC_WELL_KNOWN = "/.well-known/openid-configuration"
OAUTH_WELL_KNOWN = "/.well-known/oauth-authorization-server"


@dataclass(frozen=True)
class IssuerMetadata:
    issuer: str
    jwks_uri: str
    token_endpoint: str
    authorization_endpoint: str | None = None
    grant_types_supported: tuple[str, ...] = ()

    @classmethod
    def from_document(cls, doc: Any) -> "IssuerMetadata":
        if not isinstance(doc, dict):
            raise MalformedMetadata("metadata document is not a JSON object")
        for name in ("issuer", "jwks_uri", "token_endpoint"):
            if not isinstance(doc.get(name), str) or not doc[name]:
                raise MalformedMetadata(f"metadata lacks {name}")
        grants = doc.get("grant_types_supported", [])
        if not isinstance(grants, list) or not all(isinstance(g, str) for g in grants):
            raise MalformedMetadata("grant_types_supported must be a list of strings")
        return cls(
            issuer=doc["issuer"],
            jwks_uri=doc["jwks_uri"],
            token_endpoint=doc["token_endpoint"],
            authorization_endpoint=doc.get("authorization_endpoint"),
            grant_types_supported=tuple(grants),
        )

    def to_document(self) -> dict[str, Any]:
        doc = {
            "issuer": self.issuer,
            "jwks_uri": self.jwks_uri,
            "token_endpoint": self.token_endpoint,
            "grant_types_supported": list(self.grant_types_supported),
        }
        if self.authorization_endpoint:
            doc["authorization_endpoint"] = self.authorization_endpoint
        return doc


@dataclass(frozen=True)
class IssuerTrustAnchor:
    metadata: IssuerMetadata
    keys: tuple[VerificationKey, ...]
    fetched_at: int
    ttl: int = DEFAULT_TTL
    by_kid: Mapping[str, VerificationKey] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        keys = tuple(self.keys)
        by_kid = {k.kid: k for k in keys}
        if len(by_kid) != len(keys):
            raise MalformedMetadata(f"duplicate kid in key set of {self.metadata.issuer}")
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "by_kid", by_kid)

    @property
    def issuer(self) -> str:
        return self.metadata.issuer

    def fresh(self, now: int) -> bool:
        return now < self.fetched_at + self.ttl


def parse_jwks(doc: Any) -> tuple[VerificationKey, ...]:
    """Parse a JWKS document, skipping keys we cannot or must not use."""
    if not isinstance(doc, dict) or not isinstance(doc.get("keys"), list):
        raise MalformedMetadata("JWKS document has no keys list")
    keys = []
    for jwk in doc["keys"]:
        if not isinstance(jwk, dict) or jwk.get("use", "sig") != "sig":
            continue
        try:
            keys.append(VerificationKey.from_jwk(jwk))
        except UnsupportedAlgorithm as exc:
            log.info("skipping unusable JWK: %s", exc)
        except (KeyError, ValueError) as exc:
            raise MalformedMetadata(f"bad JWK: {exc}") from exc
    if len({k.kid for k in keys}) != len(keys):
        raise MalformedMetadata("duplicate kid in JWKS")
    return tuple(keys)


def discovery_urls(issuer_url: str) -> tuple[str, str]:
    """The OIDC discovery URL and the RFC 8414 path-inserted form."""
    parts = urlsplit(issuer_url)
    path = parts.path.rstrip("/")
    oidc = issuer_url.rstrip("/") + OIDC_WELL_KNOWN
    oauth = f"{parts.scheme}://{parts.netloc}{OAUTH_WELL_KNOWN}{path}"
    return oidc, oauth


def _get_json(transport: HttpTransport, url: str):
    try:
        resp = transport.fetch(url)
    except ConnectionError as exc:
        raise FetchFailed(f"GET {url}: {exc}") from exc
    return resp


def _decode_json(resp, url: str):
    try:
        return json.loads(resp.body)
    except ValueError as exc:
        raise MalformedMetadata(f"{url} did not return JSON") from exc


def discover(issuer_url: str, transport: HttpTransport, allow_http: bool = False) -> IssuerMetadata:
    if not is_issuer_url(issuer_url, allow_http=allow_http):
        raise FetchFailed(f"issuer {issuer_url!r} is not an absolute https URL")
    for url in discovery_urls(issuer_url):
        resp = _get_json(transport, url)
        if resp.status == 404:
            continue
        if resp.status != 200:
            raise FetchFailed(f"GET {url}: HTTP {resp.status}")
        metadata = IssuerMetadata.from_document(_decode_json(resp, url))
        if metadata.issuer != issuer_url:
            raise IssuerMismatch(f"{url} describes {metadata.issuer!r}, expected {issuer_url!r}")
        return metadata
    raise FetchFailed(f"no discovery document found for {issuer_url}")


def fetch_jwks(jwks_uri: str, transport: HttpTransport) -> tuple[VerificationKey, ...]:
    resp = _get_json(transport, jwks_uri)
    if resp.status != 200:
        raise FetchFailed(f"GET {jwks_uri}: HTTP {resp.status}")
    return parse_jwks(_decode_json(resp, jwks_uri))


class TrustAnchorCache:
    def __init__(
        self,
        transport: HttpTransport,
        accepted_issuers: Iterable[str] = (),
        clock: Clock | None = None,
        ttl: int = DEFAULT_TTL,
        allow_http: bool = False,
    ):
        self.transport = transport
        self.accepted_issuers = set(accepted_issuers)
        self.clock = clock or SystemClock()
        self.ttl = ttl
        self.allow_http = allow_http
        self._anchors: dict[str, IssuerTrustAnchor] = {}
        # kids that already triggered a forced refresh since the last ttl refresh
        self._forced: dict[str, set[str]] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _lock_for(self, issuer: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(issuer, threading.Lock())

    def anchor(self, issuer_url: str) -> IssuerTrustAnchor | None:
        return self._anchors.get(issuer_url)

    def preload(self, anchors: Iterable[IssuerTrustAnchor]) -> None:
        anchors = list(anchors)
        seen = set()
        for a in anchors:
            if a.issuer in seen or a.issuer in self._anchors:
                raise DuplicateIssuer(f"issuer {a.issuer} already has an anchor")
            seen.add(a.issuer)
        for a in anchors:
            self._anchors[a.issuer] = a
            self.accepted_issuers.add(a.issuer)

    def _refresh(self, issuer_url: str, previous: IssuerTrustAnchor | None, keys_only: bool) -> IssuerTrustAnchor:
        if keys_only and previous is not None:
            metadata = previous.metadata
        else:
            metadata = discover(issuer_url, self.transport, allow_http=self.allow_http)
        keys = fetch_jwks(metadata.jwks_uri, self.transport)
        fetched_at = self.clock.now()
        if keys_only and previous is not None:
            # a forced key refresh does not extend the metadata lifetime
            fetched_at = previous.fetched_at
        else:
            self._forced.pop(issuer_url, None)
        anchor = IssuerTrustAnchor(metadata, keys, fetched_at, self.ttl)
        self._anchors[issuer_url] = anchor
        log.debug("refreshed trust anchor for %s (%d keys)", issuer_url, len(keys))
        return anchor

    def get_key(self, issuer_url: str, kid: str) -> VerificationKey:
        if issuer_url not in self.accepted_issuers:
            raise UnknownIssuer(f"issuer {issuer_url!r} is not accepted")
        now = self.clock.now()
        anchor = self._anchors.get(issuer_url)
        if anchor is not None and anchor.fresh(now) and kid in anchor.by_kid:
            return anchor.by_kid[kid]

        with self._lock_for(issuer_url):
            # another thread may have refreshed while we waited
            anchor = self._anchors.get(issuer_url)
            now = self.clock.now()
            if anchor is None or not anchor.fresh(now):
                anchor = self._refresh(issuer_url, anchor, keys_only=False)
                if kid in anchor.by_kid:
                    return anchor.by_kid[kid]
                self._forced.setdefault(issuer_url, set()).add(kid)
                raise UnknownKid(f"kid {kid!r} not published by {issuer_url}")
            if kid in anchor.by_kid:
                return anchor.by_kid[kid]
            forced = self._forced.setdefault(issuer_url, set())
            if kid in forced:
                raise UnknownKid(f"kid {kid!r} not published by {issuer_url}")
            anchor = self._refresh(issuer_url, anchor, keys_only=True)
            forced.add(kid)
            if kid in anchor.by_kid:
                return anchor.by_kid[kid]
            raise UnknownKid(f"kid {kid!r} not published by {issuer_url} after refresh")
