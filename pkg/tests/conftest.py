import json
import threading
import time

import pytest

from wlcgtoken.clock import VirtualClock
from wlcgtoken.httpio import Response
from wlcgtoken.keys import KeyPair, b64url_encode
from wlcgtoken.tokens import ClaimSet

ISSUER = "https://issuer.test"
STORAGE = "https://storage.test"
T0 = 1_700_000_000


@pytest.fixture(scope="session")
def rsa_key():
    return KeyPair.generate("RS256")


@pytest.fixture(scope="session")
def rsa_key2():
    return KeyPair.generate("RS256")


@pytest.fixture(scope="session")
def ec_key():
    return KeyPair.generate("ES256")


@pytest.fixture
def clock():
    return VirtualClock(T0)


def make_claims(**overrides):
    base = dict(
        sub="u1",
        iss=ISSUER,
        aud=(STORAGE,),
        iat=T0,
        exp=T0 + 1200,
        jti="j1",
        wlcg_ver="1.0",
    )
    base.update(overrides)
    return ClaimSet(**base)


def sign_raw(payload: dict, key: KeyPair, header: dict | None = None) -> str:
    """Sign an arbitrary payload, bypassing claim invariants."""
    header = header or {"alg": key.algorithm, "kid": key.kid, "typ": "JWT"}
    signing_input = ".".join(
        b64url_encode(json.dumps(part).encode()) for part in (header, payload)
    )
    return signing_input + "." + b64url_encode(key.sign(signing_input.encode()))


def discovery_doc(issuer=ISSUER, jwks_uri=None):
    return {
        "issuer": issuer,
        "jwks_uri": jwks_uri or issuer.rstrip("/") + "/jwks",
        "token_endpoint": issuer.rstrip("/") + "/token",
        "grant_types_supported": ["authorization_code"],
    }


class ScriptedTransport:
    """In-memory HTTP fake: url -> JSON doc, status code, or callable."""

    def __init__(self, routes=None, delay=0.0):
        self.routes = dict(routes or {})
        self.delay = delay
        self.calls = []
        self._lock = threading.Lock()

    def count(self, url):
        with self._lock:
            return self.calls.count(url)

    def fetch(self, url):
        return self.request("GET", url)

    def request(self, method, url, headers=None, body=b""):
        with self._lock:
            self.calls.append(url)
        if self.delay:
            time.sleep(self.delay)
        route = self.routes.get(url)
        if callable(route):
            route = route()
        if route is None:
            return Response(404, {}, b"not found")
        if isinstance(route, Exception):
            raise route
        if isinstance(route, int):
            return Response(route, {}, b"")
        return Response(200, {"Content-Type": "application/json"}, json.dumps(route).encode())


def issuer_routes(keys, issuer=ISSUER):
    return {
        issuer.rstrip("/") + "/.well-known/openid-configuration": discovery_doc(issuer),
        issuer.rstrip("/") + "/jwks": {"keys": [k.public().to_jwk() for k in keys]},
    }


# --- acceptance reporting ---------------------------------------------------------

ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(line)
