import threading

import pytest

from conftest import ISSUER, T0, ScriptedTransport, discovery_doc, issuer_routes
from wlcgtoken.clock import VirtualClock
from wlcgtoken.errors import (
    DuplicateIssuer,
    FetchFailed,
    IssuerMismatch,
    MalformedMetadata,
    UnknownIssuer,
    UnknownKid,
)
from wlcgtoken.trust import (
    IssuerMetadata,
    IssuerTrustAnchor,
    TrustAnchorCache,
    discover,
    discovery_urls,
    parse_jwks,
)

OIDC_URL = ISSUER + "/.well-known/openid-configuration"
JWKS_URL = ISSUER + "/jwks"


def test_discovery_urls_for_path_issuer():
    oidc, oauth = discovery_urls("https://wlcg.cloud.cnaf.infn.it/")
    assert oidc == "https://wlcg.cloud.cnaf.infn.it/.well-known/openid-configuration"
    assert oauth == "https://wlcg.cloud.cnaf.infn.it/.well-known/oauth-authorization-server"
    _, oauth = discovery_urls("https://idp.example/realms/wlcg")
    assert oauth == "https://idp.example/.well-known/oauth-authorization-server/realms/wlcg"


def test_discover_trailing_slash_issuer():
    issuer = "https://wlcg.cloud.cnaf.infn.it/"
    t = ScriptedTransport({discovery_urls(issuer)[0]: discovery_doc(issuer, jwks_uri=issuer + "jwk")})
    md = discover(issuer, t)
    assert md.issuer == issuer and md.jwks_uri == issuer + "jwk"


def test_issuer_mismatch():
    t = ScriptedTransport({OIDC_URL: discovery_doc("https://other.test")})
    with pytest.raises(IssuerMismatch):
        discover(ISSUER, t)


def test_both_paths_404():
    with pytest.raises(FetchFailed):
        discover(ISSUER, ScriptedTransport({}))


def test_rfc8414_fallback():
    issuer = "https://idp.example/realms/wlcg"
    t = ScriptedTransport({discovery_urls(issuer)[1]: discovery_doc(issuer)})
    assert discover(issuer, t).issuer == issuer
    assert t.calls == list(discovery_urls(issuer))


def test_server_error_is_not_fallback():
    t = ScriptedTransport({OIDC_URL: 500, discovery_urls(ISSUER)[1]: discovery_doc()})
    with pytest.raises(FetchFailed):
        discover(ISSUER, t)


def test_http_issuer_rejected_unless_loopback():
    with pytest.raises(FetchFailed):
        discover("http://issuer.test", ScriptedTransport({}))


def test_malformed_metadata():
    with pytest.raises(MalformedMetadata):
        IssuerMetadata.from_document({"issuer": ISSUER})
    with pytest.raises(MalformedMetadata):
        IssuerMetadata.from_document([])


def test_metadata_round_trip():
    md = IssuerMetadata.from_document(discovery_doc())
    assert IssuerMetadata.from_document(md.to_document()) == md


def test_parse_jwks_skips_encryption_and_unknown_keys(rsa_key, ec_key):
    enc = dict(rsa_key.public().to_jwk(), use="enc", kid="enc")
    hs = {"kty": "oct", "alg": "HS256", "kid": "h", "k": "AAAA"}
    keys = parse_jwks({"keys": [enc, hs, ec_key.public().to_jwk()]})
    assert [k.kid for k in keys] == [ec_key.kid]


def test_parse_jwks_duplicate_kid(rsa_key):
    jwk = rsa_key.public().to_jwk()
    with pytest.raises(MalformedMetadata):
        parse_jwks({"keys": [jwk, jwk]})


def test_cache_fetches_once_then_serves_from_memory(rsa_key, clock):
    t = ScriptedTransport(issuer_routes([rsa_key]))
    cache = TrustAnchorCache(t, [ISSUER], clock)
    for _ in range(5):
        assert cache.get_key(ISSUER, rsa_key.kid).kid == rsa_key.kid
    assert t.count(OIDC_URL) == 1 and t.count(JWKS_URL) == 1


def test_ttl_expiry_refetches(rsa_key):
    clock = VirtualClock(T0)
    t = ScriptedTransport(issuer_routes([rsa_key]))
    cache = TrustAnchorCache(t, [ISSUER], clock, ttl=100)
    cache.get_key(ISSUER, rsa_key.kid)
    clock.advance(99)
    cache.get_key(ISSUER, rsa_key.kid)
    assert len(t.calls) == 2
    clock.advance(1)
    cache.get_key(ISSUER, rsa_key.kid)
    assert t.count(OIDC_URL) == 2 and t.count(JWKS_URL) == 2


def test_rotation_picked_up_by_forced_refresh(rsa_key, rsa_key2, clock):
    routes = issuer_routes([rsa_key])
    t = ScriptedTransport(routes)
    cache = TrustAnchorCache(t, [ISSUER], clock)
    cache.get_key(ISSUER, rsa_key.kid)
    t.routes.update(issuer_routes([rsa_key, rsa_key2]))
    assert cache.get_key(ISSUER, rsa_key2.kid).kid == rsa_key2.kid
    # forced refresh reloads only the key set
    assert t.count(OIDC_URL) == 1 and t.count(JWKS_URL) == 2


def test_unknown_kid_forces_exactly_one_refresh(rsa_key, clock):
    t = ScriptedTransport(issuer_routes([rsa_key]))
    cache = TrustAnchorCache(t, [ISSUER], clock)
    cache.get_key(ISSUER, rsa_key.kid)
    for _ in range(3):
        with pytest.raises(UnknownKid):
            cache.get_key(ISSUER, "nope")
    assert t.count(JWKS_URL) == 2


def test_forced_refresh_keeps_metadata_age(rsa_key, rsa_key2):
    clock = VirtualClock(T0)
    t = ScriptedTransport(issuer_routes([rsa_key]))
    cache = TrustAnchorCache(t, [ISSUER], clock, ttl=100)
    cache.get_key(ISSUER, rsa_key.kid)
    clock.advance(50)
    t.routes.update(issuer_routes([rsa_key, rsa_key2]))
    cache.get_key(ISSUER, rsa_key2.kid)
    assert cache.anchor(ISSUER).fetched_at == T0


def test_unknown_issuer(rsa_key, clock):
    t = ScriptedTransport(issuer_routes([rsa_key]))
    cache = TrustAnchorCache(t, [ISSUER], clock)
    with pytest.raises(UnknownIssuer):
        cache.get_key("https://evil.test", rsa_key.kid)
    assert t.calls == []


def test_fetch_failures_are_not_cached(rsa_key, clock):
    t = ScriptedTransport({OIDC_URL: ConnectionError("down")})
    cache = TrustAnchorCache(t, [ISSUER], clock)
    with pytest.raises(FetchFailed):
        cache.get_key(ISSUER, rsa_key.kid)
    t.routes = issuer_routes([rsa_key])
    assert cache.get_key(ISSUER, rsa_key.kid).kid == rsa_key.kid


def test_failed_forced_refresh_can_be_retried(rsa_key, rsa_key2, clock):
    t = ScriptedTransport(issuer_routes([rsa_key]))
    cache = TrustAnchorCache(t, [ISSUER], clock)
    cache.get_key(ISSUER, rsa_key.kid)
    t.routes[JWKS_URL] = 503
    with pytest.raises(FetchFailed):
        cache.get_key(ISSUER, rsa_key2.kid)
    t.routes.update(issuer_routes([rsa_key, rsa_key2]))
    assert cache.get_key(ISSUER, rsa_key2.kid).kid == rsa_key2.kid


def test_preload_avoids_network(rsa_key, clock):
    md = IssuerMetadata.from_document(discovery_doc())
    t = ScriptedTransport({})
    cache = TrustAnchorCache(t, [], clock)
    cache.preload([IssuerTrustAnchor(md, (rsa_key.public(),), clock.now())])
    assert cache.get_key(ISSUER, rsa_key.kid).kid == rsa_key.kid
    assert t.calls == []
    with pytest.raises(DuplicateIssuer):
        cache.preload([IssuerTrustAnchor(md, (rsa_key.public(),), clock.now())])


def test_preload_rejects_duplicates_in_one_batch(rsa_key, clock):
    md = IssuerMetadata.from_document(discovery_doc())
    a = IssuerTrustAnchor(md, (rsa_key.public(),), clock.now())
    cache = TrustAnchorCache(ScriptedTransport({}), [], clock)
    with pytest.raises(DuplicateIssuer):
        cache.preload([a, a])
    assert cache.anchor(ISSUER) is None


def test_single_flight_under_concurrency(rsa_key, clock):
    t = ScriptedTransport(issuer_routes([rsa_key]), delay=0.05)
    cache = TrustAnchorCache(t, [ISSUER], clock)
    barrier = threading.Barrier(32)
    errors = []

    def worker():
        barrier.wait()
        try:
            cache.get_key(ISSUER, rsa_key.kid)
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=worker) for _ in range(32)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert not errors
    assert t.count(OIDC_URL) == 1 and t.count(JWKS_URL) == 1
