import json
import threading
from urllib.parse import parse_qs, urlsplit

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import T0
from wlcgtoken.authz import Capability, scope_covered
from wlcgtoken.clock import VirtualClock
from wlcgtoken.errors import ConfigError
from wlcgtoken.httpio import FORM_HEADERS, LoopbackNetwork, basic_header, form_body
from wlcgtoken.issuer import (
    TOKEN_EXCHANGE_GRANT,
    AudienceNotPermitted,
    BadCredentials,
    ClientRegistration,
    InvalidClient,
    InvalidGrant,
    InvalidSubjectToken,
    IssuerApp,
    IssuerConfig,
    Lifetimes,
    RedirectMismatch,
    ScopeBroadening,
    ScopeNotAllowed,
    TokenIssuer,
    UnauthorizedClient,
    UnknownClient,
    UserRecord,
    check_password,
    hash_password,
)
from wlcgtoken.keys import KeyPair
from wlcgtoken.store import MemoryGrantStore, SqliteGrantStore
from wlcgtoken.tokens import TokenKind, check_profile_shape, decode, verify_signature
from wlcgtoken.trust import TrustAnchorCache

ISS = "https://iam.test"
REDIRECT = "https://app.test/cb"
SCOPES = "openid offline_access storage.read:/data storage.write:/data/out"


def build_config(key, **kw):
    clients = [
        ClientRegistration(
            "web", "web-secret",
            {"authorization_code", "refresh_token"},
            set(SCOPES.split()),
            (REDIRECT,),
            ("https://storage.test",),
        ),
        ClientRegistration("robot", "robot-secret", {"client_credentials"}, {"storage.read:/data"}),
        ClientRegistration("fts", "fts-secret", {"token_exchange"}, {"storage.read:/data", "storage.write:/data"}),
    ]
    users = [
        UserRecord("alice", hash_password("pw", iterations=1000), "sub-alice", ("/wlcg", "/wlcg/xfers"),
                   ("https://refeds.org/assurance/IAP/medium",), {"email": "alice@test"}),
    ]
    return IssuerConfig(ISS, [key], clients, users, exchangeable_audiences=("https://fts.test",), **kw)


@pytest.fixture
def issuer(ec_key, clock):
    return TokenIssuer(build_config(ec_key), clock)


def login(issuer, scopes=SCOPES, nonce=None):
    code = issuer.authorize_endpoint("web", REDIRECT, scopes, "alice", "pw", nonce)
    return issuer.token_endpoint_code("web", "web-secret", code, REDIRECT)


# --- passwords / config ---------------------------------------------------------


def test_password_hashing():
    h = hash_password("secret", iterations=1000)
    assert check_password("secret", h)
    assert not check_password("Secret", h)
    assert not check_password("secret", "garbage")


def test_config_rejects_unknown_grant():
    with pytest.raises(ConfigError):
        ClientRegistration("x", "y", {"implicit"})


def test_config_load(tmp_path, ec_key):
    ec_key.save(tmp_path / "k.json")
    doc = {
        "issuer": ISS,
        "keys": ["k.json"],
        "clients": [{"client_id": "c", "client_secret": "s", "allowed_grants": ["client_credentials"],
                     "allowed_scopes": "storage.read:/"}],
        "users": [{"username": "bob", "password": "pw"}],
        "lifetimes": {"access": 300},
    }
    (tmp_path / "issuer.json").write_text(json.dumps(doc))
    cfg = IssuerConfig.load(tmp_path / "issuer.json")
    assert cfg.keys[0].kid == ec_key.kid
    assert cfg.lifetimes.access == 300 and cfg.lifetimes.id == 600
    assert cfg.users[0].subject == "bob"
    assert check_password("pw", cfg.users[0].password_hash)


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        IssuerConfig.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text(json.dumps({"issuer": ISS, "keys": []}))
    with pytest.raises(ConfigError):
        IssuerConfig.load(tmp_path / "bad.json")


def test_http_issuer_rejected(ec_key):
    cfg = build_config(ec_key)
    cfg.issuer = "http://iam.test"
    with pytest.raises(ConfigError):
        TokenIssuer(cfg)


# --- authorization code -----------------------------------------------------------


def test_authorization_code_flow(issuer, ec_key, clock):
    resp = login(issuer, nonce="n-1")
    h, at = decode(resp.access_token)
    _, idt = decode(resp.id_token)
    assert h["kid"] == ec_key.kid
    assert verify_signature(resp.access_token, ec_key.public())
    assert check_profile_shape(at, TokenKind.ACCESS).conformant
    assert check_profile_shape(idt, TokenKind.ID).conformant
    assert at.sub == idt.sub == "sub-alice"
    assert at.aud == ("https://storage.test",)
    assert at.exp - at.iat == 1200 and idt.exp - idt.iat == 600
    assert idt.aud == ("web",)
    assert idt.auth_time == T0
    assert idt.extra["nonce"] == "n-1"
    assert idt.oidc_standard["email"] == "alice@test"
    assert at.auth_time is None
    assert at.wlcg_groups == ("/wlcg", "/wlcg/xfers")
    assert resp.refresh_token and resp.refresh_token.count(".") == 0


def test_requested_scopes_narrowed_to_client_allowance(issuer):
    resp = login(issuer, "storage.read:/data/x storage.write:/")
    assert resp.scope == "storage.read:/data/x"


def test_code_is_single_use(issuer):
    code = issuer.authorize_endpoint("web", REDIRECT, SCOPES, "alice", "pw")
    issuer.token_endpoint_code("web", "web-secret", code, REDIRECT)
    with pytest.raises(InvalidGrant):
        issuer.token_endpoint_code("web", "web-secret", code, REDIRECT)


def test_code_expiry(issuer, clock):
    code = issuer.authorize_endpoint("web", REDIRECT, SCOPES, "alice", "pw")
    clock.advance(60)
    with pytest.raises(InvalidGrant):
        issuer.token_endpoint_code("web", "web-secret", code, REDIRECT)


def test_authorize_errors(issuer):
    with pytest.raises(UnknownClient):
        issuer.authorize_endpoint("nobody", REDIRECT, SCOPES, "alice", "pw")
    with pytest.raises(RedirectMismatch):
        issuer.authorize_endpoint("web", "https://evil.test/cb", SCOPES, "alice", "pw")
    with pytest.raises(BadCredentials):
        issuer.authorize_endpoint("web", REDIRECT, SCOPES, "alice", "wrong")
    with pytest.raises(UnauthorizedClient):
        issuer.authorize_endpoint("robot", REDIRECT, SCOPES, "alice", "pw")


def test_wrong_client_secret(issuer):
    code = issuer.authorize_endpoint("web", REDIRECT, SCOPES, "alice", "pw")
    with pytest.raises(InvalidClient):
        issuer.token_endpoint_code("web", "nope", code, REDIRECT)


# --- client credentials ---------------------------------------------------------------


def test_client_credentials(issuer):
    resp = issuer.token_endpoint_client_credentials("robot", "robot-secret", "storage.read:/data/sub")
    _, c = decode(resp.access_token)
    assert c.sub == "robot" and c.scope == "storage.read:/data/sub"
    assert resp.refresh_token is None and resp.id_token is None
    assert c.aud == (ISS,)


def test_client_credentials_defaults_and_limits(issuer):
    resp = issuer.token_endpoint_client_credentials("robot", "robot-secret")
    assert resp.scope == "storage.read:/data"
    with pytest.raises(ScopeNotAllowed):
        issuer.token_endpoint_client_credentials("robot", "robot-secret", "storage.write:/data")
    with pytest.raises(UnauthorizedClient):
        issuer.token_endpoint_client_credentials("web", "web-secret")


# --- refresh ----------------------------------------------------------------------------


def test_refresh_rotates(issuer, clock):
    first = login(issuer)
    clock.advance(100)
    second = issuer.token_endpoint_refresh("web", "web-secret", first.refresh_token)
    assert second.refresh_token != first.refresh_token
    _, c = decode(second.access_token)
    assert c.iat == T0 + 100
    with pytest.raises(InvalidGrant):
        issuer.token_endpoint_refresh("web", "web-secret", first.refresh_token)
    issuer.token_endpoint_refresh("web", "web-secret", second.refresh_token)


def test_refresh_narrowing_and_broadening(issuer):
    first = login(issuer)
    narrowed = issuer.token_endpoint_refresh("web", "web-secret", first.refresh_token, "storage.read:/data/x")
    assert narrowed.scope == "storage.read:/data/x"
    # the family keeps the original grant
    full = issuer.token_endpoint_refresh("web", "web-secret", narrowed.refresh_token)
    assert full.scope == SCOPES
    with pytest.raises(ScopeBroadening):
        issuer.token_endpoint_refresh("web", "web-secret", full.refresh_token, "storage.write:/")
    # a rejected broadening does not burn the handle
    issuer.token_endpoint_refresh("web", "web-secret", full.refresh_token)


def test_refresh_expiry(issuer, clock):
    first = login(issuer)
    clock.advance(12 * 3600)
    with pytest.raises(InvalidGrant):
        issuer.token_endpoint_refresh("web", "web-secret", first.refresh_token)


def test_refresh_bound_to_client(issuer, ec_key, clock):
    cfg = build_config(ec_key)
    cfg.clients.append(ClientRegistration("web2", "s2", {"refresh_token"}, set()))
    iss = TokenIssuer(cfg, clock)
    first = login(iss)
    with pytest.raises(InvalidGrant):
        iss.token_endpoint_refresh("web2", "s2", first.refresh_token)


@pytest.mark.parametrize("store_kind", ["memory", "sqlite"])
def test_concurrent_refresh_has_one_winner(ec_key, clock, tmp_path, store_kind):
    store = MemoryGrantStore() if store_kind == "memory" else SqliteGrantStore(tmp_path / "g.db")
    iss = TokenIssuer(build_config(ec_key), clock, store)
    handle = login(iss).refresh_token
    barrier = threading.Barrier(16)
    wins, losses = [], []

    def worker():
        barrier.wait()
        try:
            wins.append(iss.token_endpoint_refresh("web", "web-secret", handle))
        except InvalidGrant:
            losses.append(1)

    threads = [threading.Thread(target=worker) for _ in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(wins) == 1 and len(losses) == 15
    assert store.live_refresh_count("web", "sub-alice", clock.now()) == 1


def test_sqlite_store_persists(ec_key, clock, tmp_path):
    path = tmp_path / "grants.db"
    iss = TokenIssuer(build_config(ec_key, store_path=str(path)), clock)
    handle = login(iss).refresh_token
    again = TokenIssuer(build_config(ec_key, store_path=str(path)), clock)
    assert again.token_endpoint_refresh("web", "web-secret", handle).access_token
    rec = SqliteGrantStore(path).get_refresh(handle)
    assert rec.revoked


# --- token exchange -----------------------------------------------------------------------


def test_exchange(issuer, clock):
    parent = login(issuer).access_token
    clock.advance(300)
    resp = issuer.token_endpoint_exchange("fts", "fts-secret", parent, "https://fts.test", "storage.read:/data/a")
    _, child = decode(resp.access_token)
    _, p = decode(parent)
    assert child.sub == p.sub
    assert child.aud == ("https://fts.test",)
    assert child.scope == "storage.read:/data/a"
    assert child.exp <= p.exp
    assert child.wlcg_groups == p.wlcg_groups


def test_exchange_default_scopes_intersect_client(issuer):
    parent = login(issuer).access_token
    resp = issuer.token_endpoint_exchange("fts", "fts-secret", parent, "https://fts.test")
    assert resp.scope == "storage.read:/data storage.write:/data/out"


def test_exchange_lifetime_capped_by_parent(issuer, clock):
    parent = login(issuer).access_token
    clock.advance(1100)
    resp = issuer.token_endpoint_exchange("fts", "fts-secret", parent, "https://fts.test")
    assert resp.expires_in == 100


def test_exchange_rejections(issuer, clock, rsa_key):
    parent = login(issuer).access_token
    with pytest.raises(ScopeBroadening):
        issuer.token_endpoint_exchange("fts", "fts-secret", parent, "https://fts.test", "storage.write:/data")
    with pytest.raises(AudienceNotPermitted):
        issuer.token_endpoint_exchange("fts", "fts-secret", parent, "https://elsewhere.test")
    with pytest.raises(UnauthorizedClient):
        issuer.token_endpoint_exchange("robot", "robot-secret", parent, "https://fts.test")
    with pytest.raises(InvalidSubjectToken):
        issuer.token_endpoint_exchange("fts", "fts-secret", "a.b.c", "https://fts.test")
    foreign = TokenIssuer(build_config(rsa_key), clock)
    with pytest.raises(InvalidSubjectToken):
        issuer.token_endpoint_exchange("fts", "fts-secret", login(foreign).access_token, "https://fts.test")
    clock.advance(1200)
    with pytest.raises(InvalidSubjectToken):
        issuer.token_endpoint_exchange("fts", "fts-secret", parent, "https://fts.test")


def test_exchange_rejects_id_tokens(issuer):
    idt = login(issuer).id_token
    with pytest.raises(InvalidSubjectToken):
        issuer.token_endpoint_exchange("fts", "fts-secret", idt, "https://fts.test")


CAP_POOL = ["storage.read:/data", "storage.read:/data/a", "storage.read:/data/a/b", "storage.read:/",
            "storage.write:/data", "storage.write:/data/out", "storage.write:/data/out/x", "storage.read"]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(CAP_POOL), min_size=1, max_size=4, unique=True))
def test_exchange_never_broadens(requested):
    key = KeyPair.from_seed(1)
    iss = TokenIssuer(build_config(key), VirtualClock(T0))
    parent = login(iss).access_token
    _, p = decode(parent)
    parent_caps = [Capability.parse(s) for s in p.scope.split()]
    try:
        resp = iss.token_endpoint_exchange("fts", "fts-secret", parent, "https://fts.test", " ".join(requested))
    except (ScopeBroadening, ScopeNotAllowed):
        assert scope_covered([Capability.parse(s) for s in requested], parent_caps) or scope_covered(
            [Capability.parse(s) for s in requested],
            [Capability.parse(s) for s in ("storage.read:/data", "storage.write:/data")],
        )
        return
    _, child = decode(resp.access_token)
    assert scope_covered([Capability.parse(s) for s in child.scope.split()], parent_caps) == []
    assert child.exp <= p.exp


# --- keys and publication ---------------------------------------------------------------------


def test_discovery_document(issuer):
    doc = issuer.serve_discovery()
    assert doc["issuer"] == ISS
    assert doc["jwks_uri"] == ISS + "/jwks"
    assert TOKEN_EXCHANGE_GRANT in doc["grant_types_supported"]


def test_rotation_keeps_old_key_for_retention_window(issuer, ec_key, clock):
    old_token = login(issuer).access_token
    new = KeyPair.from_seed(99)
    issuer.rotate_key(new)
    kids = [k["kid"] for k in issuer.serve_jwks()["keys"]]
    assert kids == [new.kid, ec_key.kid]
    assert decode(login(issuer).access_token)[0]["kid"] == new.kid
    assert issuer.verify_own_token(old_token)
    clock.advance(1200 + 59)
    assert len(issuer.serve_jwks()["keys"]) == 2
    clock.advance(1)
    assert [k["kid"] for k in issuer.serve_jwks()["keys"]] == [new.kid]
    with pytest.raises(ConfigError):
        issuer.rotate_key(new)


def test_concurrent_rotation_and_issuance(issuer, clock):
    tokens, errors = [], []

    def mint():
        for _ in range(10):
            try:
                tokens.append(issuer.token_endpoint_client_credentials("robot", "robot-secret").access_token)
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

    threads = [threading.Thread(target=mint) for _ in range(4)]
    for t in threads:
        t.start()
    for seed in range(200, 205):
        issuer.rotate_key(KeyPair.from_seed(seed))
    for t in threads:
        t.join()
    assert not errors
    published = {k["kid"] for k in issuer.serve_jwks()["keys"]}
    assert all(decode(t)[0]["kid"] in published for t in tokens)


# --- HTTP front end ------------------------------------------------------------------------------


@pytest.fixture
def net(issuer):
    n = LoopbackNetwork()
    n.mount(ISS, IssuerApp(issuer))
    return n


def test_http_discovery_and_jwks(net, issuer, clock):
    trust = TrustAnchorCache(net, [ISS], clock)
    key = trust.get_key(ISS, issuer.active_key.kid)
    assert key.kid == issuer.active_key.kid
    assert net.request("GET", ISS + "/.well-known/oauth-authorization-server").status == 200
    assert net.request("GET", ISS + "/nope").status == 404
    assert net.request("GET", ISS + "/token").status == 405


def test_http_authorization_code_flow(net):
    form = net.request("GET", ISS + "/authorize?client_id=web&state=s1")
    assert form.status == 200 and b'name="state" value="s1"' in form.body
    resp = net.request(
        "POST", ISS + "/authorize", FORM_HEADERS,
        form_body({"client_id": "web", "redirect_uri": REDIRECT, "scope": SCOPES, "state": "s1",
                   "username": "alice", "password": "pw"}),
    )
    assert resp.status == 302
    loc = urlsplit(resp.header("Location"))
    q = parse_qs(loc.query)
    assert q["state"] == ["s1"]
    tok = net.request(
        "POST", ISS + "/token", {**FORM_HEADERS, "Authorization": basic_header("web", "web-secret")},
        form_body({"grant_type": "authorization_code", "code": q["code"][0], "redirect_uri": REDIRECT}),
    )
    assert tok.status == 200
    doc = tok.json_body()
    assert {"access_token", "id_token", "refresh_token", "expires_in"} <= set(doc)
    assert tok.header("Cache-Control") == "no-store"


def test_http_errors(net):
    resp = net.request(
        "POST", ISS + "/token", FORM_HEADERS,
        form_body({"grant_type": "client_credentials", "client_id": "robot", "client_secret": "bad"}),
    )
    assert resp.status == 401 and resp.json_body()["error"] == "invalid_client"
    assert resp.header("WWW-Authenticate").startswith("Basic")
    resp = net.request("POST", ISS + "/token", FORM_HEADERS, form_body({"grant_type": "password"}))
    assert resp.status == 400 and resp.json_body()["error"] == "unsupported_grant_type"
    resp = net.request(
        "POST", ISS + "/token", FORM_HEADERS,
        form_body({"grant_type": "client_credentials", "client_id": "robot", "client_secret": "robot-secret",
                   "scope": "storage.write:/"}),
    )
    assert resp.json_body()["error"] == "invalid_scope"


def test_http_exchange(net, issuer):
    parent = login(issuer).access_token
    resp = net.request(
        "POST", ISS + "/token", {**FORM_HEADERS, "Authorization": basic_header("fts", "fts-secret")},
        form_body({"grant_type": TOKEN_EXCHANGE_GRANT, "subject_token": parent, "audience": "https://fts.test",
                   "subject_token_type": "urn:ietf:params:oauth:token-type:access_token"}),
    )
    assert resp.status == 200
    resp = net.request(
        "POST", ISS + "/token", {**FORM_HEADERS, "Authorization": basic_header("fts", "fts-secret")},
        form_body({"grant_type": TOKEN_EXCHANGE_GRANT, "subject_token": parent, "audience": "https://x.test"}),
    )
    assert resp.json_body()["error"] == "invalid_target"


def test_lifetimes_configurable(ec_key, clock):
    iss = TokenIssuer(build_config(ec_key, lifetimes=Lifetimes(access=300)), clock)
    _, c = decode(iss.token_endpoint_client_credentials("robot", "robot-secret").access_token)
    assert c.exp - c.iat == 300
