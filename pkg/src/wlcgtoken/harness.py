"""End-to-end token-flow scenarios over in-process services.

A :class:`World` wires one issuer and several storage resources onto a
loopback network (or real local sockets) under a virtual clock. Scenarios
are scripts of actor steps; each step records what was sent, what came back,
the tokens seen (signatures dropped) and named assertions. The first failed
assertion stops the script and raises :class:`ScenarioFailure`.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable
from urllib.parse import parse_qs, urlsplit

from .authz import Capability, parse_scope
from .clock import VirtualClock
from .errors import WLCGTokenError
from .httpio import (
    FORM_HEADERS,
    BackgroundServer,
    CountingTransport,
    HttpTransport,
    LateBoundService,
    LoopbackNetwork,
    Response,
    UrllibTransport,
    basic_header,
    bearer,
    form_body,
)
from .issuer import (
    TOKEN_EXCHANGE_GRANT,
    ClientRegistration,
    IssuerApp,
    IssuerConfig,
    TokenIssuer,
    UserRecord,
    hash_password,
)
from .keys import KeyPair
from .resource import GuardConfig, MemoryTree, ResourceGuard, StorageApp
from .tokens import ClaimSet, TokenKind, check_profile_shape, decode
from .trust import TrustAnchorCache

START_TIME = 1_700_000_000

USER = "alice"
USER_PASSWORD = "alice-password"
USER_SUBJECT = "7f3c2a9e-5d41-4b8e-9c06-1e2f3a4b5c6d"
USER_GROUPS = ("/wlcg", "/wlcg/xfers")
USER_ASSURANCE = ("https://refeds.org/assurance/IAP/medium",)

REDIRECT_URI = "https://client.test/callback"


class ScenarioFailure(WLCGTokenError):
    def __init__(self, transcript: "Transcript", assertion: str, error_type: str | None = None):
        self.transcript = transcript
        self.assertion = assertion
        self.error_type = error_type
        msg = f"scenario {transcript.scenario!r} failed at {assertion!r}"
        if error_type:
            msg += f" ({error_type})"
        super().__init__(msg)


class TokenRequestError(WLCGTokenError):
    def __init__(self, status: int, doc: dict):
        self.status = status
        self.error = doc.get("error")
        self.error_type = doc.get("error_type")
        self.description = doc.get("error_description")
        super().__init__(f"{status} {self.error}: {self.description}")


# --- transcripts ---------------------------------------------------------------


def token_view(compact: str) -> dict[str, Any]:
    """Header and claims of a token; the signature is never recorded."""
    header, claims = decode(compact)
    return {"header": header, "claims": claims.to_payload(), "signature": "<redacted>"}


@dataclass
class StepRecord:
    step: int
    actor: str
    action: str
    requests: list[dict[str, Any]] = field(default_factory=list)
    tokens: dict[str, dict[str, Any]] = field(default_factory=dict)
    assertions: list[dict[str, Any]] = field(default_factory=list)
    fetches: dict[str, int] = field(default_factory=dict)
    status: str = "passed"
    error_type: str | None = None

    @property
    def passed(self) -> bool:
        return self.status == "passed"

    def to_dict(self) -> dict[str, Any]:
        return {
            "step": self.step,
            "actor": self.actor,
            "action": self.action,
            "status": self.status,
            "requests": self.requests,
            "tokens": self.tokens,
            "assertions": self.assertions,
            "fetches": self.fetches,
            "error_type": self.error_type,
        }


@dataclass
class Transcript:
    scenario: str
    steps: list[StepRecord] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.steps)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(s.to_dict(), sort_keys=True) + "\n" for s in self.steps)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    def normalized(self) -> list[dict[str, Any]]:
        """Step records with the per-run random values (jti) removed."""
        out = []
        for step in self.steps:
            doc = json.loads(json.dumps(step.to_dict()))
            for view in doc["tokens"].values():
                view["claims"].pop("jti", None)
            out.append(doc)
        return out


class StepRecorder:
    def __init__(self, record: StepRecord):
        self.record = record

    def check(self, name: str, condition: bool, detail: Any = None) -> bool:
        entry = {"name": name, "passed": bool(condition)}
        if detail is not None:
            entry["detail"] = detail
        self.record.assertions.append(entry)
        return bool(condition)

    def note_request(self, method: str, url: str, resp: Response, **extra) -> None:
        summary = {"method": method, "url": url, "status": resp.status}
        if resp.status >= 400 and resp.header("content-type") == "application/json":
            body = resp.json_body()
            summary["error"] = body.get("error")
            if "error_type" in body:
                summary["error_type"] = body["error_type"]
        if resp.header("www-authenticate"):
            summary["www_authenticate"] = resp.header("www-authenticate")
        summary.update(extra)
        self.record.requests.append(summary)

    def token(self, label: str, compact: str, kind: TokenKind) -> ClaimSet:
        """Record a token and assert it fits the profile shape of its kind."""
        _, claims = decode(compact)
        self.record.tokens[label] = token_view(compact)
        report = check_profile_shape(claims, kind)
        self.check(f"{label} conforms to {kind.value} shape", report.conformant,
                   [str(v) for v in report.violations] or None)
        return claims


@dataclass
class Step:
    actor: str
    action: str
    run: Callable[[StepRecorder], None]
    expected: str = "all assertions pass"


class _StepAborted(Exception):
    def __init__(self, error_type: str | None = None):
        self.error_type = error_type


@dataclass
class Scenario:
    name: str
    actors: tuple[str, ...]
    script: list[Step]
    clock: VirtualClock
    fetch_counters: dict[str, CountingTransport] = field(default_factory=dict)

    def __post_init__(self):
        unknown = {s.actor for s in self.script} - set(self.actors)
        if unknown:
            raise ValueError(f"steps reference undeclared actors {sorted(unknown)}")

    def run(self) -> Transcript:
        transcript = Transcript(self.name)
        failure: tuple[str, str | None] | None = None
        for i, step in enumerate(self.script, start=1):
            record = StepRecord(i, step.actor, step.action)
            transcript.steps.append(record)
            if failure is not None:
                record.status = "skipped"
                continue
            try:
                step.run(StepRecorder(record))
            except _StepAborted as exc:
                record.error_type = exc.error_type
            record.fetches = {name: c.total for name, c in self.fetch_counters.items()}
            failed = [a for a in record.assertions if not a["passed"]]
            if failed or record.error_type:
                record.status = "failed"
                failure = (failed[0]["name"] if failed else step.action, record.error_type)
        if failure is not None:
            raise ScenarioFailure(transcript, *failure)
        return transcript


# --- world --------------------------------------------------------------------


class OAuthClient:
    """A confidential client talking to the issuer over a transport."""

    def __init__(self, transport: HttpTransport, issuer_base: str, client_id: str, secret: str):
        self.transport = transport
        self.base = issuer_base.rstrip("/")
        self.client_id = client_id
        self.secret = secret

    def _post(self, rec: StepRecorder | None, path: str, fields: dict, auth: bool = True, **note):
        headers = dict(FORM_HEADERS)
        if auth:
            headers["Authorization"] = basic_header(self.client_id, self.secret)
        url = self.base + path
        resp = self.transport.request("POST", url, headers, form_body(fields))
        if rec is not None:
            note.setdefault("grant_type", fields.get("grant_type"))
            rec.note_request("POST", url, resp, **{k: v for k, v in note.items() if v})
        return resp

    def login(self, rec, username, password, scope, redirect_uri=REDIRECT_URI) -> str:
        resp = self._post(
            rec, "/authorize",
            {"client_id": self.client_id, "redirect_uri": redirect_uri, "scope": scope,
             "username": username, "password": password, "state": "xyz"},
            auth=False,
        )
        if resp.status != 302:
            raise TokenRequestError(resp.status, resp.json_body())
        query = parse_qs(urlsplit(resp.header("location")).query)
        return query["code"][0]

    def _token(self, rec, fields) -> dict:
        resp = self._post(rec, "/token", fields)
        doc = resp.json_body()
        if resp.status != 200:
            raise TokenRequestError(resp.status, doc)
        return doc

    def redeem_code(self, rec, code, redirect_uri=REDIRECT_URI) -> dict:
        return self._token(rec, {"grant_type": "authorization_code", "code": code,
                                 "redirect_uri": redirect_uri})

    def refresh(self, rec, handle, scope=None) -> dict:
        return self._token(rec, {"grant_type": "refresh_token", "refresh_token": handle, "scope": scope})

    def client_credentials(self, rec, scope=None) -> dict:
        return self._token(rec, {"grant_type": "client_credentials", "scope": scope})

    def exchange(self, rec, subject_token, audience, scope=None) -> dict:
        return self._token(rec, {
            "grant_type": TOKEN_EXCHANGE_GRANT,
            "subject_token": subject_token,
            "subject_token_type": "urn:ietf:params:oauth:token-type:access_token",
            "audience": audience,
            "scope": scope,
        })


@dataclass
class ResourceNode:
    name: str
    url: str
    audience: str
    app: StorageApp
    fetch_counter: CountingTransport


class World:
    """Issuer plus storage resources sharing one virtual clock."""

    CLIENTS = {
        "webui": dict(
            secret="webui-secret",
            grants={"authorization_code", "refresh_token"},
            scopes="openid offline_access storage.read:/ storage.write:/data storage.create:/data",
            audiences=("https://storage.test",),
        ),
        "rucio": dict(
            secret="rucio-secret",
            grants={"authorization_code", "refresh_token", "token_exchange", "client_credentials"},
            scopes="storage.read:/data storage.write:/data",
            audiences=("https://rucio.test",),
        ),
        "fts": dict(
            secret="fts-secret",
            grants={"token_exchange"},
            scopes="storage.read:/ storage.write:/",
            audiences=("https://fts.test",),
        ),
    }

    def __init__(self, sockets: bool = False, alg: str = "ES256", resources=("storage",)):
        self.clock = VirtualClock(START_TIME)
        self.sockets = sockets
        self._servers: list[BackgroundServer] = []
        if sockets:
            self.transport: HttpTransport = UrllibTransport()
            issuer_slot = LateBoundService()
            server = BackgroundServer(issuer_slot).start()
            self._servers.append(server)
            issuer_url = server.url
        else:
            self.network = LoopbackNetwork()
            self.transport = self.network
            issuer_url = "https://issuer.test"

        key = KeyPair.from_seed(1) if alg == "ES256" else KeyPair.generate("RS256")
        pw_hash = hash_password(USER_PASSWORD, salt=b"fixed-test-salt!", iterations=1000)
        clients = [
            ClientRegistration(
                client_id=cid,
                client_secret=c["secret"],
                allowed_grants=frozenset(c["grants"]),
                allowed_scopes=frozenset(c["scopes"].split()),
                redirect_uris=(REDIRECT_URI,),
                default_audiences=c["audiences"],
            )
            for cid, c in self.CLIENTS.items()
        ]
        self.resource_audiences = {
            "storage": "https://storage.test",
            "source": "https://source.test",
            "dest": "https://dest.test",
        }
        config = IssuerConfig(
            issuer=issuer_url,
            keys=[key],
            clients=clients,
            users=[UserRecord(USER, pw_hash, USER_SUBJECT, USER_GROUPS, USER_ASSURANCE,
                              {"name": "Alice Example", "email": "alice@example.org"})],
            exchangeable_audiences=("https://fts.test", "https://source.test", "https://dest.test"),
        )
        self.issuer = TokenIssuer(config, self.clock)
        self.issuer_url = issuer_url
        if sockets:
            issuer_slot.service = IssuerApp(self.issuer)
        else:
            self.network.mount(issuer_url, IssuerApp(self.issuer))

        self.resources: dict[str, ResourceNode] = {}
        for name in resources:
            self._add_resource(name)

    def _add_resource(self, name: str) -> ResourceNode:
        audience = self.resource_audiences[name]
        counter = CountingTransport(self.transport)
        trust = TrustAnchorCache(counter, [self.issuer_url], self.clock, allow_http=self.sockets)
        guard = ResourceGuard(GuardConfig((self.issuer_url,), (audience,)), trust, self.clock)
        app = StorageApp(guard, MemoryTree())
        if self.sockets:
            server = BackgroundServer(app).start()
            self._servers.append(server)
            url = server.url
        else:
            url = f"https://{name}.test"
            self.network.mount(url, app)
        node = ResourceNode(name, url, audience, app, counter)
        self.resources[name] = node
        return node

    def client(self, client_id: str) -> OAuthClient:
        return OAuthClient(self.transport, self.issuer_url, client_id, self.CLIENTS[client_id]["secret"])

    def call(self, rec: StepRecorder, resource: str, method: str, path: str,
             token: str | None, body: bytes = b"") -> Response:
        url = self.resources[resource].url + "/storage" + path
        resp = self.transport.request(method, url, bearer(token) if token else {}, body)
        rec.note_request(method, url, resp)
        return resp

    def close(self) -> None:
        for server in self._servers:
            server.stop()
        self._servers.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _caps(scope: str | None) -> list[Capability]:
    return parse_scope(scope) if scope else []


def _attenuated(child: ClaimSet, parent: ClaimSet) -> bool:
    parent_caps = _caps(parent.scope)
    return all(any(p.covers(c) for p in parent_caps) for c in _caps(child.scope))


def _expect(rec: StepRecorder, name: str, fn: Callable[[], Any]):
    """Run a token request; record a failed assertion and abort the step on error."""
    try:
        return fn()
    except TokenRequestError as exc:
        rec.check(name, False, {"error": exc.error, "error_type": exc.error_type})
        raise _StepAborted(exc.error_type) from exc


# --- scenarios ------------------------------------------------------------------

FIGURE3_SCOPE = "openid offline_access storage.read:/data storage.write:/data"
DATA_PATH = "/data/run1/f.root"
PAYLOAD = b"event data \x00\x01\x02"


def run_figure3(sockets: bool = False) -> Transcript:
    """Login, token issuance, resource access, cached validation,
    expiry + refresh, and reuse of the new access token."""
    world = World(sockets=sockets)
    state: dict[str, Any] = {}
    webui = world.client("webui")
    storage = world.resources["storage"]

    def step1(rec):
        state["code"] = _expect(rec, "login accepted", lambda: webui.login(
            rec, USER, USER_PASSWORD, FIGURE3_SCOPE + " storage.create:/"))
        rec.check("authorization code issued", bool(state["code"]))

    def step2(rec):
        doc = _expect(rec, "code redeemed", lambda: webui.redeem_code(rec, state["code"]))
        rec.check("three tokens returned", all(doc.get(k) for k in ("id_token", "access_token", "refresh_token")))
        id_claims = rec.token("id_token", doc["id_token"], TokenKind.ID)
        access = rec.token("access_token", doc["access_token"], TokenKind.ACCESS)
        rec.check("id token carries auth_time", id_claims.auth_time is not None)
        rec.check("access token has no auth_time", access.auth_time is None)
        rec.check("access token carries the VO groups", access.wlcg_groups == USER_GROUPS)
        rec.check("scopes narrowed to the client allowlist", access.scope == FIGURE3_SCOPE,
                  access.scope)
        rec.check("expires_in equals exp - iat", doc["expires_in"] == access.exp - access.iat)
        rec.check("same subject in id and access token", id_claims.sub == access.sub == USER_SUBJECT)
        state.update(access=doc["access_token"], refresh=doc["refresh_token"], claims=access)

    def step3(rec):
        resp = world.call(rec, "storage", "PUT", DATA_PATH, state["access"], PAYLOAD)
        rec.check("resource allows the write", resp.status == 201, resp.status)
        rec.check("trust roots fetched once (metadata + keys)", storage.fetch_counter.total == 2,
                  storage.fetch_counter.total)
        state["fetches_after_first_use"] = storage.fetch_counter.total

    def step4(rec):
        before = storage.fetch_counter.total
        resp = world.call(rec, "storage", "GET", DATA_PATH, state["access"])
        rec.check("resource allows the read", resp.status == 200, resp.status)
        rec.check("bytes round-trip", resp.body == PAYLOAD)
        rec.check("validated from cached trust roots", storage.fetch_counter.total == before,
                  {"before": before, "after": storage.fetch_counter.total})

    def step5(rec):
        world.clock.set(state["claims"].exp + 60 + 1)
        resp = world.call(rec, "storage", "GET", DATA_PATH, state["access"])
        rec.check("expired access token rejected with 401", resp.status == 401, resp.status)
        rec.check("challenge says invalid_token",
                  'error="invalid_token"' in (resp.header("www-authenticate") or ""))
        doc = _expect(rec, "refresh accepted", lambda: webui.refresh(rec, state["refresh"]))
        new = rec.token("refreshed_access_token", doc["access_token"], TokenKind.ACCESS)
        now = world.clock.now()
        rec.check("new access token valid from now", new.iat == now and new.exp > now)
        rec.check("same subject", new.sub == state["claims"].sub)
        rec.check("same scopes", new.scope == state["claims"].scope)
        rec.check("refresh handle rotated", doc.get("refresh_token") not in (None, state["refresh"]))
        state.update(access=doc["access_token"], refresh=doc["refresh_token"])

    def step6(rec):
        resp = world.call(rec, "storage", "GET", DATA_PATH, state["access"])
        rec.check("new access token accepted", resp.status == 200, resp.status)
        rec.check("bytes round-trip", resp.body == PAYLOAD)
        rec.check("resource trust fetches across the run <= 2", storage.fetch_counter.total <= 2,
                  storage.fetch_counter.total)

    scenario = Scenario(
        "figure3",
        actors=("identity-provider", "client", "resource"),
        script=[
            Step("identity-provider", "1 upstream login (stub credential store)", step1),
            Step("client", "2 redeem code for ID, access and refresh tokens", step2),
            Step("client", "3 use access token at storage", step3),
            Step("resource", "4 validate against cached trust roots", step4),
            Step("client", "5 access token expires; refresh", step5),
            Step("client", "6 reuse the newly valid access token", step6),
        ],
        clock=world.clock,
        fetch_counters={"resource:storage": storage.fetch_counter},
    )
    try:
        return scenario.run()
    finally:
        world.close()


def run_delegation_chain(variant: str = "user", broaden: bool = False, sockets: bool = False) -> Transcript:
    """Orchestrator -> transfer service -> source/destination storage.

    ``variant="user"`` delegates a token issued to the user; ``"admin"``
    starts from the orchestrator's own client-credentials token. With
    ``broaden=True`` the transfer service asks for more than it was given at
    the second hop, which must fail with ScopeBroadening.
    """
    if variant not in ("user", "admin"):
        raise ValueError(f"unknown variant {variant!r}")
    world = World(sockets=sockets, resources=("source", "dest"))
    world.resources["source"].app.tree.write(DATA_PATH, PAYLOAD)
    rucio, fts = world.client("rucio"), world.client("fts")
    src, dst = world.resources["source"], world.resources["dest"]
    state: dict[str, Any] = {}
    base_scope = "storage.read:/data storage.write:/data"
    hop1_scope = "storage.read:/data/run1 storage.write:/data/run1"
    src_scope = "storage.read:/" if broaden else "storage.read:/data/run1"

    def hop_checks(rec, child: ClaimSet, parent: ClaimSet, audience: str):
        rec.check("scope attenuated (child within parent)", _attenuated(child, parent),
                  {"child": child.scope, "parent": parent.scope})
        rec.check("subject preserved", child.sub == parent.sub == state["sub"])
        rec.check("audience narrowed to the next hop", child.aud == (audience,) and child.aud != parent.aud)
        rec.check("lifetime capped by parent", child.exp <= parent.exp)

    def start_user(rec):
        code = _expect(rec, "login accepted", lambda: rucio.login(rec, USER, USER_PASSWORD, base_scope))
        doc = _expect(rec, "code redeemed", lambda: rucio.redeem_code(rec, code))
        claims = rec.token("user_token", doc["access_token"], TokenKind.ACCESS)
        rec.check("user token issued to the user", claims.sub == USER_SUBJECT)
        state.update(root=doc["access_token"], root_claims=claims, sub=claims.sub)

    def start_admin(rec):
        doc = _expect(rec, "client credentials accepted", lambda: rucio.client_credentials(rec, base_scope))
        rec.check("no id token for client credentials", "id_token" not in doc)
        rec.check("no refresh token for client credentials", "refresh_token" not in doc)
        claims = rec.token("admin_token", doc["access_token"], TokenKind.ACCESS)
        rec.check("admin token subject is the orchestrator", claims.sub == "rucio")
        state.update(root=doc["access_token"], root_claims=claims, sub=claims.sub)

    def hop1(rec):
        doc = _expect(rec, "exchange accepted",
                      lambda: rucio.exchange(rec, state["root"], "https://fts.test", hop1_scope))
        claims = rec.token("transfer_token", doc["access_token"], TokenKind.ACCESS)
        hop_checks(rec, claims, state["root_claims"], "https://fts.test")
        state.update(transfer=doc["access_token"], transfer_claims=claims)

    def hop2_source(rec):
        doc = _expect(rec, "exchange accepted",
                      lambda: fts.exchange(rec, state["transfer"], src.audience, src_scope))
        claims = rec.token("source_token", doc["access_token"], TokenKind.ACCESS)
        hop_checks(rec, claims, state["transfer_claims"], src.audience)
        state.update(source=doc["access_token"])

    def hop2_dest(rec):
        doc = _expect(rec, "exchange accepted",
                      lambda: fts.exchange(rec, state["transfer"], dst.audience, "storage.write:/data/run1"))
        claims = rec.token("dest_token", doc["access_token"], TokenKind.ACCESS)
        hop_checks(rec, claims, state["transfer_claims"], dst.audience)
        state.update(dest=doc["access_token"])

    def read_source(rec):
        resp = world.call(rec, "source", "GET", DATA_PATH, state["source"])
        rec.check("source read allowed", resp.status == 200, resp.status)
        state["bytes"] = resp.body

    def write_dest(rec):
        resp = world.call(rec, "dest", "PUT", DATA_PATH, state["dest"], state["bytes"])
        rec.check("destination write allowed", resp.status == 201, resp.status)
        rec.check("copy is byte-identical", dst.app.tree.read(DATA_PATH) == PAYLOAD)

    def cross_use(rec):
        resp = world.call(rec, "dest", "PUT", DATA_PATH, state["source"], b"x")
        rec.check("source-audience token rejected at destination", resp.status == 401, resp.status)
        resp = world.call(rec, "source", "PUT", DATA_PATH, state["source"], b"x")
        rec.check("read-only token cannot write at source", resp.status == 403, resp.status)
        for name, node in (("source", src), ("dest", dst)):
            rec.check(f"{name} trust fetches <= 2", node.fetch_counter.total <= 2, node.fetch_counter.total)

    start = start_user if variant == "user" else start_admin
    scenario = Scenario(
        f"delegation-{variant}" + ("-broaden" if broaden else ""),
        actors=("user", "orchestrator", "transfer", "source", "destination"),
        script=[
            Step("user" if variant == "user" else "orchestrator", f"obtain {variant} token", start),
            Step("orchestrator", "hop 1: exchange for the transfer audience", hop1),
            Step("transfer", "hop 2: exchange for source storage (read)", hop2_source),
            Step("transfer", "hop 2: exchange for destination storage (write)", hop2_dest),
            Step("source", "read the file at source", read_source),
            Step("destination", "write the copy at destination", write_dest),
            Step("destination", "audience and operation confinement", cross_use),
        ],
        clock=world.clock,
        fetch_counters={"resource:source": src.fetch_counter, "resource:dest": dst.fetch_counter},
    )
    try:
        return scenario.run()
    finally:
        world.close()


def run_refresh_long_lived(cycles: int = 5, sockets: bool = False, stress_threads: int = 16) -> Transcript:
    """A long job bridging ``cycles`` access-token expirations by refresh."""
    world = World(sockets=sockets)
    webui = world.client("webui")
    storage = world.resources["storage"]
    state: dict[str, Any] = {"rotated": []}

    def start(rec):
        code = _expect(rec, "login accepted", lambda: webui.login(rec, USER, USER_PASSWORD, FIGURE3_SCOPE))
        doc = _expect(rec, "code redeemed", lambda: webui.redeem_code(rec, code))
        claims = rec.token("access_token", doc["access_token"], TokenKind.ACCESS)
        resp = world.call(rec, "storage", "PUT", DATA_PATH, doc["access_token"], PAYLOAD)
        rec.check("initial write allowed", resp.status == 201, resp.status)
        state.update(access=doc["access_token"], refresh=doc["refresh_token"], claims=claims)

    def cycle(i):
        def run(rec):
            world.clock.set(state["claims"].exp + 60 + 1)
            resp = world.call(rec, "storage", "GET", DATA_PATH, state["access"])
            rec.check("expired token rejected with 401", resp.status == 401, resp.status)
            old = state["refresh"]
            doc = _expect(rec, "refresh accepted", lambda: webui.refresh(rec, old))
            claims = rec.token(f"access_token_{i}", doc["access_token"], TokenKind.ACCESS)
            state["rotated"].append(old)
            rec.check("handle rotated", doc["refresh_token"] != old)
            try:
                webui.refresh(rec, old)
                rec.check("rotated-out handle is dead", False)
            except TokenRequestError as exc:
                rec.check("rotated-out handle is dead", exc.error == "invalid_grant", exc.error)
            live = world.issuer.store.live_refresh_count("webui", USER_SUBJECT, world.clock.now())
            rec.check("exactly one live refresh handle", live == 1, live)
            resp = world.call(rec, "storage", "GET", DATA_PATH, doc["access_token"])
            rec.check("resource call after refresh succeeds", resp.status == 200, resp.status)
            state.update(access=doc["access_token"], refresh=doc["refresh_token"], claims=claims)
        return run

    def replay_all(rec):
        dead = 0
        for handle in state["rotated"]:
            try:
                webui.refresh(rec, handle)
            except TokenRequestError as exc:
                dead += exc.error == "invalid_grant"
        rec.check("every rotated-out handle is dead", dead == len(state["rotated"]),
                  {"dead": dead, "rotated": len(state["rotated"])})
        rec.check("resource trust fetches over all cycles <= 2", storage.fetch_counter.total <= 2,
                  storage.fetch_counter.total)

    def stress(rec):
        handle = state["refresh"]
        results: list[bool] = []
        lock = threading.Lock()

        def attempt():
            try:
                webui.refresh(None, handle)
                ok = True
            except TokenRequestError:
                ok = False
            with lock:
                results.append(ok)

        threads = [threading.Thread(target=attempt) for _ in range(stress_threads)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        rec.check("concurrent reuse of one handle yields exactly one success", results.count(True) == 1,
                  {"successes": results.count(True), "attempts": len(results)})
        live = world.issuer.store.live_refresh_count("webui", USER_SUBJECT, world.clock.now())
        rec.check("still exactly one live refresh handle", live == 1, live)

    script = [Step("client", "login and first use", start)]
    script += [Step("client", f"cycle {i}: expiry, refresh, reuse", cycle(i)) for i in range(1, cycles + 1)]
    script += [
        Step("client", "replay every rotated-out handle", replay_all),
        Step("client", "concurrent refresh with one handle", stress),
    ]
    scenario = Scenario(
        "refresh-long-lived",
        actors=("client",),
        script=script,
        clock=world.clock,
        fetch_counters={"resource:storage": storage.fetch_counter},
    )
    try:
        return scenario.run()
    finally:
        world.close()


SCENARIOS: dict[str, Callable[..., Transcript]] = {
    "figure3": run_figure3,
    "delegation": lambda **kw: run_delegation_chain("user", **kw),
    "delegation-admin": lambda **kw: run_delegation_chain("admin", **kw),
    "delegation-broaden": lambda **kw: run_delegation_chain("user", broaden=True, **kw),
    "refresh": run_refresh_long_lived,
}
