"""Minimal HTTP plumbing shared by the services and their clients.

Services are plain objects with ``handle(Request) -> Response``. The same
object can be mounted on a :class:`LoopbackNetwork` (no sockets, used by the
scenarios and tests) or served over real sockets through :func:`as_wsgi`.
Clients talk to either through the :class:`HttpTransport` protocol.
"""

from __future__ import annotations

import base64
import json
import threading
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Protocol
from urllib.parse import parse_qsl, urlencode, urlsplit
from wsgiref.simple_server import WSGIRequestHandler, make_server


@dataclass
class Request:
    method: str
    path: str
    query: dict[str, str] = field(default_factory=dict)
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""

    def __post_init__(self):
        self.method = self.method.upper()
        self.headers = {k.lower(): v for k, v in self.headers.items()}

    def header(self, name: str, default: str | None = None) -> str | None:
        return self.headers.get(name.lower(), default)

    def form(self) -> dict[str, str]:
        return dict(parse_qsl(self.body.decode("utf-8", "replace"), keep_blank_values=True))

    def basic_auth(self) -> tuple[str, str] | None:
        value = self.header("authorization") or ""
        scheme, _, param = value.partition(" ")
        if scheme.lower() != "basic":
            return None
        try:
            user, sep, password = base64.b64decode(param.strip()).decode().partition(":")
        except ValueError:
            return None
        return (user, password) if sep else None


@dataclass
class Response:
    status: int
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""

    @classmethod
    def json(cls, doc: Any, status: int = 200, headers: Mapping[str, str] | None = None) -> "Response":
        hdrs = {"Content-Type": "application/json", "Cache-Control": "no-store"}
        hdrs.update(headers or {})
        return cls(status, hdrs, json.dumps(doc, separators=(",", ":")).encode())

    @classmethod
    def text(cls, text: str, status: int = 200, headers: Mapping[str, str] | None = None) -> "Response":
        hdrs = {"Content-Type": "text/plain; charset=utf-8"}
        hdrs.update(headers or {})
        return cls(status, hdrs, text.encode())

    def header(self, name: str) -> str | None:
        for k, v in self.headers.items():
            if k.lower() == name.lower():
                return v
        return None

    def json_body(self) -> Any:
        return json.loads(self.body)


class HttpTransport(Protocol):
    def request(
        self,
        method: str,
        url: str,
        headers: Mapping[str, str] | None = None,
        body: bytes = b"",
    ) -> Response: ...

    def fetch(self, url: str) -> Response: ...


class Service(Protocol):
    def handle(self, request: Request) -> Response: ...


class LoopbackNetwork:
    """Routes requests by origin to in-process services and counts them."""

    def __init__(self):
        self._services: dict[str, Service] = {}
        self._lock = threading.Lock()
        self.counts: Counter[tuple[str, str]] = Counter()

    def mount(self, origin: str, service: Service) -> None:
        self._services[origin.rstrip("/")] = service

    def request(self, method, url, headers=None, body=b""):
        parts = urlsplit(url)
        origin = f"{parts.scheme}://{parts.netloc}"
        service = self._services.get(origin)
        if service is None:
            raise ConnectionError(f"no service mounted at {origin}")
        with self._lock:
            self.counts[(method.upper(), url)] += 1
        req = Request(
            method,
            parts.path or "/",
            dict(parse_qsl(parts.query, keep_blank_values=True)),
            dict(headers or {}),
            body,
        )
        return service.handle(req)

    def fetch(self, url: str) -> Response:
        return self.request("GET", url)

    def fetches(self, prefix: str = "") -> int:
        """Number of GET requests sent to URLs starting with ``prefix``."""
        with self._lock:
            return sum(n for (m, u), n in self.counts.items() if m == "GET" and u.startswith(prefix))


class _NoRedirect(urllib.request.HTTPRedirectHandler):
    def redirect_request(self, req, fp, code, msg, headers, newurl):
        return None


class UrllibTransport:
    """Real HTTP(S) client; TLS verification stays on, redirects are not followed."""

    def __init__(self, timeout: float = 10.0):
        self.timeout = timeout
        self._opener = urllib.request.build_opener(_NoRedirect)

    def request(self, method, url, headers=None, body=b""):
        req = urllib.request.Request(url, data=body or None, method=method.upper())
        for k, v in (headers or {}).items():
            req.add_header(k, v)
        try:
            with self._opener.open(req, timeout=self.timeout) as resp:
                return Response(resp.status, dict(resp.headers.items()), resp.read())
        except urllib.error.HTTPError as err:
            return Response(err.code, dict(err.headers.items()), err.read())
        except (urllib.error.URLError, OSError) as err:
            raise ConnectionError(str(err)) from err

    def fetch(self, url):
        return self.request("GET", url)


def form_body(fields: Mapping[str, str]) -> bytes:
    return urlencode({k: v for k, v in fields.items() if v is not None}).encode()


FORM_HEADERS = {"Content-Type": "application/x-www-form-urlencoded"}


def basic_header(user: str, password: str) -> str:
    return "Basic " + base64.b64encode(f"{user}:{password}".encode()).decode()


def as_wsgi(service: Service) -> Callable:
    def app(environ, start_response):
        length = int(environ.get("CONTENT_LENGTH") or 0)
        body = environ["wsgi.input"].read(length) if length else b""
        headers = {
            key[5:].replace("_", "-").lower(): value
            for key, value in environ.items()
            if key.startswith("HTTP_")
        }
        if environ.get("CONTENT_TYPE"):
            headers["content-type"] = environ["CONTENT_TYPE"]
        request = Request(
            environ["REQUEST_METHOD"],
            environ.get("PATH_INFO") or "/",
            dict(parse_qsl(environ.get("QUERY_STRING", ""), keep_blank_values=True)),
            headers,
            body,
        )
        response = service.handle(request)
        start_response(
            f"{response.status} {_REASONS.get(response.status, 'Status')}",
            list(response.headers.items()),
        )
        return [response.body]

    return app


_REASONS = {
    200: "OK", 201: "Created", 302: "Found", 400: "Bad Request", 401: "Unauthorized",
    403: "Forbidden", 404: "Not Found", 405: "Method Not Allowed", 500: "Internal Server Error",
}


class _QuietHandler(WSGIRequestHandler):
    def log_message(self, format, *args):  # noqa: A002
        pass


class BackgroundServer:
    """A WSGI server on a daemon thread; ``port=0`` picks a free port."""

    def __init__(self, service: Service, host: str = "127.0.0.1", port: int = 0):
        self._server = make_server(host, port, as_wsgi(service), handler_class=_QuietHandler)
        self.host = host
        self.port = self._server.server_port
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> "BackgroundServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve_forever(service: Service, host: str, port: int) -> None:
    with make_server(host, port, as_wsgi(service)) as server:
        server.serve_forever()


def bearer(token: str) -> dict[str, str]:
    return {"Authorization": f"Bearer {token}"}


def split_origin(url: str) -> tuple[str, str]:
    parts = urlsplit(url)
    return f"{parts.scheme}://{parts.netloc}", parts.path


def iter_json_lines(records: Iterable[Mapping[str, Any]]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


class CountingTransport:
    """Wraps a transport and counts the requests made through it."""

    def __init__(self, inner: HttpTransport):
        self.inner = inner
        self._lock = threading.Lock()
        self.counts: Counter[str] = Counter()

    @property
    def total(self) -> int:
        with self._lock:
            return sum(self.counts.values())

    def request(self, method, url, headers=None, body=b""):
        with self._lock:
            self.counts[url] += 1
        return self.inner.request(method, url, headers, body)

    def fetch(self, url):
        return self.request("GET", url)


class LateBoundService:
    """Placeholder mounted before the real service exists (port-0 servers)."""

    service: Service | None = None

    def handle(self, request: Request) -> Response:
        if self.service is None:
            return Response.text("service not ready", 503)
        return self.service.handle(request)
