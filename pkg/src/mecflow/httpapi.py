"""HTTP/JSON APIs for the node and the hub.

The same core objects that the simulator drives in-process are exposed
here as bearer-token-guarded REST endpoints, using only the standard
library.  Errors are uniform ``{"code", "message"}`` JSON bodies.

Node API:    POST /ingest, POST /consumers, DELETE /consumers/{ref},
             GET /usage, GET /health, GET /metrics, POST /downlink,
             POST /bans.
Hub API:     POST /mecs, POST /mecs/{id}/heartbeat, GET /mecs,
             GET /browse, POST /subscriptions, DELETE /subscriptions/{id},
             GET /subscriptions/{id}/billing, POST /usage, POST /bans,
             GET /resolve.
"""

from __future__ import annotations

import itertools
import json
import re
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable
from urllib.parse import parse_qs, urlparse

from .broker import InvalidTopic
from .cloudhub import (
    SCOPE_ADMIN,
    SCOPE_CONSUME,
    SCOPE_PRODUCE,
    AllAttachesFailed,
    CloudHub,
    NoMatchingMec,
    NoServingMec,
    TokenStore,
    Unauthorized,
    UnknownMec,
    UnknownSubscription,
)
from .envelope import MalformedEnvelope, SchemaViolation
from .lifecycle import (
    BannedImage,
    SignatureInvalid,
    UnknownConsumerRef,
    UnknownDatatype,
)
from .mecnode import REJECTED, MecNode, UsageReport
from .policy import AlreadyReleased, ConsumerTerms, InsufficientResources, UnknownTier
from .tilegrid import (
    BoundingBox,
    CoverTooLarge,
    GeoPosition,
    InvalidDigit,
    cover_roi,
)

_STATUS_BY_ERROR: list[tuple[type[BaseException], int]] = [
    (Unauthorized, 401),
    (NoServingMec, 404),
    (NoMatchingMec, 404),
    (UnknownMec, 404),
    (UnknownSubscription, 404),
    (UnknownDatatype, 404),
    (UnknownConsumerRef, 404),
    (UnknownTier, 404),
    (BannedImage, 409),
    (InsufficientResources, 409),
    (AllAttachesFailed, 409),
    (AlreadyReleased, 409),
    (SignatureInvalid, 409),
    (MalformedEnvelope, 400),
    (SchemaViolation, 400),
    (InvalidDigit, 400),
    (CoverTooLarge, 400),
    (InvalidTopic, 400),
    (ValueError, 400),
    (KeyError, 400),
]


def _error_code(exc: BaseException) -> str:
    name = type(exc).__name__
    return re.sub(r"(?<!^)(?=[A-Z])", "-", name).lower()


def error_response(exc: BaseException) -> tuple[int, dict[str, str]]:
    for etype, status in _STATUS_BY_ERROR:
        if isinstance(exc, etype):
            return status, {"code": _error_code(exc), "message": str(exc)}
    return 500, {"code": "internal", "message": str(exc)}


@dataclass
class Request:
    method: str
    path: str
    query: dict[str, list[str]]
    headers: dict[str, str]
    body: bytes
    match: re.Match | None = None

    @property
    def token(self) -> str | None:
        auth = self.headers.get("authorization", "")
        if auth.lower().startswith("bearer "):
            return auth[7:].strip()
        return None

    def json(self) -> dict[str, Any]:
        try:
            obj = json.loads(self.body or b"{}")
        except ValueError as exc:
            raise SchemaViolation(f"request body is not JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise SchemaViolation("request body must be a JSON object")
        return obj

    def param(self, name: str, default: str | None = None) -> str | None:
        values = self.query.get(name)
        return values[0] if values else default


Handler = Callable[[Request], tuple[int, Any]]


class JsonApi:
    """Tiny method+regex router with per-route scope enforcement."""

    def __init__(self, tokens: TokenStore, clock):
        self.tokens = tokens
        self.clock = clock
        self._routes: list[tuple[str, re.Pattern, str | None, Handler]] = []

    def route(self, method: str, pattern: str, scope: str | None = None):
        compiled = re.compile(f"^{pattern}$")

        def register(fn: Handler) -> Handler:
            self._routes.append((method, compiled, scope, fn))
            return fn

        return register

    def handle(self, request: Request) -> tuple[int, Any]:
        path_seen = False
        for method, pattern, scope, fn in self._routes:
            match = pattern.match(request.path)
            if match is None:
                continue
            path_seen = True
            if method != request.method:
                continue
            request.match = match
            try:
                if scope is not None:
                    self.tokens.check(request.token, scope, self.clock.now_ms())
                return fn(request)
            except Exception as exc:  # noqa: BLE001 - mapped to wire errors
                return error_response(exc)
        if path_seen:
            return 405, {"code": "method-not-allowed", "message": request.method}
        return 404, {"code": "not-found", "message": request.path}


def _terms_from_obj(obj: dict[str, Any]) -> ConsumerTerms:
    return ConsumerTerms(bool(obj.get("commercial_use", False)),
                         bool(obj.get("redistribution", False)))


def _roi_from_body(body: dict[str, Any]) -> frozenset[str]:
    roi = body.get("roi")
    if isinstance(roi, list) and roi:
        return frozenset(str(k) for k in roi)
    bbox = body.get("roi_bbox")
    if bbox is not None:
        level = int(body.get("roi_level", 14))
        south, west, north, east = (float(v) for v in bbox)
        return frozenset(cover_roi(BoundingBox(south, west, north, east), level))
    raise SchemaViolation("need 'roi' (list of quadkeys) or 'roi_bbox' [S,W,N,E]")


# --------------------------------------------------------------------------
# Node API


def make_node_api(node: MecNode, tokens: TokenStore) -> JsonApi:
    api = JsonApi(tokens, node.clock)
    refs = itertools.count(1)

    @api.route("POST", "/ingest", SCOPE_PRODUCE)
    def ingest(req: Request):
        result = node.ingest(req.body)
        status = 400 if result.status == REJECTED else 200
        obj = {"status": result.status}
        if result.reason:
            obj["reason"] = result.reason
        return status, obj

    @api.route("POST", "/consumers", SCOPE_CONSUME)
    def attach(req: Request):
        body = req.json()
        ref = body.get("consumer_ref") or f"c-{next(refs):06d}"
        node.attach_consumer(
            ref, body["datatype"], body["tier"],
            _terms_from_obj(body.get("terms", {})), _roi_from_body(body),
            destination=body.get("destination", "cloud"))
        return 200, {"consumer_ref": ref}

    @api.route("DELETE", "/consumers/(?P<ref>[^/]+)", SCOPE_CONSUME)
    def detach(req: Request):
        return 200, {"removed": node.detach_consumer(req.match["ref"])}

    @api.route("GET", "/usage", SCOPE_ADMIN)
    def usage(req: Request):
        return 200, node.report_usage().to_obj()

    @api.route("GET", "/health")
    def health(req: Request):
        return 200, {"status": "ok", "mec_id": node.mec_id}

    @api.route("GET", "/metrics")
    def metrics(req: Request):
        return 200, node.metrics()

    @api.route("POST", "/downlink", SCOPE_CONSUME)
    def downlink(req: Request):
        body = req.json()
        return 200, {"delivered": node.downlink(body["datatype"],
                                                body.get("payload", {}))}

    @api.route("POST", "/bans", SCOPE_ADMIN)
    def bans(req: Request):
        body = req.json()
        return 200, {"acked": node.apply_ban(body["image_ref"],
                                             body.get("reason", "unspecified"))}

    return api


# --------------------------------------------------------------------------
# Hub API


def make_hub_api(hub: CloudHub, node_token: str | None = None) -> JsonApi:
    """Routes over a hub.  ``node_token`` authenticates hub->node calls when
    nodes register with an HTTP endpoint."""
    api = JsonApi(hub.tokens, hub.clock)

    @api.route("POST", "/mecs", SCOPE_ADMIN)
    def register(req: Request):
        body = req.json()
        endpoint = body.get("endpoint", "")
        link = HttpNodeLink(endpoint, node_token) \
            if endpoint.startswith("http") else None
        record = hub.register_mec(req.token, body["mec_id"], body["tile"],
                                  endpoint, link=link)
        return 200, record.to_obj()

    @api.route("POST", "/mecs/(?P<mec_id>[^/]+)/heartbeat", SCOPE_ADMIN)
    def heartbeat(req: Request):
        hub.heartbeat(req.token, req.match["mec_id"])
        return 200, {"ok": True}

    @api.route("GET", "/mecs", SCOPE_ADMIN)
    def list_mecs(req: Request):
        return 200, {"mecs": [r.to_obj() for r in hub.list_mecs(req.token)]}

    @api.route("GET", "/browse", SCOPE_CONSUME)
    def browse(req: Request):
        roi = frozenset((req.param("roi") or "").split(","))
        datatype = req.param("datatype") or ""
        return 200, {"results": hub.browse(req.token, roi, datatype)}

    @api.route("POST", "/subscriptions", SCOPE_CONSUME)
    def subscribe(req: Request):
        body = req.json()
        sub = hub.subscribe(req.token, body["datatype"], body["tier"],
                            _terms_from_obj(body.get("terms", {})),
                            _roi_from_body(body),
                            destination=body.get("destination", "cloud"))
        return 200, sub.to_obj()

    @api.route("DELETE", "/subscriptions/(?P<sub_id>[^/]+)", SCOPE_CONSUME)
    def unsubscribe(req: Request):
        return 200, {"removed": hub.unsubscribe(req.match["sub_id"])}

    @api.route("GET", "/subscriptions/(?P<sub_id>[^/]+)/billing", SCOPE_CONSUME)
    def billing(req: Request):
        return 200, hub.billing_report(req.match["sub_id"])

    @api.route("POST", "/usage", SCOPE_ADMIN)
    def usage(req: Request):
        report = UsageReport.from_obj(req.json())
        hub.ingest_usage(report.mec_id, report)
        return 200, {"ok": True}

    @api.route("POST", "/bans", SCOPE_ADMIN)
    def bans(req: Request):
        body = req.json()
        acks = hub.propagate_ban(body["image_ref"], body.get("reason", "unspecified"))
        return 200, {"acks": acks}

    @api.route("GET", "/resolve", SCOPE_PRODUCE)
    def resolve(req: Request):
        pos = GeoPosition(float(req.param("lat")), float(req.param("lon")))
        return 200, hub.resolve_serving_mec(req.token, pos).to_obj()

    return api


# --------------------------------------------------------------------------
# Serving


class ApiServer:
    """Threaded HTTP server around a :class:`JsonApi`."""

    def __init__(self, api: JsonApi, host: str = "127.0.0.1", port: int = 0):
        handler = _make_handler(api)
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.httpd.server_address[1]

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ApiServer":
        self._thread = threading.Thread(
            target=lambda: self.httpd.serve_forever(poll_interval=0.05),
            name="mecflow-api", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


def _make_handler(api: JsonApi) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # noqa: D102 - silence stderr
            pass

        def _dispatch(self) -> None:
            parsed = urlparse(self.path)
            length = int(self.headers.get("Content-Length") or 0)
            body = self.rfile.read(length) if length else b""
            request = Request(
                method=self.command,
                path=parsed.path,
                query=parse_qs(parsed.query),
                headers={k.lower(): v for k, v in self.headers.items()},
                body=body,
            )
            status, obj = api.handle(request)
            payload = json.dumps(obj, sort_keys=True).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        do_GET = do_POST = do_DELETE = do_PUT = _dispatch

    return Handler


# --------------------------------------------------------------------------
# HTTP client side (hub -> node, node -> hub)


class RemoteCallError(Exception):
    """Non-2xx response from a peer; carries the wire error code."""

    def __init__(self, status: int, code: str, message: str):
        super().__init__(f"{status} {code}: {message}")
        self.status = status
        self.code = code


def http_json(method: str, url: str, token: str | None = None,
              body: Any | None = None, timeout: float = 10.0) -> Any:
    data = None if body is None else json.dumps(body).encode("utf-8")
    req = urllib.request.Request(url, data=data, method=method)
    req.add_header("Content-Type", "application/json")
    if token:
        req.add_header("Authorization", f"Bearer {token}")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return json.loads(resp.read() or b"{}")
    except urllib.error.HTTPError as exc:
        try:
            obj = json.loads(exc.read() or b"{}")
        except ValueError:
            obj = {}
        raise RemoteCallError(exc.code, obj.get("code", "http-error"),
                              obj.get("message", str(exc))) from exc


def post_raw(url: str, body: bytes, token: str | None = None,
             timeout: float = 10.0) -> Any:
    req = urllib.request.Request(url, data=body, method="POST")
    req.add_header("Content-Type", "application/json")
    if token:
        req.add_header("Authorization", f"Bearer {token}")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return json.loads(resp.read() or b"{}")
    except urllib.error.HTTPError as exc:
        try:
            return json.loads(exc.read() or b"{}")
        except ValueError:
            raise RemoteCallError(exc.code, "http-error", str(exc)) from exc


class HttpNodeLink:
    """Hub-side :class:`~mecflow.cloudhub.NodeLink` over the node's HTTP API."""

    def __init__(self, endpoint: str, token: str | None):
        self.endpoint = endpoint.rstrip("/")
        self.token = token

    def attach(self, consumer_ref: str, datatype: str, tier_name: str,
               terms: ConsumerTerms, roi: frozenset[str], destination: str) -> None:
        http_json("POST", f"{self.endpoint}/consumers", self.token, {
            "consumer_ref": consumer_ref,
            "datatype": datatype,
            "tier": tier_name,
            "terms": {"commercial_use": terms.commercial_use,
                      "redistribution": terms.redistribution},
            "roi": sorted(roi),
            "destination": destination,
        })

    def detach(self, consumer_ref: str) -> bool:
        obj = http_json("DELETE", f"{self.endpoint}/consumers/{consumer_ref}",
                        self.token)
        return bool(obj.get("removed"))

    def apply_ban(self, image_ref: str, reason: str) -> bool:
        obj = http_json("POST", f"{self.endpoint}/bans", self.token,
                        {"image_ref": image_ref, "reason": reason})
        return bool(obj.get("acked"))


class HubSync:
    """Node-side background loop: register, then heartbeat + usage pushes."""

    def __init__(self, node: MecNode, hub_url: str, admin_token: str, *,
                 endpoint: str = "", report_period_ms: int = 1000,
                 heartbeat_period_ms: int = 10_000):
        self.node = node
        self.hub_url = hub_url.rstrip("/")
        self.token = admin_token
        self.endpoint = endpoint
        self.report_period_ms = report_period_ms
        self.heartbeat_period_ms = heartbeat_period_ms
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def register(self) -> None:
        http_json("POST", f"{self.hub_url}/mecs", self.token, {
            "mec_id": self.node.mec_id,
            "tile": self.node.config.tile,
            "endpoint": self.endpoint,
        })

    def push_usage(self) -> None:
        report = self.node.report_usage()
        http_json("POST", f"{self.hub_url}/usage", self.token, report.to_obj())

    def heartbeat(self) -> None:
        http_json("POST", f"{self.hub_url}/mecs/{self.node.mec_id}/heartbeat",
                  self.token)

    def start(self) -> "HubSync":
        self.register()

        def loop() -> None:
            last_report = last_beat = self.node.clock.now_ms()
            while not self._stop.wait(0.05):
                now = self.node.clock.now_ms()
                try:
                    if now - last_report >= self.report_period_ms:
                        self.push_usage()
                        last_report = now
                    if now - last_beat >= self.heartbeat_period_ms:
                        self.heartbeat()
                        last_beat = now
                except (RemoteCallError, OSError):
                    pass  # hub unreachable; retry next period

        self._thread = threading.Thread(target=loop, name="mecflow-hubsync",
                                        daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)


class NodeWorker:
    """Service-mode pump/maintenance loop for one node."""

    def __init__(self, node: MecNode, maintenance_period_ms: int = 1000):
        self.node = node
        self.maintenance_period_ms = maintenance_period_ms
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> "NodeWorker":
        def loop() -> None:
            last = self.node.clock.now_ms()
            while not self._stop.wait(0.02):
                self.node.pump()
                now = self.node.clock.now_ms()
                elapsed = now - last
                if elapsed >= self.maintenance_period_ms:
                    from .lifecycle import PipelineState
                    for inst in self.node.lifecycle.instances():
                        if inst.state is PipelineState.RUNNING:
                            self.node.lifecycle.meter_compute(inst, elapsed)
                    self.node.lifecycle.reap_idle()
                    last = now

        self._thread = threading.Thread(target=loop, name="mecflow-worker",
                                        daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
