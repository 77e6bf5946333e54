"""Loopback HTTP front end for :class:`IdentityProvider`.

Requests are handled one at a time (the IdP is a single state machine).
The browser login step is collapsed into HTTP Basic credentials on
``/authorize``; supplying them counts as granting consent.
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from urllib.parse import parse_qsl, urlsplit

from .errors import SoapError
from .idp import IdentityProvider

log = logging.getLogger(__name__)

DISCOVERY_PATH = "/.well-known/openid-configuration"


def _basic_credentials(header: str | None) -> tuple[str, str] | None:
    if not header or not header.startswith("Basic "):
        return None
    try:
        user, _, password = base64.b64decode(header[6:], validate=True).decode().partition(":")
    except (binascii.Error, UnicodeDecodeError):
        return None
    return user, password


class _Handler(BaseHTTPRequestHandler):
    server: "IdpHTTPServer"

    def log_message(self, fmt: str, *args) -> None:  # route through logging, not stderr
        log.debug("%s " + fmt, self.address_string(), *args)

    def _json(self, status: int, body: dict, headers: dict[str, str] | None = None) -> None:
        data = json.dumps(body, sort_keys=True).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.send_header("Cache-Control", "no-store")
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(data)

    def _error(self, exc: SoapError) -> None:
        if exc.code == "auth-failed":
            self._json(401, {"error": exc.code, "error_description": exc.detail},
                       {"WWW-Authenticate": 'Basic realm="idp"'})
        else:
            self._json(400, {"error": exc.code, "error_description": exc.detail})

    def do_GET(self) -> None:
        idp = self.server.idp
        url = urlsplit(self.path)
        if url.path == DISCOVERY_PATH:
            return self._json(200, idp.discovery_document())
        if url.path == "/jwks":
            return self._json(200, idp.jwks())
        if url.path == "/authorize":
            params = dict(parse_qsl(url.query, keep_blank_values=True))
            credentials = _basic_credentials(self.headers.get("Authorization"))
            try:
                response = idp.handle_authorization_request(params, credentials=credentials, consent="grant")
            except SoapError as exc:
                return self._error(exc)
            self.send_response(302)
            self.send_header("Location", response.location)
            self.send_header("Content-Length", "0")
            self.end_headers()
            return None
        self._json(404, {"error": "not-found"})

    def do_POST(self) -> None:
        if urlsplit(self.path).path != "/token":
            return self._json(404, {"error": "not-found"})
        length = int(self.headers.get("Content-Length") or 0)
        form = dict(parse_qsl(self.rfile.read(length).decode(), keep_blank_values=True))
        try:
            self._json(200, self.server.idp.token_endpoint(form))
        except SoapError as exc:
            self._error(exc)


class IdpHTTPServer(HTTPServer):
    """Binds first, so an IdP built here carries the real port in its issuer."""

    def __init__(self, idp: IdentityProvider | None = None, port: int = 0, host: str = "127.0.0.1",
                 **idp_kwargs):
        super().__init__((host, port), _Handler)
        self.idp = idp if idp is not None else IdentityProvider(self.base_url, **idp_kwargs)

    @property
    def base_url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"


def serve_in_thread(server: IdpHTTPServer) -> threading.Thread:
    thread = threading.Thread(target=server.serve_forever, name="idp-httpd", daemon=True)
    thread.start()
    return thread
