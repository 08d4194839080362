"""Localhost TCP page server for live mode.

The image server answers framed ``PageRequest`` messages over a stream
socket, one thread per connection.  Requests are idempotent, so a client may
retry freely.  The requesting host's cache view cannot travel in a
``PageRequest``, so a client registers it in-process, keyed by its socket
address, before it sends.
"""

from __future__ import annotations

import socket
import socketserver
import threading

from .errors import ProtocolError, StreamUnavailable, VmsError
from .stream import ImageServer, serve_page_request
from .wire import PageReply, PageRequest, encode, read_frame, verify_reply_content


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        owner: LivePageServer = self.server.owner  # type: ignore[attr-defined]
        while True:
            try:
                msg = read_frame(self.rfile)
            except ProtocolError:
                return
            if msg is None:
                return
            if not isinstance(msg, PageRequest):
                return  # protocol violation: drop the connection
            view = owner.views.get(self.client_address, frozenset())
            try:
                reply = serve_page_request(owner.image_server, msg, view)
            except VmsError:
                return
            self.wfile.write(encode(reply))
            self.wfile.flush()
            owner.served += 1


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class LivePageServer:
    def __init__(self, image_server: ImageServer, host: str = "127.0.0.1", port: int = 0) -> None:
        self.image_server = image_server
        self.views: dict[tuple[str, int], object] = {}
        self.served = 0
        self._tcp = _TCPServer((host, port), _Handler)
        self._tcp.owner = self  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._tcp.server_address[:2]  # type: ignore[return-value]

    def start(self) -> "LivePageServer":
        self._thread = threading.Thread(target=self._tcp.serve_forever, name="page-server", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._tcp.shutdown()
        self._tcp.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self) -> "LivePageServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


class LivePageClient:
    def __init__(self, server: LivePageServer, timeout: float = 10.0) -> None:
        self.server = server
        try:
            self._sock = socket.create_connection(server.address, timeout=timeout)
        except OSError as exc:
            raise StreamUnavailable(f"cannot reach page server: {exc}") from None
        self._rfile = self._sock.makefile("rb")
        self._lock = threading.Lock()
        self._addr = self._sock.getsockname()[:2]

    def request(self, req: PageRequest, cache_view) -> PageReply:
        with self._lock:
            self.server.views[self._addr] = cache_view
            try:
                self._sock.sendall(encode(req))
                reply = read_frame(self._rfile)
            except OSError as exc:
                raise StreamUnavailable(f"page server connection failed: {exc}") from None
            if not isinstance(reply, PageReply):
                raise StreamUnavailable("page server closed the connection")
        verify_reply_content(reply)
        return reply

    def close(self) -> None:
        self._rfile.close()
        self._sock.close()


def serve_hook(client: LivePageClient):
    """Adapter for ``Cloud.serve_hook``: route image fetches through the socket."""
    def hook(source, request: PageRequest, cache_view) -> PageReply:
        return client.request(request, cache_view)
    return hook


__all__ = ["LivePageServer", "LivePageClient", "serve_hook"]
