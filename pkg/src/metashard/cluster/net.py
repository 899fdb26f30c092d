"""Threaded TCP frame server and a small persistent-connection RPC client."""
from __future__ import annotations

import logging
import socket
import socketserver
import threading

from metashard.cluster import wire
from metashard.errors import ConnectivityError, ProtocolError

logger = logging.getLogger(__name__)


class Connection:
    """Server-side view of one client socket; ``send`` is thread-safe."""

    def __init__(self, sock: socket.socket, peer) -> None:
        self.sock = sock
        self.peer = peer
        self._lock = threading.Lock()
        self.closed = False
        self.state: dict = {}

    def send(self, data: bytes) -> bool:
        with self._lock:
            if self.closed:
                return False
            try:
                self.sock.sendall(data)
                return True
            except OSError:
                self.closed = True
                return False


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        server: FrameServer = self.server.owner  # type: ignore[attr-defined]
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn = Connection(sock, self.client_address)
        try:
            while not server.stopping:
                payload = wire.read_frame(sock)
                if payload is None:
                    break
                server.dispatch(payload, conn)
        except (OSError, ProtocolError) as exc:
            logger.debug("connection from %s ended: %s", self.client_address, exc)
        finally:
            conn.closed = True
            try:
                server.on_disconnect(conn)
            finally:
                try:
                    sock.close()
                except OSError:
                    pass


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class FrameServer:
    """Accepts connections and hands every frame to :meth:`dispatch`.

    Subclasses override ``dispatch(payload, conn)`` and optionally
    ``on_disconnect(conn)``. One thread serves each connection.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0) -> None:
        self._srv = _TCPServer((host, port), _Handler)
        self._srv.owner = self
        self.stopping = False
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self._srv.server_address[:2]
        return wire.format_address(host, port)

    def start(self) -> "FrameServer":
        self._thread = threading.Thread(target=self._srv.serve_forever,
                                        kwargs={"poll_interval": 0.1}, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._srv.serve_forever(poll_interval=0.1)

    def stop(self) -> None:
        self.stopping = True
        self._srv.shutdown()
        self._srv.server_close()

    def dispatch(self, payload: bytes, conn: Connection) -> None:  # pragma: no cover
        raise NotImplementedError

    def on_disconnect(self, conn: Connection) -> None:
        pass


def connect(addr: str, timeout: float = 2.0) -> socket.socket:
    host, port = wire.parse_address(addr)
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise ConnectivityError(f"cannot reach {addr}: {exc}") from exc
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


class RpcClient:
    """Request/response over one persistent connection, serialized by a lock.

    A broken connection is re-opened once per call before giving up.
    """

    def __init__(self, addr: str, timeout: float = 5.0) -> None:
        self.addr = addr
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def _ensure(self) -> socket.socket:
        if self._sock is None:
            self._sock = connect(self.addr)
        return self._sock

    def call(self, msg: dict, blobs=(), timeout: float | None = None,
             retry: bool = True) -> tuple[dict, list[bytes]]:
        """Send ``msg`` and wait for the reply.

        ``retry=False`` suits non-idempotent requests: a failure after the
        request may have been delivered is reported instead of resent.
        """
        data = wire.encode_control(msg, blobs)
        with self._lock:
            for attempt in ((0, 1) if retry else (1,)):
                try:
                    sock = self._ensure()
                    sock.settimeout(timeout if timeout is not None else self.timeout)
                    sock.sendall(data)
                    payload = wire.read_frame(sock)
                    if payload is None:
                        raise ConnectionResetError("peer closed the connection")
                    return wire.decode_control(payload)
                except (OSError, ProtocolError) as exc:
                    self._drop()
                    if attempt == 1 or isinstance(exc, socket.timeout):
                        raise ConnectivityError(f"rpc to {self.addr} failed: {exc}") from exc
        raise AssertionError("unreachable")

    def _drop(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def close(self) -> None:
        with self._lock:
            self._drop()


def reply(conn: Connection, msg: dict, blobs=()) -> None:
    conn.send(wire.encode_control(msg, blobs))
