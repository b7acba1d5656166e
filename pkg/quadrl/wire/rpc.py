"""
Framed request/response over TCP.

Server: one reader thread per connection, handlers run on a shared worker pool so
pipelined requests may finish out of order; responses carry the request_id.
Client: one socket, a reader thread resolving futures by request_id.
"""
from __future__ import annotations

import itertools
import logging
import socket
import socketserver
import threading
import time
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from typing import Any, Callable, Dict, Optional, Tuple

from quadrl.domain.errors import (
    ErrorCode,
    NotReady,
    ProtocolError,
    RemoteError,
    RpcConnectionError,
    RpcTimeout,
    SimError,
)
from quadrl.wire.protocol import (
    HEADER,
    HEADER_SIZE,
    MAX_FRAME,
    MessageKind,
    decode_body,
    encode,
    encode_error,
    to_kind,
)

log = logging.getLogger(__name__)

Address = Tuple[str, int]
Handler = Callable[[Dict[str, Any]], Optional[Dict[str, Any]]]

# safe to resend after a timeout or reconnect
IDEMPOTENT = frozenset({MessageKind.GET_PARAMS, MessageKind.REPLAY_STATS, MessageKind.HEALTH})

_SEEN_IDS = 65536


def sleep_backoff(i: int, base: float = 0.1, cap: float = 2.0) -> None:
    time.sleep(min(cap, base * 2 ** max(0, int(i))))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    """Up to n bytes; shorter only when the peer closed."""
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


def parse_address(text: str) -> Address:
    host, _, port = str(text).rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be host:port, got {text!r}")
    return host, int(port)


# ──────────────────────────────────────────────────
# Server
# ──────────────────────────────────────────────────

class _Connection:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.write_lock = threading.Lock()
        self._seen: set = set()
        self._order: deque = deque()

    def claim(self, request_id: int) -> bool:
        """False if request_id was already executed on this connection."""
        with self.write_lock:
            if request_id in self._seen:
                return False
            self._seen.add(request_id)
            self._order.append(request_id)
            if len(self._order) > _SEEN_IDS:
                self._seen.discard(self._order.popleft())
            return True

    def send(self, frame: bytes) -> None:
        with self.write_lock:
            try:
                self.sock.sendall(frame)
            except OSError:
                pass


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        rpc: RpcServer = self.server.rpc  # type: ignore[attr-defined]
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn = _Connection(sock)
        rpc._track(sock, True)
        try:
            while not rpc.stopping.is_set():
                header = _recv_exact(sock, HEADER_SIZE)
                if not header:
                    return
                if len(header) < HEADER_SIZE:
                    conn.send(encode_error(0, ErrorCode.SHORT_FRAME, f"header truncated at {len(header)} bytes"))
                    return
                length, raw_kind, request_id = HEADER.unpack(header)
                if length < 5 or length > MAX_FRAME:
                    # the stream cannot be resynchronised after a bad length
                    conn.send(encode_error(request_id, ErrorCode.BAD_LENGTH, f"length field {length} outside [5, {MAX_FRAME}]"))
                    return
                payload = _recv_exact(sock, length - 5)
                if len(payload) < length - 5:
                    conn.send(encode_error(request_id, ErrorCode.SHORT_FRAME, f"incomplete frame: {len(payload)} of {length - 5} payload bytes"))
                    return
                rpc._dispatch(conn, raw_kind, request_id, payload)
        except OSError:
            return
        finally:
            rpc._track(sock, False)


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class RpcServer:
    def __init__(self, handlers: Dict[MessageKind, Handler], address: Address = ("127.0.0.1", 0), role: str = "", workers: int = 8):
        self.role = role
        self.handlers: Dict[MessageKind, Handler] = dict(handlers)
        self.handlers.setdefault(MessageKind.HEALTH, self._default_health)
        self.stopping = threading.Event()
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix=f"rpc-{role or 'srv'}")
        self._srv = _TCPServer(tuple(address), _Handler)
        self._srv.rpc = self  # type: ignore[attr-defined]
        self._socks: set = set()
        self._socks_lock = threading.Lock()
        self._thread: Optional[threading.Thread] = None
        self.requests_served = 0

    @property
    def address(self) -> Address:
        host, port = self._srv.server_address[:2]
        return str(host), int(port)

    def _default_health(self, _body: Dict[str, Any]) -> Dict[str, Any]:
        return {"role": self.role, "version": 0, "train_steps": 0, "episodes": 0, "moving_avg": 0.0}

    def _track(self, sock: socket.socket, add: bool) -> None:
        with self._socks_lock:
            (self._socks.add if add else self._socks.discard)(sock)

    def _dispatch(self, conn: _Connection, raw_kind: int, request_id: int, payload: bytes) -> None:
        try:
            kind = to_kind(raw_kind)
            if kind not in self.handlers or kind == MessageKind.ERROR_RESPONSE:
                raise ProtocolError(ErrorCode.UNKNOWN_KIND, f"{self.role or 'server'} has no endpoint for {kind.name}")
            body = decode_body(kind, payload)
        except ProtocolError as e:
            log.debug("rejecting frame id=%s: %s", request_id, e)
            conn.send(encode_error(request_id, e.code, str(e)))
            return
        if not conn.claim(request_id):
            conn.send(encode_error(request_id, ErrorCode.INVALID_ARGUMENT, f"request_id {request_id} already executed"))
            return
        try:
            self._pool.submit(self._run, conn, kind, request_id, body)
        except RuntimeError:
            conn.send(encode_error(request_id, ErrorCode.HANDLER_ERROR, "server shutting down"))

    def _run(self, conn: _Connection, kind: MessageKind, request_id: int, body: Dict[str, Any]) -> None:
        try:
            out = self.handlers[kind](body) or {}
            frame = encode(kind, request_id, out, response=True)
        except ProtocolError as e:
            frame = encode_error(request_id, e.code, str(e))
        except NotReady as e:
            frame = encode_error(request_id, ErrorCode.NOT_READY, str(e))
        except (SimError, ValueError, KeyError) as e:
            frame = encode_error(request_id, ErrorCode.INVALID_ARGUMENT, str(e))
        except Exception as e:
            log.exception("%s handler for %s failed", self.role or "server", kind.name)
            frame = encode_error(request_id, ErrorCode.HANDLER_ERROR, f"{type(e).__name__}: {e}")
        self.requests_served += 1
        conn.send(frame)

    def start(self) -> "RpcServer":
        self._thread = threading.Thread(target=self._srv.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True, name=f"rpc-accept-{self.role}")
        self._thread.start()
        log.info("%s serving on %s:%d", self.role or "rpc", *self.address)
        return self

    def stop(self) -> None:
        self.stopping.set()
        self._srv.shutdown()
        self._srv.server_close()
        with self._socks_lock:
            socks = list(self._socks)
        for s in socks:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        self._pool.shutdown(wait=False, cancel_futures=True)

    def __enter__(self) -> "RpcServer":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(handlers: Dict[MessageKind, Handler], address: Address, role: str = "", workers: int = 8) -> RpcServer:
    """Bind, start accepting in a background thread, return the running server."""
    return RpcServer(handlers, address, role=role, workers=workers).start()


# ──────────────────────────────────────────────────
# Client
# ──────────────────────────────────────────────────

class RpcClient:
    """
    One connection, many in-flight requests.

    call() retries idempotent kinds (GetParams, ReplayStats, Health) after a
    timeout or lost connection, reconnecting with backoff; mutating kinds are
    sent at most once.
    """

    def __init__(self, address: Address, timeout: float = 5.0, connect_retries: int = 3, retries: int = 2):
        self.address = (str(address[0]), int(address[1]))
        self.timeout = float(timeout)
        self.connect_retries = max(1, int(connect_retries))
        self.retries = max(0, int(retries))
        self._sock: Optional[socket.socket] = None
        self._ids = itertools.count(1)
        self._pending: Dict[int, Tuple[MessageKind, Future]] = {}
        self._lock = threading.Lock()
        self._send_lock = threading.Lock()
        self._reader: Optional[threading.Thread] = None

    # ── connection ──

    def connect(self) -> "RpcClient":
        last: Optional[Exception] = None
        for k in range(self.connect_retries):
            try:
                sock = socket.create_connection(self.address, timeout=self.timeout)
                break
            except OSError as e:
                last = e
                if k < self.connect_retries - 1:
                    sleep_backoff(k)
        else:
            raise RpcConnectionError(f"cannot connect to {self.address[0]}:{self.address[1]} after {self.connect_retries} attempts: {last!r}")
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(None)
        with self._lock:
            self._sock = sock
        self._reader = threading.Thread(target=self._read_loop, args=(sock,), daemon=True, name=f"rpc-client-{self.address[1]}")
        self._reader.start()
        return self

    @property
    def connected(self) -> bool:
        return self._sock is not None

    def close(self) -> None:
        with self._lock:
            sock, self._sock = self._sock, None
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        self._fail_pending(RpcConnectionError("client closed"))

    def __enter__(self) -> "RpcClient":
        if not self.connected:
            self.connect()
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _fail_pending(self, err: Exception) -> None:
        with self._lock:
            pending, self._pending = self._pending, {}
        for _, fut in pending.values():
            if not fut.done():
                fut.set_exception(err)

    def _read_loop(self, sock: socket.socket) -> None:
        reason: Exception = RpcConnectionError(f"connection to {self.address[0]}:{self.address[1]} lost")
        try:
            while True:
                header = _recv_exact(sock, HEADER_SIZE)
                if len(header) < HEADER_SIZE:
                    break
                length, raw_kind, request_id = HEADER.unpack(header)
                if length < 5 or length > MAX_FRAME:
                    reason = RpcConnectionError(f"peer sent bad length {length}")
                    break
                payload = _recv_exact(sock, length - 5)
                if len(payload) < length - 5:
                    break
                self._resolve(raw_kind, request_id, payload)
        except OSError as e:
            reason = RpcConnectionError(f"connection to {self.address[0]}:{self.address[1]} lost: {e}")
        with self._lock:
            if self._sock is sock:
                self._sock = None
        try:
            sock.close()
        except OSError:
            pass
        self._fail_pending(reason)

    def _resolve(self, raw_kind: int, request_id: int, payload: bytes) -> None:
        with self._lock:
            entry = self._pending.pop(request_id, None)
        if entry is None:
            log.debug("dropping response for unknown request_id %d", request_id)
            return
        kind, fut = entry
        try:
            got = to_kind(raw_kind)
            if got == MessageKind.ERROR_RESPONSE:
                body = decode_body(got, payload, response=True)
                fut.set_exception(RemoteError(body["code"], body["message"]))
            elif got != kind:
                fut.set_exception(ProtocolError(ErrorCode.SCHEMA_MISMATCH, f"response kind {got.name} for {kind.name} request"))
            else:
                fut.set_result(decode_body(got, payload, response=True))
        except ProtocolError as e:
            fut.set_exception(e)

    # ── requests ──

    def submit(self, kind: MessageKind, body: Optional[Dict[str, Any]] = None) -> Future:
        kind = MessageKind(kind)
        if not self.connected:
            self.connect()
        request_id = next(self._ids) & 0xFFFFFFFF
        frame = encode(kind, request_id, body or {})
        fut: Future = Future()
        with self._lock:
            sock = self._sock
            if sock is None:
                raise RpcConnectionError(f"not connected to {self.address[0]}:{self.address[1]}")
            self._pending[request_id] = (kind, fut)
        try:
            with self._send_lock:
                sock.sendall(frame)
        except OSError as e:
            with self._lock:
                self._pending.pop(request_id, None)
            self.close()
            raise RpcConnectionError(f"send to {self.address[0]}:{self.address[1]} failed: {e}") from None
        fut.request_id = request_id  # type: ignore[attr-defined]
        return fut

    def _wait(self, fut: Future, timeout: float, kind: MessageKind) -> Dict[str, Any]:
        try:
            return fut.result(timeout=timeout)
        except FutureTimeout:
            with self._lock:
                self._pending.pop(getattr(fut, "request_id", -1), None)
            raise RpcTimeout(f"{kind.name} to {self.address[0]}:{self.address[1]} timed out after {timeout:.3f}s") from None

    def call(self, kind: MessageKind, body: Optional[Dict[str, Any]] = None, timeout: Optional[float] = None) -> Dict[str, Any]:
        kind = MessageKind(kind)
        timeout = self.timeout if timeout is None else float(timeout)
        attempts = 1 + (self.retries if kind in IDEMPOTENT else 0)
        last: Optional[Exception] = None
        for k in range(attempts):
            try:
                return self._wait(self.submit(kind, body), timeout, kind)
            except (RpcConnectionError, RpcTimeout) as e:
                last = e
                if k < attempts - 1:
                    log.warning("retrying %s after %s", kind.name, e)
                    self.close()
                    sleep_backoff(k)
        assert last is not None
        raise last


def call(address: Address, kind: MessageKind, body: Optional[Dict[str, Any]] = None, timeout: float = 5.0) -> Dict[str, Any]:
    """One-off request on a fresh connection."""
    with RpcClient(address, timeout=timeout, connect_retries=1, retries=0) as client:
        return client.call(kind, body, timeout=timeout)
