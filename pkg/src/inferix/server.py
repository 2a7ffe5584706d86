"""Streaming server: broadcasts generated frames over the framed protocol and
accepts asynchronous prompt updates, with an optional browser-reachable
WebSocket bridge carrying the identical messages.

One producer (the engine sink) fans out to per-client bounded queues; each
client has its own writer thread, so a slow or dead client never stalls
generation. The reader thread forwards PROMPT_UPDATE messages to the engine
and answers rejections with an ERROR message on the same stream.
"""

from __future__ import annotations

import base64
import hashlib
import json
import socket
import struct
import threading
from collections import deque

from pathlib import Path

from . import protocol
from .errors import ProtocolError

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

# static assets for the browser console, served under /console on the
# bridge listener; present in a source checkout, absent in a bare install
_DEFAULT_CONSOLE_ROOT = Path(__file__).resolve().parents[2] / "frontend"

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json",
    ".map": "application/json",
}


class ClientQueue:
    """Bounded queue: drop-oldest FRAME/METRICS on overflow, never END/ERROR."""

    _DROPPABLE = (protocol.FRAME, protocol.METRICS)

    def __init__(self, capacity: int = 256):
        self.capacity = capacity
        self._items: deque = deque()
        self._cond = threading.Condition()
        self.dropped = 0
        self._closed = False

    def put(self, msg):
        with self._cond:
            if self._closed:
                return
            if len(self._items) >= self.capacity:
                for i, old in enumerate(self._items):
                    if old.kind in self._DROPPABLE:
                        del self._items[i]
                        self.dropped += 1
                        break
                # if nothing was droppable the queue grows past capacity:
                # critical messages are never lost
            self._items.append(msg)
            self._cond.notify()

    def get(self):
        """Blocks; returns None once closed and drained."""
        with self._cond:
            while not self._items and not self._closed:
                self._cond.wait()
            if self._items:
                return self._items.popleft()
            return None

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()


# -- transports --------------------------------------------------------------


class RawTransport:
    def __init__(self, sock: socket.socket):
        self._sock = sock

    def send_bytes(self, data: bytes):
        self._sock.sendall(data)

    def recv_bytes(self):
        data = self._sock.recv(65536)
        return data or None

    def close(self):
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class WebSocketTransport:
    """Minimal RFC 6455 server-side transport; binary frames only.

    Each wire message is sent as one binary WebSocket frame, so payloads are
    preserved byte-exactly and the browser sees message boundaries for free.
    """

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._send_lock = threading.Lock()
        self._upgraded = False

    def handshake(self, console_root=None) -> bool:
        """Upgrade to WebSocket, or answer a plain HTTP GET for the console.

        Returns True once upgraded; False if the request was served as a
        static-asset fetch and the connection should be closed.
        """
        data = b""
        while b"\r\n\r\n" not in data:
            chunk = self._sock.recv(4096)
            if not chunk:
                raise ProtocolError("connection closed during handshake")
            data += chunk
            if len(data) > 65536:
                raise ProtocolError("oversized handshake request")
        key = None
        for line in data.split(b"\r\n"):
            if line.lower().startswith(b"sec-websocket-key:"):
                key = line.split(b":", 1)[1].strip().decode()
        if key is None:
            self._serve_static(data, console_root)
            return False
        accept = base64.b64encode(
            hashlib.sha1((key + _WS_GUID).encode()).digest()
        ).decode()
        self._sock.sendall(
            (
                "HTTP/1.1 101 Switching Protocols\r\n"
                "Upgrade: websocket\r\n"
                "Connection: Upgrade\r\n"
                f"Sec-WebSocket-Accept: {accept}\r\n\r\n"
            ).encode()
        )
        self._upgraded = True
        return True

    def _serve_static(self, request: bytes, console_root):
        root = Path(console_root) if console_root else _DEFAULT_CONSOLE_ROOT
        try:
            method, target, _ = request.split(b"\r\n", 1)[0].split(b" ", 2)
        except ValueError:
            raise ProtocolError("malformed http request")
        target = target.split(b"?", 1)[0].decode("ascii", "replace")
        status, body, ctype = 404, b"not found", "text/plain"
        if method == b"GET" and root.is_dir() and (
                target == "/console" or target.startswith("/console/")):
            rel = target[len("/console"):].lstrip("/") or "index.html"
            path = (root / rel).resolve()
            # resolve() collapses any ../ tricks; stay inside the root
            if path.is_relative_to(root.resolve()) and path.is_file():
                body = path.read_bytes()
                ctype = _CONTENT_TYPES.get(path.suffix, "application/octet-stream")
                status = 200
        reason = {200: "OK", 404: "Not Found"}[status]
        self._sock.sendall(
            (f"HTTP/1.1 {status} {reason}\r\n"
             f"Content-Type: {ctype}\r\n"
             f"Content-Length: {len(body)}\r\n"
             "Connection: close\r\n\r\n").encode() + body
        )

    def _send_frame(self, opcode: int, payload: bytes):
        head = bytes([0x80 | opcode])
        n = len(payload)
        if n < 126:
            head += bytes([n])
        elif n < 1 << 16:
            head += bytes([126]) + struct.pack(">H", n)
        else:
            head += bytes([127]) + struct.pack(">Q", n)
        with self._send_lock:
            self._sock.sendall(head + payload)

    def send_bytes(self, data: bytes):
        self._send_frame(0x2, data)

    def _read_exact(self, n: int) -> bytes:
        out = b""
        while len(out) < n:
            chunk = self._sock.recv(n - len(out))
            if not chunk:
                raise ConnectionError("websocket closed mid-frame")
            out += chunk
        return out

    def recv_bytes(self):
        """Returns the payload of the next binary frame, or None on close."""
        while True:
            try:
                b0, b1 = self._read_exact(2)
            except (ConnectionError, OSError):
                return None
            opcode = b0 & 0x0F
            masked = b1 & 0x80
            n = b1 & 0x7F
            if n == 126:
                (n,) = struct.unpack(">H", self._read_exact(2))
            elif n == 127:
                (n,) = struct.unpack(">Q", self._read_exact(8))
            mask = self._read_exact(4) if masked else b"\x00" * 4
            payload = self._read_exact(n)
            if masked:
                payload = bytes(c ^ mask[i % 4] for i, c in enumerate(payload))
            if opcode == 0x8:  # close
                return None
            if opcode == 0x9:  # ping -> pong
                self._send_frame(0xA, payload)
                continue
            if opcode in (0x1, 0x2, 0x0):
                return payload

    def close(self):
        if self._upgraded:
            try:
                self._send_frame(0x8, b"")
            except OSError:
                pass
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


# -- server ------------------------------------------------------------------


class _Client:
    def __init__(self, server: "StreamServer", transport):
        self.server = server
        self.transport = transport
        self.queue = ClientQueue(server.client_queue)
        self.writer = threading.Thread(target=self._write_loop, daemon=True)
        self.reader = threading.Thread(target=self._read_loop, daemon=True)

    def start(self):
        self.queue.put(protocol.hello_message(self.server.hello_summary()))
        self.writer.start()
        self.reader.start()

    def _write_loop(self):
        while True:
            msg = self.queue.get()
            if msg is None:
                break
            try:
                self.transport.send_bytes(protocol.encode_message(msg))
            except OSError:
                break
            if msg.kind == protocol.END:
                break
        self.server._drop_client(self)

    def _read_loop(self):
        decoder = protocol.StreamDecoder()
        while True:
            try:
                data = self.transport.recv_bytes()
            except OSError:
                return
            if data is None:
                return
            try:
                decoder.feed(data)
                for msg in decoder:
                    self._handle(msg)
            except ProtocolError:
                return  # corrupted control stream: drop this client

    def _handle(self, msg):
        if msg.kind != protocol.PROMPT_UPDATE:
            return
        upd = protocol.PromptUpdatePayload.decode(msg.payload)
        accepted = self.server.engine.apply_prompt_update(
            upd.effective_chunk, upd.text)
        if not accepted:
            self.queue.put(protocol.error_message(
                f"retroactive: chunk {upd.effective_chunk} already generating "
                "or generated"))

    def close(self):
        self.queue.close()
        self.transport.close()


class StreamServer:
    """serve() handle: owns the listening sockets and the client set."""

    def __init__(self, engine, host: str = "127.0.0.1", port: int = 0,
                 client_queue: int = 256, profiler=None, console_root=None):
        self.engine = engine
        self.client_queue = client_queue
        self.profiler = profiler
        self.console_root = console_root
        self._listen = socket.create_server((host, port))
        self.address = self._listen.getsockname()
        self._clients: list[_Client] = []
        self._lock = threading.Lock()
        self._closing = False
        self._web_listen = None
        self.web_address = None
        self._threads = [
            threading.Thread(target=self._accept_loop,
                             args=(self._listen, RawTransport), daemon=True)
        ]

    def start(self):
        for t in self._threads:
            if not t.is_alive():
                t.start()
        return self

    def hello_summary(self) -> dict:
        cfg = self.engine.model.config
        h, w = cfg.frame_shape
        return {
            "block_len": cfg.block_len,
            "frame_width": w,
            "frame_height": h,
            "layers": cfg.layers,
            "heads": cfg.heads,
        }

    def _accept_loop(self, listener, transport_cls):
        while True:
            try:
                sock, _addr = listener.accept()
            except OSError:
                return  # listener closed
            threading.Thread(target=self._admit, args=(sock, transport_cls),
                             daemon=True).start()

    def _admit(self, sock, transport_cls):
        transport = transport_cls(sock)
        try:
            if isinstance(transport, WebSocketTransport):
                if not transport.handshake(self.console_root):
                    transport.close()
                    return
        except (ProtocolError, OSError):
            transport.close()
            return
        client = _Client(self, transport)
        with self._lock:
            if self._closing:
                transport.close()
                return
            self._clients.append(client)
        client.start()

    def _drop_client(self, client):
        with self._lock:
            if client in self._clients:
                self._clients.remove(client)
        client.close()

    def broadcast(self, msg):
        with self._lock:
            clients = list(self._clients)
        for c in clients:
            c.queue.put(msg)

    def sink(self, block):
        """Engine sink: fan a generated block out as FRAME messages."""
        for i, frame in enumerate(block.frames):
            h, w = frame.shape
            payload = protocol.FramePayload(
                chunk_index=block.chunk_index, frame_index=i,
                width=w, height=h, pixels=frame.tobytes())
            self.broadcast(protocol.frame_message(payload))
        if self.profiler is not None:
            self.broadcast(protocol.metrics_message(
                self.profiler.report().to_dict()))

    def run_generation(self, request, extra_sinks=()):
        """Generate to completion, streaming to all clients, then END."""
        try:
            blocks = self.engine.generate(request,
                                          sinks=[self.sink, *extra_sinks])
        finally:
            self.broadcast(protocol.end_message())
        return blocks

    def bridge(self, host: str = "127.0.0.1", port: int = 0):
        """Open the browser-compatible WebSocket endpoint."""
        self._web_listen = socket.create_server((host, port))
        self.web_address = self._web_listen.getsockname()
        t = threading.Thread(target=self._accept_loop,
                             args=(self._web_listen, WebSocketTransport),
                             daemon=True)
        self._threads.append(t)
        t.start()
        return self.web_address

    def stop(self):
        with self._lock:
            self._closing = True
            clients = list(self._clients)
        self._listen.close()
        if self._web_listen is not None:
            self._web_listen.close()
        for c in clients:
            # let the writer drain anything already queued (END included)
            c.queue.close()
            if c.writer.is_alive() and c.writer is not threading.current_thread():
                c.writer.join(timeout=5.0)
            self._drop_client(c)


def serve(engine, host: str = "127.0.0.1", port: int = 0,
          client_queue: int = 256, profiler=None) -> StreamServer:
    return StreamServer(engine, host, port, client_queue, profiler).start()


def bridge_endpoint(server: StreamServer, host: str = "127.0.0.1",
                    port: int = 0):
    return server.bridge(host, port)


# -- loopback client (used by the CLI --verify path and tests) ---------------


class StreamClient:
    """Blocking convenience client for the raw transport."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._decoder = protocol.StreamDecoder()

    def send(self, msg):
        self._sock.sendall(protocol.encode_message(msg))

    def recv(self):
        """Next message, or None when the server closes the connection."""
        while True:
            for msg in self._decoder:
                return msg
            data = self._sock.recv(65536)
            if not data:
                return None
            self._decoder.feed(data)

    def messages_until_end(self):
        out = []
        while True:
            msg = self.recv()
            if msg is None:
                return out
            out.append(msg)
            if msg.kind == protocol.END:
                return out

    def close(self):
        self._sock.close()


def parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ProtocolError(f"bad endpoint {text!r}, expected host:port")
    return host, int(port)


def summary_from_hello(msg) -> dict:
    return json.loads(msg.payload.decode())
