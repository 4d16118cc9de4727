"""Live feed server: a duplex stream of length-delimited JSON text frames
over TCP, one frame per decision tick plus message/metrics events, and
inbound operator commands.

Frame wire format: ``<decimal payload length>:<payload json>\\n``.
Outbound kinds: hello, snapshot, message_event, metrics_update, ack, bye.
Inbound kind: operator_command. Schema documented in docs/feed_protocol.md
and versioned via the hello frame.
"""

from __future__ import annotations

import json
import queue
import socket
import threading
from typing import Optional

FEED_SCHEMA = "cavlang-feed/1"
MAX_FRAME_BYTES = 1 << 20


def encode_frame(obj: dict) -> bytes:
    payload = json.dumps(obj, separators=(",", ":"), sort_keys=True).encode("utf-8")
    return str(len(payload)).encode("ascii") + b":" + payload + b"\n"


class FrameDecoder:
    """Incremental decoder for the length-delimited frame stream."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[dict]:
        self._buf.extend(data)
        frames = []
        while True:
            sep = self._buf.find(b":")
            if sep < 0:
                if len(self._buf) > 20:
                    raise ValueError("frame header too long")
                break
            length = int(self._buf[:sep])
            if length > MAX_FRAME_BYTES:
                raise ValueError("frame exceeds size limit")
            end = sep + 1 + length
            if len(self._buf) < end + 1:
                break
            payload = bytes(self._buf[sep + 1:end])
            if self._buf[end:end + 1] != b"\n":
                raise ValueError("missing frame terminator")
            del self._buf[:end + 1]
            frames.append(json.loads(payload.decode("utf-8")))
        return frames


class FeedServer:
    """Accepts console clients, fans out frames, queues operator commands.

    The server only ever reads immutable snapshots handed to broadcast();
    commands are consumed by the harness between decision ticks.
    """

    def __init__(self, port: int, host: str = "127.0.0.1",
                 hello_extra: Optional[dict] = None):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(8)
        self.port = self._sock.getsockname()[1]
        self._hello_extra = hello_extra or {}
        self._clients: list[socket.socket] = []
        self._lock = threading.Lock()
        self._commands: "queue.Queue[tuple[socket.socket, dict]]" = queue.Queue()
        self._closing = False
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._closing:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            with self._lock:
                self._clients.append(conn)
            hello = {"v": 1, "kind": "hello", "schema": FEED_SCHEMA,
                     **self._hello_extra}
            self._send(conn, hello)
            threading.Thread(target=self._client_loop, args=(conn,),
                             daemon=True).start()

    def _client_loop(self, conn: socket.socket) -> None:
        decoder = FrameDecoder()
        while not self._closing:
            try:
                data = conn.recv(4096)
            except OSError:
                break
            if not data:
                break
            try:
                frames = decoder.feed(data)
            except (ValueError, json.JSONDecodeError):
                self._send(conn, {"v": 1, "kind": "ack", "ok": False,
                                  "reason": "malformed frame"})
                continue
            for frame in frames:
                self._commands.put((conn, frame))
        with self._lock:
            if conn in self._clients:
                self._clients.remove(conn)

    def _send(self, conn: socket.socket, obj: dict) -> bool:
        try:
            conn.sendall(encode_frame(obj))
            return True
        except OSError:
            return False

    def broadcast(self, obj: dict) -> None:
        with self._lock:
            clients = list(self._clients)
        dead = [c for c in clients if not self._send(c, obj)]
        if dead:
            with self._lock:
                for c in dead:
                    if c in self._clients:
                        self._clients.remove(c)

    def send_to(self, conn: socket.socket, obj: dict) -> None:
        self._send(conn, obj)

    def poll_commands(self) -> list[tuple[socket.socket, dict]]:
        out = []
        while True:
            try:
                out.append(self._commands.get_nowait())
            except queue.Empty:
                return out

    def close(self) -> None:
        self._closing = True
        self.broadcast({"v": 1, "kind": "bye"})
        with self._lock:
            for c in self._clients:
                try:
                    c.close()
                except OSError:
                    pass
            self._clients.clear()
        try:
            self._sock.close()
        except OSError:
            pass
