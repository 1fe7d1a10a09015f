"""Cloud tier: frame codec, TCP sink, JSON-lines long-term log, trend analytics.

Wire format: a 4-byte big-endian length ``N`` followed by ``N`` bytes of
canonical UTF-8 JSON ``{"event":..,"session":..,"seq":..,"payload":..}``
(keys in that order, no insignificant whitespace).
"""

from __future__ import annotations

import json
import logging
import os
import socket
import socketserver
import statistics
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

from .errors import (
    FrameTooLarge,
    InsufficientDataError,
    PersistError,
    SchemaError,
    StartupError,
    TruncatedError,
)

log = logging.getLogger(__name__)

EVENTS = frozenset({"summary", "alert", "raw", "hello", "ack"})
MAX_FRAME_BYTES = 16 * 1024 * 1024
_LEN = struct.Struct(">I")


@dataclass(frozen=True)
class CloudFrame:
    event: str
    session: str
    seq: int
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.event not in EVENTS:
            raise SchemaError(f"unknown event {self.event!r}")
        if not isinstance(self.session, str):
            raise SchemaError("session must be a string")
        if isinstance(self.seq, bool) or not isinstance(self.seq, int) or self.seq < 0:
            raise SchemaError(f"seq must be a non-negative integer, got {self.seq!r}")
        if not isinstance(self.payload, dict):
            raise SchemaError("payload must be an object")

    def to_json(self) -> dict:
        return {"event": self.event, "session": self.session, "seq": self.seq, "payload": self.payload}


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def frame_body(frame: CloudFrame) -> bytes:
    return canonical_json(frame.to_json()).encode("utf-8")


def encode_frame(frame: CloudFrame) -> bytes:
    body = frame_body(frame)
    if len(body) > MAX_FRAME_BYTES:
        raise FrameTooLarge(f"frame body of {len(body)} bytes exceeds {MAX_FRAME_BYTES}")
    return _LEN.pack(len(body)) + body


def frame_from_json(doc: Any) -> CloudFrame:
    if not isinstance(doc, dict) or set(doc) != {"event", "session", "seq", "payload"}:
        raise SchemaError("frame must have exactly the keys event, session, seq, payload")
    return CloudFrame(doc["event"], doc["session"], doc["seq"], doc["payload"])


def decode_body(body: bytes) -> CloudFrame:
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"frame body is not JSON: {exc}") from None
    return frame_from_json(doc)


def decode_frame(data: bytes) -> CloudFrame:
    """Decode exactly one frame."""
    if len(data) < _LEN.size:
        raise TruncatedError(f"{len(data)} bytes is shorter than the length prefix")
    (n,) = _LEN.unpack_from(data)
    if n > MAX_FRAME_BYTES:
        raise FrameTooLarge(f"declared body of {n} bytes exceeds {MAX_FRAME_BYTES}")
    body = data[_LEN.size :]
    if len(body) < n:
        raise TruncatedError(f"body has {len(body)} of {n} bytes")
    if len(body) > n:
        raise SchemaError(f"{len(body) - n} trailing bytes after frame")
    return decode_body(body)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> CloudFrame | None:
    """Read one frame from a socket; ``None`` on clean EOF between frames."""
    head = _recv_exact(sock, _LEN.size)
    if not head:
        return None
    if len(head) < _LEN.size:
        raise TruncatedError("connection closed inside a length prefix")
    (n,) = _LEN.unpack(head)
    if n > MAX_FRAME_BYTES:
        raise FrameTooLarge(f"declared body of {n} bytes exceeds {MAX_FRAME_BYTES}")
    body = _recv_exact(sock, n)
    if len(body) < n:
        raise TruncatedError(f"connection closed after {len(body)} of {n} body bytes")
    return decode_body(body)


def ack_for(frame: CloudFrame) -> CloudFrame:
    return CloudFrame("ack", frame.session, frame.seq, {})


# --- long-term storage -------------------------------------------------------


class LongTermLog:
    """Append-only JSON-lines log, one canonical frame per line.

    A torn final line (no trailing LF, left by a crash mid-write) is
    truncated away when the log is opened.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.touch(exist_ok=True)
        with open(self.path, "rb+") as fh:
            data = fh.read()
            keep = data.rfind(b"\n") + 1
            if keep != len(data):
                log.warning("truncating torn tail of %s (%d bytes)", self.path, len(data) - keep)
                fh.truncate(keep)
        self._count = data[:keep].count(b"\n")

    @property
    def count(self) -> int:
        return self._count

    def __len__(self) -> int:
        return self._count

    def persist(self, frame: CloudFrame) -> int:
        line = frame_body(frame) + b"\n"
        with self._lock:
            try:
                with open(self.path, "ab") as fh:
                    fh.write(line)
                    fh.flush()
                    os.fsync(fh.fileno())
            except OSError as exc:
                raise PersistError(f"cannot append to {self.path}: {exc}") from exc
            index = self._count
            self._count += 1
        return index

    def records(self) -> Iterator[CloudFrame]:
        with open(self.path, "rb") as fh:
            for line in fh:
                if line.endswith(b"\n"):
                    yield decode_body(line[:-1])


def persist(log_: LongTermLog, frame: CloudFrame) -> int:
    return log_.persist(frame)


# --- sink service ------------------------------------------------------------


class _SinkHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sink: "SinkServer" = self.server.sink  # type: ignore[attr-defined]
        sock: socket.socket = self.request
        last_seq = -1
        while True:
            try:
                frame = read_frame(sock)
            except (SchemaError, TruncatedError, FrameTooLarge) as exc:
                self._error(sock, "", last_seq, str(exc))
                return
            except OSError:
                return
            if frame is None:
                return
            if frame.seq <= last_seq:
                self._error(sock, frame.session, frame.seq, f"seq {frame.seq} not above {last_seq}")
                return
            try:
                sink.log.persist(frame)
            except PersistError as exc:
                self._error(sock, frame.session, frame.seq, str(exc))
                return
            last_seq = frame.seq
            sock.sendall(encode_frame(ack_for(frame)))

    @staticmethod
    def _error(sock: socket.socket, session: str, seq: int, message: str) -> None:
        err = CloudFrame("ack", session, max(seq, 0), {"error": message})
        try:
            sock.sendall(encode_frame(err))
        except OSError:
            pass


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class SinkServer:
    """A running sink. Use as a context manager or call ``close()``."""

    def __init__(self, host: str, port: int, log_: LongTermLog):
        self.log = log_
        try:
            self._server = _TCPServer((host, port), _SinkHandler)
        except OSError as exc:
            raise StartupError(f"cannot bind {host}:{port}: {exc}") from exc
        self._server.sink = self  # type: ignore[attr-defined]
        self._thread = threading.Thread(target=self._server.serve_forever, name="cloud-sink", daemon=True)
        self._thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def parse_endpoint(endpoint: str | tuple[str, int]) -> tuple[str, int]:
    if isinstance(endpoint, tuple):
        return endpoint
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise StartupError(f"bad endpoint {endpoint!r}, expected host:port")
    return host, int(port)


def serve(listen_endpoint: str | tuple[str, int], log_: LongTermLog) -> SinkServer:
    host, port = parse_endpoint(listen_endpoint)
    return SinkServer(host, port, log_)


class CloudClient:
    """Blocking client: send a frame, wait for its ack."""

    def __init__(self, endpoint: str | tuple[str, int], timeout: float = 10.0):
        host, port = parse_endpoint(endpoint)
        self._sock = socket.create_connection((host, port), timeout=timeout)

    def send(self, frame: CloudFrame) -> CloudFrame:
        self._sock.sendall(encode_frame(frame))
        ack = read_frame(self._sock)
        if ack is None:
            raise ConnectionError("sink closed the connection")
        return ack

    def send_raw(self, data: bytes) -> CloudFrame | None:
        self._sock.sendall(data)
        return read_frame(self._sock)

    def close(self) -> None:
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --- analytics -----------------------------------------------------------------


@dataclass(frozen=True)
class TemporalTrend:
    device_id: str
    n_sessions: int
    slope_hz_per_session: float
    mean_freq_hz: float


def session_means(frames: Iterable[CloudFrame], device_id: str) -> list[float]:
    """Per-session mean tap rate (mean over rounds) in log order."""
    out = []
    for f in frames:
        if f.event != "summary" or f.payload.get("device_id") != device_id:
            continue
        rounds = f.payload.get("rounds", [])
        out.append(statistics.fmean(r["mean_freq_hz"] for r in rounds) if rounds else 0.0)
    return out


def ols_slope(values: list[float]) -> float:
    n = len(values)
    xbar = (n - 1) / 2.0
    ybar = statistics.fmean(values)
    num = sum((i - xbar) * (y - ybar) for i, y in enumerate(values))
    den = sum((i - xbar) ** 2 for i in range(n))
    return num / den


def temporal_trend(log_: LongTermLog | Iterable[CloudFrame], device_id: str) -> TemporalTrend:
    frames = log_.records() if isinstance(log_, LongTermLog) else log_
    means = session_means(frames, device_id)
    if len(means) < 2:
        raise InsufficientDataError(f"{device_id}: {len(means)} session(s), need at least 2")
    return TemporalTrend(device_id, len(means), ols_slope(means), statistics.fmean(means))
