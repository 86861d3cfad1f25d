"""Byte-exact TCP wire protocol carrying per-tick XYF spike sets to a chip
server and class histograms back.

Message layout (all integers little-endian):

    header:  magic "TN" (2 bytes) | version u8 = 1 | type u8 | payload_len u32
    HELLO     (0x00)  width u16 | height u16 | features u16 | classes u16
    SPIKES    (0x01)  tick u32 | count u32 | count * (x u16, y u16, f u16)
    HISTOGRAM (0x02)  tick u32 | count u32 | count * u32
    RESET     (0x03)  empty payload
    ERROR     (0x7F)  code u16 | UTF-8 text

The layout above is normative for this repository: any client in any
language that produces these bytes interoperates with the server.
The server is strict request/response: one HISTOGRAM per SPIKES, in
order, echoing the tick id; RESET is acknowledged with RESET.
"""

from __future__ import annotations

import os
import socket
import struct
import threading

import numpy as np
from dataclasses import dataclass, field
from typing import NamedTuple

MAGIC = b"TN"
VERSION = 1
HEADER = struct.Struct("<2sBBI")
HEADER_LEN = HEADER.size  # 8

TYPE_HELLO = 0x00
TYPE_SPIKES = 0x01
TYPE_HISTOGRAM = 0x02
TYPE_RESET = 0x03
TYPE_ERROR = 0x7F

# ERROR payload codes
ERR_SHAPE_MISMATCH = 1
ERR_MALFORMED = 2
ERR_BUSY = 3
ERR_UNSUPPORTED_VERSION = 4
ERR_INTERNAL = 5

MAX_PAYLOAD = 16 * 1024 * 1024

DEFAULT_ADDR = "127.0.0.1:9040"
ADDR_ENV = "NEUROTRAIL_ADDR"


class SpikeEvent(NamedTuple):
    """One spiking neuron address: column x, row y, feature f."""

    x: int
    y: int
    f: int


@dataclass(frozen=True)
class ClassHistogram:
    """Per-class output spike counts for one frame/tick."""

    tick: int
    counts: tuple[int, ...]


@dataclass(frozen=True)
class Hello:
    width: int
    height: int
    features: int
    classes: int


@dataclass(frozen=True, eq=False)
class Spikes:
    """One frame's spike set. `events` may be a tuple of SpikeEvent or an
    (n, 3) integer array of (x, y, f) rows; both encode identically."""

    tick: int
    events: tuple[SpikeEvent, ...] | np.ndarray

    def events_array(self) -> np.ndarray:
        if isinstance(self.events, np.ndarray):
            return self.events.reshape(-1, 3)
        if not self.events:
            return np.empty((0, 3), dtype=np.int64)
        return np.asarray(self.events, dtype=np.int64)

    def __eq__(self, other):
        if not isinstance(other, Spikes):
            return NotImplemented
        return self.tick == other.tick and np.array_equal(
            self.events_array(), other.events_array()
        )


@dataclass(frozen=True)
class Reset:
    pass


@dataclass(frozen=True)
class Error:
    code: int
    text: str


Message = Hello | Spikes | ClassHistogram | Reset | Error


class ProtocolError(ValueError):
    """Base for every wire-level decode/encode failure."""


class BadMagicError(ProtocolError):
    pass


class UnsupportedVersionError(ProtocolError):
    pass


class TruncatedError(ProtocolError):
    pass


class CountMismatchError(ProtocolError):
    pass


class UnknownTypeError(ProtocolError):
    pass


class SessionError(RuntimeError):
    """Transport-level failure of a client session (not a timeout)."""


class SessionTimeout(SessionError):
    """No reply within the configured deadline; callers may hold last command."""


def encode_message(msg: Message) -> bytes:
    """Serialize a message to its exact wire bytes."""
    if isinstance(msg, Hello):
        mtype = TYPE_HELLO
        payload = struct.pack("<4H", msg.width, msg.height, msg.features, msg.classes)
    elif isinstance(msg, Spikes):
        mtype = TYPE_SPIKES
        n = len(msg.events)
        payload = struct.pack("<II", msg.tick, n)
        if n:
            payload += np.ascontiguousarray(
                msg.events_array().astype("<u2", casting="unsafe")
                if isinstance(msg.events, np.ndarray)
                else np.asarray(msg.events, dtype="<u2")
            ).tobytes()
    elif isinstance(msg, ClassHistogram):
        mtype = TYPE_HISTOGRAM
        payload = struct.pack("<II", msg.tick, len(msg.counts))
        payload += struct.pack(f"<{len(msg.counts)}I", *msg.counts)
    elif isinstance(msg, Reset):
        mtype = TYPE_RESET
        payload = b""
    elif isinstance(msg, Error):
        mtype = TYPE_ERROR
        payload = struct.pack("<H", msg.code) + msg.text.encode("utf-8")
    else:
        raise TypeError(f"not a protocol message: {msg!r}")
    return HEADER.pack(MAGIC, VERSION, mtype, len(payload)) + payload


def decode_message(buf: bytes) -> Message:
    """Parse exactly one message from `buf`.

    Every malformed input raises a typed ProtocolError; no other exception
    escapes, whatever the bytes.
    """
    if len(buf) < HEADER_LEN:
        raise TruncatedError(f"need {HEADER_LEN} header bytes, got {len(buf)}")
    magic, version, mtype, plen = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if plen > MAX_PAYLOAD:
        raise CountMismatchError(f"payload length {plen} exceeds cap {MAX_PAYLOAD}")
    if len(buf) != HEADER_LEN + plen:
        raise TruncatedError(
            f"payload length {plen} but {len(buf) - HEADER_LEN} bytes present"
        )
    payload = buf[HEADER_LEN:]
    return _decode_payload(mtype, payload)


def _decode_payload(mtype: int, payload: bytes) -> Message:
    if mtype == TYPE_HELLO:
        if len(payload) != 8:
            raise CountMismatchError(f"HELLO payload must be 8 bytes, got {len(payload)}")
        w, h, f, c = struct.unpack("<4H", payload)
        return Hello(w, h, f, c)
    if mtype == TYPE_SPIKES:
        if len(payload) < 8:
            raise TruncatedError("SPIKES payload shorter than 8 bytes")
        tick, count = struct.unpack_from("<II", payload)
        if len(payload) != 8 + 6 * count:
            raise CountMismatchError(
                f"SPIKES count {count} implies {8 + 6 * count} payload bytes, got {len(payload)}"
            )
        if count:
            events = (
                np.frombuffer(payload, dtype="<u2", offset=8)
                .reshape(count, 3)
                .astype(np.int64)
            )
        else:
            events = ()
        return Spikes(tick, events)
    if mtype == TYPE_HISTOGRAM:
        if len(payload) < 8:
            raise TruncatedError("HISTOGRAM payload shorter than 8 bytes")
        tick, count = struct.unpack_from("<II", payload)
        if len(payload) != 8 + 4 * count:
            raise CountMismatchError(
                f"HISTOGRAM count {count} implies {8 + 4 * count} payload bytes, got {len(payload)}"
            )
        counts = struct.unpack_from(f"<{count}I", payload, 8)
        return ClassHistogram(tick, tuple(counts))
    if mtype == TYPE_RESET:
        if payload:
            raise CountMismatchError("RESET carries no payload")
        return Reset()
    if mtype == TYPE_ERROR:
        if len(payload) < 2:
            raise TruncatedError("ERROR payload shorter than 2 bytes")
        (code,) = struct.unpack_from("<H", payload)
        try:
            text = payload[2:].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CountMismatchError(f"ERROR text not UTF-8: {exc}") from None
        return Error(code, text)
    raise UnknownTypeError(f"unknown message type 0x{mtype:02x}")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionError("peer closed mid-message")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_message(sock: socket.socket) -> Message:
    """Read one length-delimited message from a stream socket."""
    header = _recv_exact(sock, HEADER_LEN)
    magic, version, mtype, plen = HEADER.unpack(header)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if plen > MAX_PAYLOAD:
        raise CountMismatchError(f"payload length {plen} exceeds cap {MAX_PAYLOAD}")
    payload = _recv_exact(sock, plen) if plen else b""
    return _decode_payload(mtype, payload)


def send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode_message(msg))


def parse_addr(addr: str | None = None) -> tuple[str, int]:
    """Resolve an endpoint string, falling back to $NEUROTRAIL_ADDR then the default."""
    if addr is None:
        addr = os.environ.get(ADDR_ENV, DEFAULT_ADDR)
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {addr!r}")
    return host, int(port)


@dataclass
class ServerStats:
    frames: int = 0
    spikes_in: int = 0
    sessions: int = 0
    rejected: int = 0


class ChipServer:
    """Single-session TCP server wrapping a loaded chip.

    One control session at a time; extra connections are refused with an
    ERROR(busy) message. The chip state is owned by the session thread.
    """

    def __init__(self, chip, host: str = "127.0.0.1", port: int = 9040):
        self.chip = chip
        self.stats = ServerStats()
        self._listener = socket.create_server((host, port))
        self.host, self.port = self._listener.getsockname()[:2]
        self._busy = threading.Lock()
        self._closing = threading.Event()
        self._accept_thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        return f"{self.host}:{self.port}"

    def serve_forever(self) -> None:
        while not self._closing.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                break
            if not self._busy.acquire(blocking=False):
                try:
                    send_message(conn, Error(ERR_BUSY, "server busy"))
                finally:
                    conn.close()
                self.stats.rejected += 1
                continue
            thread = threading.Thread(
                target=self._run_session, args=(conn,), daemon=True
            )
            thread.start()

    def start(self) -> "ChipServer":
        """Run the accept loop on a background thread."""
        self._accept_thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._accept_thread.start()
        return self

    def close(self) -> None:
        self._closing.set()
        try:
            self._listener.close()
        except OSError:
            pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=2.0)

    def _run_session(self, conn: socket.socket) -> None:
        try:
            self._session(conn)
        except (ConnectionError, OSError, ProtocolError):
            pass
        finally:
            conn.close()
            self._busy.release()

    def _session(self, conn: socket.socket) -> None:
        conn.settimeout(None)
        self.stats.sessions += 1
        w, h, f = self.chip.input_shape
        classes = self.chip.num_classes
        try:
            msg = read_message(conn)
        except ProtocolError as exc:
            send_message(conn, Error(ERR_MALFORMED, str(exc)))
            return
        if not isinstance(msg, Hello):
            send_message(conn, Error(ERR_MALFORMED, "expected HELLO"))
            return
        if (msg.width, msg.height, msg.features, msg.classes) != (w, h, f, classes):
            send_message(
                conn,
                Error(
                    ERR_SHAPE_MISMATCH,
                    f"program expects {w}x{h}x{f}/{classes} classes, "
                    f"client offered {msg.width}x{msg.height}x{msg.features}/{msg.classes}",
                ),
            )
            return
        send_message(conn, Hello(w, h, f, classes))
        self.chip.reset()
        while True:
            try:
                msg = read_message(conn)
            except ConnectionError:
                return
            except ProtocolError as exc:
                send_message(conn, Error(ERR_MALFORMED, str(exc)))
                return
            if isinstance(msg, Spikes):
                try:
                    self.chip.inject_spikes(msg.events)
                except ValueError as exc:
                    send_message(conn, Error(ERR_MALFORMED, str(exc)))
                    return
                hist = self.chip.tick()
                self.stats.frames += 1
                self.stats.spikes_in += len(msg.events)
                send_message(
                    conn, ClassHistogram(msg.tick, tuple(int(c) for c in hist.counts))
                )
            elif isinstance(msg, Reset):
                self.chip.reset()
                send_message(conn, Reset())
            else:
                send_message(conn, Error(ERR_MALFORMED, f"unexpected {type(msg).__name__}"))
                return


@dataclass
class ClientSession:
    """Blocking request/response client. Not thread-safe; one user at a time."""

    sock: socket.socket
    shape: tuple[int, int, int]
    classes: int
    timeout: float = 0.5
    closed: bool = field(default=False, init=False)

    @classmethod
    def connect(
        cls,
        endpoint: str | None = None,
        shape: tuple[int, int, int] = (44, 36, 12),
        classes: int = 3,
        timeout: float = 0.5,
        connect_timeout: float = 5.0,
    ) -> "ClientSession":
        host, port = parse_addr(endpoint)
        try:
            sock = socket.create_connection((host, port), timeout=connect_timeout)
        except OSError as exc:
            raise SessionError(f"connect to {host}:{port} failed: {exc}") from exc
        sock.settimeout(timeout)
        session = cls(sock=sock, shape=shape, classes=classes, timeout=timeout)
        w, h, f = shape
        try:
            send_message(sock, Hello(w, h, f, classes))
            reply = session._read_reply()
        except SessionError:
            sock.close()
            raise
        if isinstance(reply, Error):
            sock.close()
            raise SessionError(f"server refused session (code {reply.code}): {reply.text}")
        if not isinstance(reply, Hello):
            sock.close()
            raise SessionError(f"expected HELLO reply, got {type(reply).__name__}")
        return session

    def _read_reply(self) -> Message:
        try:
            return read_message(self.sock)
        except socket.timeout:
            raise SessionTimeout(f"no reply within {self.timeout}s") from None
        except (ConnectionError, OSError) as exc:
            raise SessionError(f"connection lost: {exc}") from exc
        except ProtocolError as exc:
            raise SessionError(f"protocol violation from server: {exc}") from exc

    def send_frame(self, spikes, tick: int) -> ClassHistogram:
        """Send one frame's spikes; block for its histogram (tick must echo)."""
        if self.closed:
            raise SessionError("session closed")
        events = spikes if isinstance(spikes, np.ndarray) else tuple(spikes)
        try:
            send_message(self.sock, Spikes(tick, events))
        except (ConnectionError, OSError) as exc:
            raise SessionError(f"send failed: {exc}") from exc
        reply = self._read_reply()
        if isinstance(reply, Error):
            raise SessionError(f"server error (code {reply.code}): {reply.text}")
        if not isinstance(reply, ClassHistogram):
            raise SessionError(f"expected HISTOGRAM, got {type(reply).__name__}")
        if reply.tick != tick:
            raise SessionError(f"tick mismatch: sent {tick}, histogram says {reply.tick}")
        if len(reply.counts) != self.classes:
            raise SessionError(
                f"histogram has {len(reply.counts)} classes, negotiated {self.classes}"
            )
        return reply

    def reset(self) -> None:
        if self.closed:
            raise SessionError("session closed")
        try:
            send_message(self.sock, Reset())
        except (ConnectionError, OSError) as exc:
            raise SessionError(f"send failed: {exc}") from exc
        reply = self._read_reply()
        if not isinstance(reply, Reset):
            raise SessionError(f"expected RESET ack, got {type(reply).__name__}")

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            try:
                self.sock.close()
            except OSError:
                pass

    def __enter__(self) -> "ClientSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
