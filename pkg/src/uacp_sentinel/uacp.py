"""OPC UA Connection Protocol (UACP) codec and per-direction stream scanner.

Wire layout (OPC UA binary TCP transport, little-endian)::

    header  : 3-byte ASCII type | 1-byte chunk flag | uint32 total size
    Hello   : uint32 version, rbuf, sbuf, max msg, max chunks | String url
    Ack     : uint32 version, rbuf, sbuf, max msg, max chunks
    Error   : uint32 code | String reason
    String  : int32 length (-1 = null) | UTF-8 bytes

OPN/CLO/MSG/RHE bodies are carried as opaque bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Union

HEADER_LEN = 8
DEFAULT_MAX_SIZE = 1 << 24
MIN_BUFFER_SIZE = 8192
MAX_STRING_LEN = 4096

MESSAGE_TYPES = ("HEL", "ACK", "ERR", "RHE", "OPN", "CLO", "MSG")
CHUNK_FLAGS = ("F", "C", "A")
_TOKENS = frozenset(t.encode() + f.encode() for t in MESSAGE_TYPES for f in CHUNK_FLAGS)
_TYPE_BYTES = frozenset(t.encode() for t in MESSAGE_TYPES)
_TOKEN_PREFIXES = frozenset(t[:n] for t in _TOKENS for n in (1, 2, 3))

_U32X5 = struct.Struct("<5I")
_HDR = struct.Struct("<3scI")


class UacpError(ValueError):
    pass


class NeedMoreBytes(UacpError):
    def __init__(self, needed: int):
        super().__init__(f"need {needed} bytes")
        self.needed = needed


class InvalidToken(UacpError):
    pass


class SizeOutOfRange(UacpError):
    pass


class MalformedBody(UacpError):
    pass


class MalformedString(MalformedBody):
    pass


class OversizeMessage(UacpError):
    pass


@dataclass(frozen=True)
class UacpHeader:
    msg_type: str
    chunk_flag: str
    msg_size: int


@dataclass(frozen=True)
class HelloBody:
    protocol_version: int = 0
    receive_buffer_size: int = 65536
    send_buffer_size: int = 65536
    max_message_size: int = 0
    max_chunk_count: int = 0
    endpoint_url: str | None = None

    @property
    def is_valid(self) -> bool:
        """Whether the advertised limits are acceptable to a compliant server."""
        return (self.receive_buffer_size >= MIN_BUFFER_SIZE
                and self.send_buffer_size >= MIN_BUFFER_SIZE
                and (self.endpoint_url is None
                     or len(self.endpoint_url.encode()) <= MAX_STRING_LEN))


@dataclass(frozen=True)
class AckBody:
    protocol_version: int = 0
    receive_buffer_size: int = 65536
    send_buffer_size: int = 65536
    max_message_size: int = 0
    max_chunk_count: int = 0

    @property
    def is_valid(self) -> bool:
        return (self.receive_buffer_size >= MIN_BUFFER_SIZE
                and self.send_buffer_size >= MIN_BUFFER_SIZE)


@dataclass(frozen=True)
class ErrorBody:
    error_code: int = 0
    reason: str | None = None


@dataclass(frozen=True)
class OpaqueBody:
    data: bytes = b""


Body = Union[HelloBody, AckBody, ErrorBody, OpaqueBody]

_BODY_TYPES = {"HEL": HelloBody, "ACK": AckBody, "ERR": ErrorBody}


@dataclass(frozen=True)
class UacpMessage:
    header: UacpHeader
    body: Body

    @property
    def msg_type(self) -> str:
        return self.header.msg_type


def encode_string(value: str | None) -> bytes:
    if value is None:
        return struct.pack("<i", -1)
    raw = value.encode("utf-8")
    return struct.pack("<i", len(raw)) + raw


def _encode_body(body: Body) -> bytes:
    if isinstance(body, HelloBody):
        return _U32X5.pack(body.protocol_version, body.receive_buffer_size,
                           body.send_buffer_size, body.max_message_size,
                           body.max_chunk_count) + encode_string(body.endpoint_url)
    if isinstance(body, AckBody):
        return _U32X5.pack(body.protocol_version, body.receive_buffer_size,
                           body.send_buffer_size, body.max_message_size,
                           body.max_chunk_count)
    if isinstance(body, ErrorBody):
        return struct.pack("<I", body.error_code) + encode_string(body.reason)
    return bytes(body.data)


def make_message(msg_type: str, body: Body, chunk_flag: str = "F") -> UacpMessage:
    """Build a message whose header size matches the encoded body."""
    if msg_type not in MESSAGE_TYPES:
        raise InvalidToken(f"unknown message type {msg_type!r}")
    expected = _BODY_TYPES.get(msg_type, OpaqueBody)
    if not isinstance(body, expected):
        raise TypeError(f"{msg_type} needs a {expected.__name__}")
    size = HEADER_LEN + len(_encode_body(body))
    return UacpMessage(UacpHeader(msg_type, chunk_flag, size), body)


def hello(endpoint_url: str | None = None, **fields) -> UacpMessage:
    return make_message("HEL", HelloBody(endpoint_url=endpoint_url, **fields))


def ack(**fields) -> UacpMessage:
    return make_message("ACK", AckBody(**fields))


def error(error_code: int = 0, reason: str | None = None) -> UacpMessage:
    return make_message("ERR", ErrorBody(error_code, reason))


def opaque(msg_type: str, data: bytes, chunk_flag: str = "F") -> UacpMessage:
    return make_message(msg_type, OpaqueBody(bytes(data)), chunk_flag)


def encode(msg: UacpMessage, max_size: int = DEFAULT_MAX_SIZE) -> bytes:
    hdr = msg.header
    if hdr.msg_type not in MESSAGE_TYPES or hdr.chunk_flag not in CHUNK_FLAGS:
        raise InvalidToken(f"bad token {hdr.msg_type!r}{hdr.chunk_flag!r}")
    body = _encode_body(msg.body)
    size = HEADER_LEN + len(body)
    if size > max_size:
        raise OversizeMessage(f"{size} bytes exceeds limit {max_size}")
    if size != hdr.msg_size:
        raise ValueError(f"header says {hdr.msg_size} bytes, body encodes to {size}")
    return _HDR.pack(hdr.msg_type.encode(), hdr.chunk_flag.encode(), size) + body


class _BodyReader:
    __slots__ = ("buf", "pos", "end")

    def __init__(self, buf, start: int, end: int):
        self.buf, self.pos, self.end = buf, start, end

    def u32x5(self) -> tuple:
        if self.end - self.pos < 20:
            raise MalformedBody("body shorter than its fixed fields")
        vals = _U32X5.unpack_from(self.buf, self.pos)
        self.pos += 20
        return vals

    def u32(self) -> int:
        if self.end - self.pos < 4:
            raise MalformedBody("body shorter than its fixed fields")
        (val,) = struct.unpack_from("<I", self.buf, self.pos)
        self.pos += 4
        return val

    def string(self) -> str | None:
        if self.end - self.pos < 4:
            raise MalformedString("missing string length")
        (n,) = struct.unpack_from("<i", self.buf, self.pos)
        self.pos += 4
        if n == -1:
            return None
        if n < 0 or n > self.end - self.pos:
            raise MalformedString(f"string length {n} exceeds remaining {self.end - self.pos} bytes")
        raw = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedString(str(exc)) from None

    def finish(self) -> None:
        if self.pos != self.end:
            raise MalformedBody(f"{self.end - self.pos} trailing bytes in body")


def decode_header(buf, offset: int = 0, max_size: int = DEFAULT_MAX_SIZE) -> UacpHeader:
    if len(buf) - offset < HEADER_LEN:
        # reject a bad token as early as the bytes allow
        head = bytes(buf[offset:offset + 4])
        if len(head) >= 3 and head[:3] not in _TYPE_BYTES:
            raise InvalidToken(f"bad message type {head[:3]!r}")
        if len(head) == 4 and head not in _TOKENS:
            raise InvalidToken(f"bad chunk flag {head[3:]!r}")
        raise NeedMoreBytes(HEADER_LEN)
    mtype, flag, size = _HDR.unpack_from(buf, offset)
    if mtype + flag not in _TOKENS:
        raise InvalidToken(f"bad token {mtype + flag!r}")
    if size < HEADER_LEN or size > max_size:
        raise SizeOutOfRange(f"message size {size}")
    return UacpHeader(mtype.decode(), flag.decode(), size)


def decode(buf, offset: int = 0, max_size: int = DEFAULT_MAX_SIZE) -> tuple[UacpMessage, int]:
    """Decode one message at ``offset``; returns (message, bytes consumed)."""
    hdr = decode_header(buf, offset, max_size)
    end = offset + hdr.msg_size
    if len(buf) < end:
        raise NeedMoreBytes(hdr.msg_size)
    r = _BodyReader(buf, offset + HEADER_LEN, end)
    if hdr.msg_type == "HEL":
        body: Body = HelloBody(*r.u32x5(), r.string())
    elif hdr.msg_type == "ACK":
        body = AckBody(*r.u32x5())
    elif hdr.msg_type == "ERR":
        code = r.u32()
        body = ErrorBody(code, r.string())
    else:
        body = OpaqueBody(bytes(buf[r.pos:end]))
        r.pos = end
    r.finish()
    return UacpMessage(hdr, body), hdr.msg_size


# ---------------------------------------------------------------------------
# Stream scanning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScannedMessage:
    message: UacpMessage
    offset: int
    tag: object = None


@dataclass(frozen=True)
class DesyncEvent:
    """A run of stream bytes that did not belong to any decodable message."""
    offset: int
    length: int
    reason: str


ScanItem = Union[ScannedMessage, DesyncEvent]


class StreamScanner:
    """Incremental UACP framer for one TCP direction.

    Each ``feed`` call may carry a ``tag`` (e.g. the packet timestamp); a
    message reports the tag of the chunk holding its first byte. Output is
    independent of how the stream is split into chunks.
    """

    def __init__(self, max_size: int = DEFAULT_MAX_SIZE):
        self.max_size = max_size
        self._buf = bytearray()
        self._base = 0  # stream offset of _buf[0]
        self._tags: list[tuple[int, object]] = []  # (chunk start offset, tag)
        self._desync_start: int | None = None
        self._desync_reason = ""
        self.desync_count = 0

    @property
    def position(self) -> int:
        return self._base + len(self._buf)

    @property
    def idle(self) -> bool:
        """No partial message or open desync region is pending."""
        return not self._buf and self._desync_start is None

    def feed(self, data: bytes, tag: object = None) -> list[ScanItem]:
        if data:
            self._tags.append((self.position, tag))
            self._buf += data
        return self._drain(final=False)

    def close(self) -> list[ScanItem]:
        """Flush at end of stream; leftover bytes become a desync region."""
        out = self._drain(final=True)
        if self._buf:
            self._mark_desync(self._base, "truncated")
            self._consume(len(self._buf))
        self._flush_desync(out)
        return out

    def _tag_at(self, offset: int) -> object:
        tag = None
        for start, t in self._tags:
            if start > offset:
                break
            tag = t
        return tag

    def _consume(self, n: int) -> None:
        del self._buf[:n]
        self._base += n
        tags = self._tags
        # keep the chunk that covers the new base
        i = 0
        while i + 1 < len(tags) and tags[i + 1][0] <= self._base:
            i += 1
        if i:
            del tags[:i]

    def _mark_desync(self, offset: int, reason: str) -> None:
        if self._desync_start is None:
            self._desync_start = offset
            self._desync_reason = reason

    def _flush_desync(self, out: list) -> None:
        if self._desync_start is not None:
            out.append(DesyncEvent(self._desync_start, self._base - self._desync_start,
                                   self._desync_reason))
            self.desync_count += 1
            self._desync_start = None

    def _resync(self, final: bool) -> bool:
        """Drop bytes up to the next plausible token start.

        A position qualifies when its next four bytes form a known token, or,
        before end of stream, when the bytes buffered so far are a token
        prefix. Returns False when the buffer was exhausted.
        """
        buf = self._buf
        for i in range(1, len(buf)):
            head = bytes(buf[i:i + 4])
            if head in _TOKENS or (not final and len(head) < 4 and head in _TOKEN_PREFIXES):
                self._consume(i)
                return True
        self._consume(len(buf))
        return False

    def _drain(self, final: bool) -> list[ScanItem]:
        out: list[ScanItem] = []
        while self._buf:
            try:
                msg, n = decode(self._buf, 0, self.max_size)
            except NeedMoreBytes:
                if not final:
                    break
                self._mark_desync(self._base, "truncated")
                if not self._resync(final):
                    break
                continue
            except MalformedBody as exc:
                # header is sound, so skip exactly one message worth of bytes
                self._mark_desync(self._base, type(exc).__name__)
                size = decode_header(self._buf, 0, self.max_size).msg_size
                self._consume(size)
                continue
            except UacpError as exc:
                self._mark_desync(self._base, type(exc).__name__)
                if not self._resync(final):
                    break
                continue
            self._flush_desync(out)
            out.append(ScannedMessage(msg, self._base, self._tag_at(self._base)))
            self._consume(n)
        return out


def scan_stream(chunks: Iterable[bytes]) -> list[ScanItem]:
    """Scan the in-order payload chunks of one TCP direction."""
    scanner = StreamScanner()
    out: list[ScanItem] = []
    for chunk in chunks:
        out.extend(scanner.feed(chunk))
    out.extend(scanner.close())
    return out
