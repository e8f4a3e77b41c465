"""Classic libpcap reading and writing, normalized to TCP/IPv4 PacketRecords.

Only Ethernet link type is handled. The writer synthesizes Ethernet, IPv4
and TCP headers around each payload so the output opens in ordinary capture
tools; sequence numbers are tracked per direction so that dissectors see a
coherent byte stream.
"""

from __future__ import annotations

import enum
import os
import socket
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator

MAGIC_MICRO = 0xA1B2C3D4
MAGIC_NANO = 0xA1B23C4D

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16
ETH_HEADER_LEN = 14
IPV4_HEADER_LEN = 20
TCP_HEADER_LEN = 20
FRAME_OVERHEAD = ETH_HEADER_LEN + IPV4_HEADER_LEN + TCP_HEADER_LEN

SNAPLEN = 65535
GTPU_PORT = 2152

ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_IPV6 = 0x86DD
ETHERTYPE_VLAN = (0x8100, 0x88A8)
IPPROTO_TCP = 6
IPPROTO_UDP = 17


class TcpFlags(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10


class LinkType(enum.IntEnum):
    ETHERNET = 1


class CaptureError(Exception):
    pass


class BadMagic(CaptureError):
    pass


class UnsupportedLinkType(CaptureError):
    pass


class UnorderedRecords(CaptureError):
    pass


class InvalidRecord(CaptureError):
    pass


class TruncatedRecord(CaptureError):
    """The file ended mid-record. ``meta`` and ``records`` hold what was read."""

    def __init__(self, message: str, meta: "TraceMeta | None" = None,
                 records: "list[PacketRecord] | None" = None):
        super().__init__(message)
        self.meta = meta
        self.records = records if records is not None else []


@dataclass(frozen=True, slots=True)
class PacketRecord:
    ts_ns: int
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    tcp_flags: TcpFlags
    payload: bytes = b""
    wire_len: int = 0

    def __post_init__(self):
        if self.ts_ns < 0:
            raise InvalidRecord(f"negative timestamp {self.ts_ns}")
        if not (0 <= self.src_port <= 0xFFFF and 0 <= self.dst_port <= 0xFFFF):
            raise InvalidRecord(f"port out of range: {self.src_port}/{self.dst_port}")
        if self.wire_len < len(self.payload):
            raise InvalidRecord("wire_len shorter than payload")

    def has(self, flags: TcpFlags) -> bool:
        return bool(self.tcp_flags & flags)


@dataclass
class TraceMeta:
    link_type: LinkType = LinkType.ETHERNET
    ts_resolution: str = "nano"
    packet_count: int = 0
    # why frames were dropped during normalization, e.g. {"ipv6": 3}
    skipped: Counter = field(default_factory=Counter, compare=False)

    def __post_init__(self):
        if self.ts_resolution not in ("micro", "nano"):
            raise ValueError(f"unknown timestamp resolution {self.ts_resolution!r}")


def frame_len(payload_len: int) -> int:
    """On-wire length of a synthesized Ethernet/IPv4/TCP frame."""
    return FRAME_OVERHEAD + payload_len


# ---------------------------------------------------------------------------
# Reading
# ---------------------------------------------------------------------------

class TraceReader:
    """Streaming pcap reader yielding PacketRecords in file order.

    ``meta.packet_count`` and ``meta.skipped`` are final once iteration ends.
    """

    def __init__(self, fh: BinaryIO, strip_gtpu: bool = False):
        self._fh = fh
        self.strip_gtpu = strip_gtpu
        header = fh.read(GLOBAL_HEADER_LEN)
        if len(header) < 4:
            raise BadMagic("file too short for a capture header")
        magic_le = struct.unpack("<I", header[:4])[0]
        magic_be = struct.unpack(">I", header[:4])[0]
        if magic_le in (MAGIC_MICRO, MAGIC_NANO):
            self._endian, magic = "<", magic_le
        elif magic_be in (MAGIC_MICRO, MAGIC_NANO):
            self._endian, magic = ">", magic_be
        else:
            raise BadMagic(f"unrecognized capture magic 0x{magic_le:08x}")
        if len(header) < GLOBAL_HEADER_LEN:
            raise TruncatedRecord("capture header truncated")
        _, _major, _minor, _zone, _sigfigs, _snaplen, linktype = struct.unpack(
            self._endian + "IHHiIII", header)
        if linktype != LinkType.ETHERNET:
            raise UnsupportedLinkType(f"link type {linktype}")
        self._subsec_ns = 1 if magic == MAGIC_NANO else 1000
        self.meta = TraceMeta(LinkType.ETHERNET,
                              "nano" if magic == MAGIC_NANO else "micro", 0)
        self._rec_fmt = self._endian + "IIII"

    def __iter__(self) -> Iterator[PacketRecord]:
        fh = self._fh
        while True:
            rh = fh.read(RECORD_HEADER_LEN)
            if not rh:
                return
            if len(rh) < RECORD_HEADER_LEN:
                raise TruncatedRecord("record header truncated", self.meta)
            ts_sec, ts_sub, incl_len, orig_len = struct.unpack(self._rec_fmt, rh)
            data = fh.read(incl_len)
            if len(data) < incl_len:
                raise TruncatedRecord("record data truncated", self.meta)
            rec = self._parse_frame(ts_sec * 1_000_000_000 + ts_sub * self._subsec_ns,
                                    data, orig_len)
            if rec is not None:
                self.meta.packet_count += 1
                yield rec

    def _skip(self, reason: str) -> None:
        self.meta.skipped[reason] += 1

    def _parse_frame(self, ts_ns: int, data: bytes, orig_len: int) -> PacketRecord | None:
        if len(data) < ETH_HEADER_LEN:
            self._skip("short_frame")
            return None
        ethertype = struct.unpack_from("!H", data, 12)[0]
        off = ETH_HEADER_LEN
        while ethertype in ETHERTYPE_VLAN and len(data) >= off + 4:
            ethertype = struct.unpack_from("!H", data, off + 2)[0]
            off += 4
        if ethertype == ETHERTYPE_IPV6:
            self._skip("ipv6")
            return None
        if ethertype != ETHERTYPE_IPV4:
            self._skip("non_ip")
            return None
        return self._parse_ipv4(ts_ns, data, off, orig_len, allow_tunnel=self.strip_gtpu)

    def _parse_ipv4(self, ts_ns, data, off, orig_len, allow_tunnel):
        if len(data) < off + IPV4_HEADER_LEN or data[off] >> 4 != 4:
            self._skip("bad_ip")
            return None
        ihl = (data[off] & 0x0F) * 4
        total_len, frag = struct.unpack_from("!H2xH", data, off + 2)
        proto = data[off + 9]
        if frag & 0x3FFF:
            self._skip("fragment")
            return None
        if ihl < IPV4_HEADER_LEN or total_len < ihl:
            self._skip("bad_ip")
            return None
        src = socket.inet_ntoa(data[off + 12:off + 16])
        dst = socket.inet_ntoa(data[off + 16:off + 20])
        # ignore Ethernet padding; honour snaplen truncation
        ip_end = min(off + total_len, len(data))
        l4 = off + ihl
        if proto == IPPROTO_UDP and allow_tunnel:
            return self._parse_gtpu(ts_ns, data, l4, ip_end)
        if proto != IPPROTO_TCP:
            self._skip("non_tcp")
            return None
        if ip_end < l4 + TCP_HEADER_LEN:
            self._skip("short_tcp")
            return None
        sport, dport, doff_flags = struct.unpack_from("!HH8xH", data, l4)
        doff = (doff_flags >> 12) * 4
        flags = TcpFlags(doff_flags & 0x1F)
        payload = bytes(data[l4 + doff:ip_end])
        return PacketRecord(ts_ns, src, dst, sport, dport, flags, payload,
                            max(orig_len, len(payload)))

    def _parse_gtpu(self, ts_ns, data, udp_off, ip_end):
        if ip_end < udp_off + 8:
            self._skip("short_udp")
            return None
        sport, dport = struct.unpack_from("!HH", data, udp_off)
        if GTPU_PORT not in (sport, dport):
            self._skip("non_tcp")
            return None
        g = udp_off + 8
        if ip_end < g + 8:
            self._skip("bad_gtpu")
            return None
        gflags, gtype = data[g], data[g + 1]
        if gtype != 0xFF:  # only G-PDU carries user traffic
            self._skip("gtpu_signalling")
            return None
        inner = g + 8
        if gflags & 0x07:
            inner += 4
            next_ext = data[inner - 1] if inner <= ip_end else 0
            while next_ext and inner < ip_end:
                ext_len = data[inner] * 4
                if ext_len == 0:
                    break
                inner += ext_len
                next_ext = data[inner - 1]
        inner_data = data[inner:ip_end]
        if not inner_data or inner_data[0] >> 4 != 4:
            self._skip("gtpu_non_ipv4")
            return None
        # report the inner packet as if it had been captured untunnelled
        inner_total = struct.unpack_from("!H", inner_data, 2)[0] if len(inner_data) >= 4 else 0
        frame = bytes(ETH_HEADER_LEN) + bytes(inner_data)
        return self._parse_ipv4(ts_ns, frame, ETH_HEADER_LEN,
                                ETH_HEADER_LEN + inner_total, allow_tunnel=False)


def read_trace(path, strip_gtpu: bool = False) -> tuple[TraceMeta, list[PacketRecord]]:
    """Read every TCP/IPv4 packet of a pcap file.

    Raises TruncatedRecord (carrying the records read so far) when the file
    ends mid-record.
    """
    with open(path, "rb") as fh:
        reader = TraceReader(fh, strip_gtpu=strip_gtpu)
        records: list[PacketRecord] = []
        try:
            for rec in reader:
                records.append(rec)
        except TruncatedRecord as exc:
            exc.meta = reader.meta
            exc.records = records
            raise
    return reader.meta, records


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------

def internet_checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\0"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _mac_for(ip: bytes) -> bytes:
    return b"\x02\x00" + ip


class TraceWriter:
    def __init__(self, fh: BinaryIO, ts_resolution: str = "nano"):
        if ts_resolution not in ("micro", "nano"):
            raise ValueError(f"unknown timestamp resolution {ts_resolution!r}")
        self._fh = fh
        self._nano = ts_resolution == "nano"
        self._last_ts = -1
        self._ip_id = 0
        self._next_seq: dict[tuple, int] = {}
        self.count = 0
        fh.write(struct.pack("<IHHiIII", MAGIC_NANO if self._nano else MAGIC_MICRO,
                             2, 4, 0, 0, SNAPLEN, LinkType.ETHERNET))

    def _seq_state(self, rec: PacketRecord) -> tuple[int, int]:
        fwd = (rec.src_ip, rec.src_port, rec.dst_ip, rec.dst_port)
        rev = (rec.dst_ip, rec.dst_port, rec.src_ip, rec.src_port)
        if rec.has(TcpFlags.SYN) or fwd not in self._next_seq:
            # deterministic initial sequence number
            self._next_seq[fwd] = zlib.crc32(repr(fwd).encode())
        seq = self._next_seq[fwd]
        ack = self._next_seq.get(rev, 0) if rec.has(TcpFlags.ACK) else 0
        advance = len(rec.payload)
        if rec.has(TcpFlags.SYN):
            advance += 1
        if rec.has(TcpFlags.FIN):
            advance += 1
        self._next_seq[fwd] = (seq + advance) & 0xFFFFFFFF
        return seq, ack

    def build_frame(self, rec: PacketRecord) -> bytes:
        src = socket.inet_aton(rec.src_ip)
        dst = socket.inet_aton(rec.dst_ip)
        seq, ack = self._seq_state(rec)
        tcp_len = TCP_HEADER_LEN + len(rec.payload)
        tcp = struct.pack("!HHIIBBHHH", rec.src_port, rec.dst_port, seq, ack,
                          (TCP_HEADER_LEN // 4) << 4, int(rec.tcp_flags), 0xFFFF, 0, 0)
        pseudo = src + dst + struct.pack("!BBH", 0, IPPROTO_TCP, tcp_len)
        csum = internet_checksum(pseudo + tcp + rec.payload)
        tcp = tcp[:16] + struct.pack("!H", csum) + tcp[18:]
        ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, IPV4_HEADER_LEN + tcp_len,
                         self._ip_id, 0x4000, 64, IPPROTO_TCP, 0, src, dst)
        ip = ip[:10] + struct.pack("!H", internet_checksum(ip)) + ip[12:]
        self._ip_id = (self._ip_id + 1) & 0xFFFF
        eth = _mac_for(dst) + _mac_for(src) + struct.pack("!H", ETHERTYPE_IPV4)
        return eth + ip + tcp + rec.payload

    def write(self, rec: PacketRecord) -> None:
        if rec.ts_ns < self._last_ts:
            raise UnorderedRecords(f"record {self.count} at {rec.ts_ns} ns precedes {self._last_ts} ns")
        frame = self.build_frame(rec)
        if rec.wire_len < len(frame):
            raise InvalidRecord(f"wire_len {rec.wire_len} shorter than frame {len(frame)}")
        if len(frame) > SNAPLEN:
            raise InvalidRecord(f"frame of {len(frame)} bytes exceeds snaplen")
        sec, sub = divmod(rec.ts_ns, 1_000_000_000)
        if not self._nano:
            sub //= 1000
        self._fh.write(struct.pack("<IIII", sec, sub, len(frame), rec.wire_len))
        self._fh.write(frame)
        self._last_ts = rec.ts_ns
        self.count += 1


def write_trace(records: Iterable[PacketRecord], meta: TraceMeta | None, path) -> None:
    """Write records to ``path`` as a classic pcap file.

    Records with ``wire_len == 0`` are not accepted; use ``frame_len`` to size
    synthetic packets. The file is only left behind if every record was valid.
    """
    resolution = meta.ts_resolution if meta is not None else "nano"
    try:
        with open(path, "wb") as fh:
            writer = TraceWriter(fh, resolution)
            for rec in records:
                writer.write(rec)
    except CaptureError:
        try:
            os.unlink(path)
        except OSError:
            pass
        raise
