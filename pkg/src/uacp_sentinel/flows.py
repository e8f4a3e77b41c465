"""TCP flow reconstruction with per-direction UACP scanning."""

from __future__ import annotations

import csv
import enum
import heapq
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

from .capture import PacketRecord, TcpFlags
from .uacp import MESSAGE_TYPES, ScannedMessage, StreamScanner, UacpMessage

NS_PER_S = 1_000_000_000
DEFAULT_IDLE_TIMEOUT_NS = 60 * NS_PER_S
DEFAULT_REORDER_NS = 1_000_000


class Label(str, enum.Enum):
    NORMAL = "Normal"
    ATTACK = "Attack"
    UNKNOWN = "Unknown"


class FlowState(str, enum.Enum):
    HANDSHAKING = "Handshaking"
    ESTABLISHED = "Established"
    CLOSED = "Closed"


@dataclass(frozen=True, order=True)
class FlowKey:
    initiator_ip: str
    initiator_port: int
    responder_ip: str
    responder_port: int

    @property
    def canonical(self) -> tuple:
        return canonical_tuple(self.initiator_ip, self.initiator_port,
                               self.responder_ip, self.responder_port)


def canonical_tuple(ip_a: str, port_a: int, ip_b: str, port_b: int) -> tuple:
    """Direction-independent identity of a TCP connection."""
    a, b = (ip_a, port_a), (ip_b, port_b)
    return (a, b) if a <= b else (b, a)


def packet_tuple(pkt: PacketRecord) -> tuple:
    return canonical_tuple(pkt.src_ip, pkt.src_port, pkt.dst_ip, pkt.dst_port)


@dataclass
class FlowRecord:
    key: FlowKey
    flow_id: int
    state: FlowState
    t_first: int
    t_last: int
    t_close: int | None = None
    pkt_count: int = 0
    byte_count: int = 0
    uacp_counts: Counter = field(default_factory=Counter)
    desync_count: int = 0
    label: Label = Label.UNKNOWN
    _fin_from: set = field(default_factory=set, repr=False)

    @property
    def hel_count(self) -> int:
        return self.uacp_counts["HEL"]


@dataclass(frozen=True)
class FlowOpened:
    key: FlowKey
    ts: int
    state: FlowState


@dataclass(frozen=True)
class MessageSeen:
    key: FlowKey
    flow_id: int
    ts: int
    message: UacpMessage
    from_initiator: bool
    offset: int


@dataclass(frozen=True)
class FlowClosed:
    key: FlowKey
    ts: int
    reason: str


FlowEvent = Union[FlowOpened, MessageSeen, FlowClosed]


class _Flow:
    __slots__ = ("record", "scanners")

    def __init__(self, record: FlowRecord):
        self.record = record
        self.scanners = (StreamScanner(), StreamScanner())  # initiator->responder, reverse


class FlowTracker:
    """Single-threaded TCP flow table.

    Packets may arrive up to ``reorder_ns`` behind the newest one seen; they
    are held in a small buffer and released in timestamp order. Packets later
    than that are counted in ``late_packets`` and processed in arrival order. Call ``flush`` (or
    ``finalize``) to drain the buffer.
    """

    def __init__(self, idle_timeout_ns: int = DEFAULT_IDLE_TIMEOUT_NS,
                 reorder_ns: int = DEFAULT_REORDER_NS):
        self.idle_timeout_ns = idle_timeout_ns
        self.reorder_ns = reorder_ns
        self._active: dict[tuple, _Flow] = {}
        self._flows: list[_Flow] = []
        self._pending: list[tuple[int, int, PacketRecord]] = []
        self._seq = 0
        self._max_ts = -1
        self.packets_seen = 0
        self.late_packets = 0

    # -- packet intake -----------------------------------------------------

    def observe(self, pkt: PacketRecord) -> list[FlowEvent]:
        self.packets_seen += 1
        events: list[FlowEvent] = []
        if pkt.ts_ns < self._max_ts - self.reorder_ns:
            # beyond the tolerance: keep arrival order, buffered packets came first
            self.late_packets += 1
            while self._pending:
                self._release(events)
            self._process(pkt, events)
            return events
        heapq.heappush(self._pending, (pkt.ts_ns, self._seq, pkt))
        self._seq += 1
        self._max_ts = max(self._max_ts, pkt.ts_ns)
        horizon = self._max_ts - self.reorder_ns
        while self._pending and self._pending[0][0] <= horizon:
            self._release(events)
        return events

    def flush(self) -> list[FlowEvent]:
        events: list[FlowEvent] = []
        while self._pending:
            self._release(events)
        return events

    def _release(self, events: list) -> None:
        _, _, pkt = heapq.heappop(self._pending)
        self._process(pkt, events)

    def _open(self, pkt: PacketRecord, tup: tuple, events: list) -> _Flow:
        flags = pkt.tcp_flags
        if flags & TcpFlags.SYN and flags & TcpFlags.ACK:
            # missed the SYN; the SYN-ACK sender is the responder
            key = FlowKey(pkt.dst_ip, pkt.dst_port, pkt.src_ip, pkt.src_port)
        else:
            key = FlowKey(pkt.src_ip, pkt.src_port, pkt.dst_ip, pkt.dst_port)
        state = FlowState.HANDSHAKING if flags & TcpFlags.SYN else FlowState.ESTABLISHED
        rec = FlowRecord(key, len(self._flows), state, pkt.ts_ns, pkt.ts_ns)
        flow = _Flow(rec)
        self._flows.append(flow)
        self._active[tup] = flow
        events.append(FlowOpened(key, pkt.ts_ns, state))
        return flow

    def _close(self, flow: _Flow, ts: int, reason: str, events: list) -> None:
        rec = flow.record
        for direction, scanner in enumerate(flow.scanners):
            self._emit_scan(flow, scanner.close(), direction == 0, events)
        rec.state = FlowState.CLOSED
        rec.t_close = ts
        events.append(FlowClosed(rec.key, ts, reason))

    def _process(self, pkt: PacketRecord, events: list) -> None:
        tup = packet_tuple(pkt)
        flags = pkt.tcp_flags
        flow = self._active.get(tup)
        fresh_syn = bool(flags & TcpFlags.SYN) and not flags & TcpFlags.ACK
        if flow is not None:
            rec = flow.record
            if rec.state is not FlowState.CLOSED and pkt.ts_ns - rec.t_last > self.idle_timeout_ns:
                self._close(flow, rec.t_last, "idle", events)
            if rec.state is FlowState.CLOSED and (
                    fresh_syn or pkt.ts_ns - rec.t_last > self.idle_timeout_ns):
                flow = None
        if flow is None:
            flow = self._open(pkt, tup, events)
        rec = flow.record

        rec.pkt_count += 1
        rec.byte_count += pkt.wire_len
        rec.t_last = max(rec.t_last, pkt.ts_ns)
        if rec.state is FlowState.CLOSED:
            # trailing ACKs/retransmissions belong to the finished connection
            return

        from_initiator = (pkt.src_ip, pkt.src_port) == (rec.key.initiator_ip, rec.key.initiator_port)
        if rec.state is FlowState.HANDSHAKING and (
                pkt.payload or (flags & TcpFlags.ACK and not flags & TcpFlags.SYN)):
            rec.state = FlowState.ESTABLISHED

        if pkt.payload:
            scanner = flow.scanners[0 if from_initiator else 1]
            self._emit_scan(flow, scanner.feed(pkt.payload, pkt.ts_ns), from_initiator, events)

        if flags & TcpFlags.RST:
            self._close(flow, pkt.ts_ns, "rst", events)
        elif flags & TcpFlags.FIN:
            rec._fin_from.add(from_initiator)
            if len(rec._fin_from) == 2:
                self._close(flow, pkt.ts_ns, "fin", events)

    def _emit_scan(self, flow: _Flow, items, from_initiator: bool, events: list) -> None:
        rec = flow.record
        for item in items:
            if isinstance(item, ScannedMessage):
                rec.uacp_counts[item.message.msg_type] += 1
                events.append(MessageSeen(rec.key, rec.flow_id, item.tag, item.message,
                                          from_initiator, item.offset))
            else:
                rec.desync_count += 1

    # -- views ---------------------------------------------------------------

    def active_flow_intervals(self) -> list[tuple[FlowKey, int, int | None]]:
        """Lifetime of every flow seen; open flows have ``None`` as end."""
        return [(f.record.key, f.record.t_first, f.record.t_close) for f in self._flows]

    @property
    def records(self) -> list[FlowRecord]:
        return [f.record for f in self._flows]

    def finalize(self) -> tuple[list[FlowRecord], list[FlowEvent]]:
        """Drain buffered packets and administratively close every open flow.

        Returns the flow records in creation order plus the events emitted
        while draining.
        """
        events = self.flush()
        for flow in self._flows:
            if flow.record.state is not FlowState.CLOSED:
                self._close(flow, flow.record.t_last, "finalize", events)
        return self.records, events


def track(packets: Iterable[PacketRecord], **kwargs) -> tuple[FlowTracker, list[FlowEvent]]:
    """Run a fresh tracker over ``packets``; returns it (not finalized) and all events."""
    tracker = FlowTracker(**kwargs)
    events: list[FlowEvent] = []
    for pkt in packets:
        events.extend(tracker.observe(pkt))
    events.extend(tracker.flush())
    return tracker, events


# ---------------------------------------------------------------------------
# Labelling and export
# ---------------------------------------------------------------------------

def label_flows(records: Sequence[FlowRecord], manifest, tolerance_ns: int = NS_PER_S) -> int:
    """Copy manifest labels onto flows matched by endpoints and open time.

    Returns the number of flows left Unknown.
    """
    by_key: dict[tuple, list] = {}
    for entry in manifest:
        k = (entry.key.initiator_ip, entry.key.initiator_port,
             entry.key.responder_ip, entry.key.responder_port)
        by_key.setdefault(k, []).append(entry)
    unmatched = 0
    for rec in records:
        k = (rec.key.initiator_ip, rec.key.initiator_port,
             rec.key.responder_ip, rec.key.responder_port)
        best = None
        for entry in by_key.get(k, ()):
            gap = abs(entry.t_open - rec.t_first)
            if gap <= tolerance_ns and (best is None or gap < abs(best.t_open - rec.t_first)):
                best = entry
        if best is None:
            rec.label = Label.UNKNOWN
            unmatched += 1
        else:
            rec.label = Label(best.label)
    return unmatched


FLOW_CSV_COLUMNS = (
    "flow_id", "initiator_ip", "initiator_port", "responder_ip", "responder_port",
    "state", "t_first_ns", "t_last_ns", "t_close_ns", "pkt_count", "byte_count",
    "hel_count", *(f"{t.lower()}_count" for t in MESSAGE_TYPES if t != "HEL"),
    "desync_count", "label",
)


def export_flows(records: Sequence[FlowRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FLOW_CSV_COLUMNS)
        for r in records:
            w.writerow([
                r.flow_id, r.key.initiator_ip, r.key.initiator_port,
                r.key.responder_ip, r.key.responder_port, r.state.value,
                r.t_first, r.t_last, "" if r.t_close is None else r.t_close,
                r.pkt_count, r.byte_count, r.hel_count,
                *(r.uacp_counts[t] for t in MESSAGE_TYPES if t != "HEL"),
                r.desync_count, r.label.value,
            ])
