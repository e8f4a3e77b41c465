"""Deterministic synthesis of labelled OPC UA traffic.

Attack flows follow the HEL-flood recipe: connect with a fresh source port,
send ``hel_per_flow`` Hello messages, close. Flow ``i`` of a profile opens at
``t_start + i / flow_rate``, so a profile yields ``round(flow_rate * duration)``
flows. Every client packet waits for the previous server reply, which is
delayed by ``base_rtt`` plus uniform jitter.

Normal clients cycle through sessions: handshake, HEL/ACK, OPN exchange,
MSG request/response pairs every ``request_period``, CLO, disconnect.
"""

from __future__ import annotations

import csv
import math
import random
import socket
import struct
import sys
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import uacp
from .capture import PacketRecord, TcpFlags, frame_len
from .flows import FlowKey, Label

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

NS_PER_S = 1_000_000_000
# client think time between a server reply and the next client packet
TURNAROUND_NS = 50_000
MAX_FLOWS_PER_PROFILE = 64000
SECURITY_POLICY_NONE = "http://opcfoundation.org/UA/SecurityPolicy#None"

SYN = TcpFlags.SYN
SYN_ACK = TcpFlags.SYN | TcpFlags.ACK
ACK = TcpFlags.ACK
PSH_ACK = TcpFlags.PSH | TcpFlags.ACK
FIN_ACK = TcpFlags.FIN | TcpFlags.ACK


class SynthError(ValueError):
    pass


class PortExhaustion(SynthError):
    pass


class OverlapViolation(SynthError):
    pass


class ScenarioError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class AttackProfile:
    hel_per_flow: int
    flow_rate: float
    duration: float
    t_start: float = 0.0
    attacker_ip: str = "10.0.0.66"
    victim_ip: str = "10.0.0.10"
    victim_port: int = 4840
    # False crafts HELs advertising buffers below the protocol minimum
    valid_hello: bool = True

    def __post_init__(self):
        if self.hel_per_flow < 0 or self.flow_rate < 0 or self.duration < 0 or self.t_start < 0:
            raise SynthError("attack parameters must be non-negative")

    @property
    def flow_count(self) -> int:
        return round_half_up(self.flow_rate * self.duration)

    @property
    def endpoint_url(self) -> str:
        return f"opc.tcp://{self.victim_ip}:{self.victim_port}"


@dataclass
class NormalProfile:
    client_count: int = 2
    session_period: float = 30.0
    request_period: float = 0.5
    payload_size: int = 64
    t_start: float = 0.0
    t_end: float = 60.0
    client_ip_base: str = "10.0.1.10"
    server_ip: str = "10.0.0.10"
    server_port: int = 4840

    def __post_init__(self):
        if self.session_period <= 0 or self.request_period <= 0:
            raise SynthError("session and request periods must be positive")
        if self.client_count < 0:
            raise SynthError("client_count must be non-negative")
        if self.payload_size < 24:
            raise SynthError("MSG payload_size must hold the 24-byte secure-channel header")
        if self.t_end < self.t_start:
            raise SynthError("t_end precedes t_start")

    def client_ip(self, index: int) -> str:
        base = struct.unpack("!I", socket.inet_aton(self.client_ip_base))[0]
        return socket.inet_ntoa(struct.pack("!I", base + index))


@dataclass
class Scenario:
    normal: list[NormalProfile] = field(default_factory=list)
    attacks: list[AttackProfile] = field(default_factory=list)
    seed: int = 0
    base_rtt_ms: float = 20.0
    jitter_ms: float = 2.0


@dataclass(frozen=True)
class ManifestEntry:
    flow_id: int
    key: FlowKey
    t_open: int
    t_last: int
    label: Label
    profile_id: str
    pkt_count: int
    hel_count: int


class _Timing:
    def __init__(self, rng: random.Random, base_rtt_ms: float, jitter_ms: float):
        self.rng = rng
        self.base = base_rtt_ms * 1e6
        self.jitter = jitter_ms * 1e6

    def rtt(self) -> int:
        j = self.rng.uniform(-self.jitter, self.jitter) if self.jitter else 0.0
        return max(0, int(round(self.base + j)))


class _FlowBuilder:
    """Accumulates the packets of one connection, client side first."""

    def __init__(self, client: tuple[str, int], server: tuple[str, int]):
        self.client = client
        self.server = server
        self.packets: list[PacketRecord] = []
        self.hel_count = 0
        self._fwd = (client[0], server[0], client[1], server[1])
        self._rev = (server[0], client[0], server[1], client[1])

    def c2s(self, ts: int, flags: TcpFlags, payload: bytes = b"") -> None:
        self.packets.append(PacketRecord(ts, *self._fwd, flags, payload, frame_len(len(payload))))

    def s2c(self, ts: int, flags: TcpFlags, payload: bytes = b"") -> None:
        self.packets.append(PacketRecord(ts, *self._rev, flags, payload, frame_len(len(payload))))

    def entry(self, flow_id: int, label: Label, profile_id: str) -> ManifestEntry:
        key = FlowKey(self.client[0], self.client[1], self.server[0], self.server[1])
        return ManifestEntry(flow_id, key, self.packets[0].ts_ns, self.packets[-1].ts_ns,
                             label, profile_id, len(self.packets), self.hel_count)


def _flow_rng(seed, profile_id: str, index: int) -> random.Random:
    # string seeds hash through SHA-512, stable across processes
    return random.Random(f"{seed}/{profile_id}/{index}")


def synth_attack(profile: AttackProfile, seed: int | str = 0, *, base_rtt_ms: float = 20.0,
                 jitter_ms: float = 2.0, port_base: int = 1024,
                 profile_id: str = "attack-0") -> tuple[list[PacketRecord], list[ManifestEntry]]:
    n = profile.flow_count
    if n > MAX_FLOWS_PER_PROFILE or port_base + n > 65536:
        raise PortExhaustion(f"{n} flows do not fit in source ports from {port_base}")
    if profile.valid_hello:
        hel_msg = uacp.hello(profile.endpoint_url)
    else:
        hel_msg = uacp.hello(profile.endpoint_url, receive_buffer_size=1024, send_buffer_size=1024)
    hel_bytes = uacp.encode(hel_msg)
    ack_bytes = uacp.encode(uacp.ack())
    t_origin = round_half_up(profile.t_start * NS_PER_S)
    server = (profile.victim_ip, profile.victim_port)

    packets: list[PacketRecord] = []
    manifest: list[ManifestEntry] = []
    for i in range(n):
        timing = _Timing(_flow_rng(seed, profile_id, i), base_rtt_ms, jitter_ms)
        f = _FlowBuilder((profile.attacker_ip, port_base + i), server)
        t = t_origin + round_half_up(i * NS_PER_S / profile.flow_rate)
        f.c2s(t, SYN)
        t += timing.rtt()
        f.s2c(t, SYN_ACK)
        t += TURNAROUND_NS
        f.c2s(t, ACK)
        for k in range(profile.hel_per_flow):
            t += TURNAROUND_NS
            f.c2s(t, PSH_ACK, hel_bytes)
            f.hel_count += 1
            t += timing.rtt()
            # the server answers the first Hello; later ones are only TCP-acked
            if k == 0:
                f.s2c(t, PSH_ACK, ack_bytes)
            else:
                f.s2c(t, ACK)
        t += TURNAROUND_NS
        f.c2s(t, FIN_ACK)
        t += timing.rtt()
        f.s2c(t, FIN_ACK)
        t += TURNAROUND_NS
        f.c2s(t, ACK)
        packets.extend(f.packets)
        manifest.append(f.entry(i, Label.ATTACK, profile_id))
    packets.sort(key=lambda p: p.ts_ns)
    return packets, manifest


def _opn_request(seq: int) -> bytes:
    body = (struct.pack("<I", 0) + uacp.encode_string(SECURITY_POLICY_NONE)
            + struct.pack("<iiII", -1, -1, seq, seq) + bytes(64))
    return uacp.encode(uacp.opaque("OPN", body))


def _opn_response(channel_id: int, seq: int) -> bytes:
    body = (struct.pack("<I", channel_id) + uacp.encode_string(SECURITY_POLICY_NONE)
            + struct.pack("<iiII", -1, -1, seq, seq) + bytes(80))
    return uacp.encode(uacp.opaque("OPN", body))


def _msg(channel_id: int, seq: int, size: int) -> bytes:
    body = struct.pack("<IIII", channel_id, 1, seq, seq)
    body += bytes(size - uacp.HEADER_LEN - len(body))
    return uacp.encode(uacp.opaque("MSG", body))


def _clo(channel_id: int, seq: int) -> bytes:
    return uacp.encode(uacp.opaque("CLO", struct.pack("<IIII", channel_id, 1, seq, seq)))


def synth_normal(profile: NormalProfile, seed: int | str = 0, *, base_rtt_ms: float = 20.0,
                 jitter_ms: float = 2.0, port_base: int = 49152,
                 profile_id: str = "normal-0") -> tuple[list[PacketRecord], list[ManifestEntry]]:
    rp = round_half_up(profile.request_period * NS_PER_S)
    sp = round_half_up(profile.session_period * NS_PER_S)
    t_begin = round_half_up(profile.t_start * NS_PER_S)
    t_stop = round_half_up(profile.t_end * NS_PER_S)
    server = (profile.server_ip, profile.server_port)
    url = f"opc.tcp://{profile.server_ip}:{profile.server_port}"
    hel_bytes = uacp.encode(uacp.hello(url))
    ack_bytes = uacp.encode(uacp.ack())

    packets: list[PacketRecord] = []
    manifest: list[ManifestEntry] = []
    flow_id = 0
    for c in range(profile.client_count):
        ip = profile.client_ip(c)
        stagger = c * rp // max(profile.client_count, 1)
        session = 0
        while True:
            s0 = t_begin + stagger + session * sp
            if s0 >= t_stop:
                break
            s_end = min(s0 + sp, t_stop)
            port = port_base + session
            if port > 65535:
                raise PortExhaustion(f"client {ip} ran out of source ports")
            timing = _Timing(_flow_rng(seed, profile_id, flow_id), base_rtt_ms, jitter_ms)
            channel = 1000 + flow_id
            f = _FlowBuilder((ip, port), server)
            t = s0
            f.c2s(t, SYN)
            t += timing.rtt()
            f.s2c(t, SYN_ACK)
            t += TURNAROUND_NS
            f.c2s(t, ACK)
            t += TURNAROUND_NS
            f.c2s(t, PSH_ACK, hel_bytes)
            f.hel_count += 1
            t += timing.rtt()
            f.s2c(t, PSH_ACK, ack_bytes)
            t += TURNAROUND_NS
            f.c2s(t, PSH_ACK, _opn_request(1))
            t += timing.rtt()
            f.s2c(t, PSH_ACK, _opn_response(channel, 1))
            k = 0
            while True:
                send = max(s0 + k * rp + rp // 2, t + TURNAROUND_NS)
                if send >= s_end:
                    break
                t = send
                f.c2s(t, PSH_ACK, _msg(channel, k + 2, profile.payload_size))
                t += timing.rtt()
                f.s2c(t, PSH_ACK, _msg(channel, k + 2, profile.payload_size))
                k += 1
            t += TURNAROUND_NS
            f.c2s(t, PSH_ACK, _clo(channel, k + 2))
            t += TURNAROUND_NS
            f.c2s(t, FIN_ACK)
            t += timing.rtt()
            f.s2c(t, FIN_ACK)
            t += TURNAROUND_NS
            f.c2s(t, ACK)
            packets.extend(f.packets)
            manifest.append(f.entry(flow_id, Label.NORMAL, profile_id))
            flow_id += 1
            session += 1
    packets.sort(key=lambda p: p.ts_ns)
    return packets, manifest


def compose(scenario: Scenario) -> tuple[list[PacketRecord], list[ManifestEntry]]:
    """Synthesize every profile and merge them into one time-ordered trace."""
    next_port: dict[str, int] = {}
    parts: list[list[PacketRecord]] = []
    manifest: list[ManifestEntry] = []
    timing = dict(base_rtt_ms=scenario.base_rtt_ms, jitter_ms=scenario.jitter_ms)

    def take_ports(ip: str, default_base: int, count: int) -> int:
        base = next_port.get(ip, default_base)
        next_port[ip] = base + count
        return base

    for idx, prof in enumerate(scenario.normal):
        sessions = math.ceil((prof.t_end - prof.t_start) / prof.session_period) + 1
        base = max(take_ports(prof.client_ip(c), 49152, sessions) for c in range(prof.client_count)) \
            if prof.client_count else 49152
        pkts, entries = synth_normal(prof, scenario.seed, port_base=base,
                                     profile_id=f"normal-{idx}", **timing)
        parts.append(pkts)
        manifest.extend(entries)
    for idx, prof in enumerate(scenario.attacks):
        base = take_ports(prof.attacker_ip, 1024, prof.flow_count)
        pkts, entries = synth_attack(prof, scenario.seed, port_base=base,
                                     profile_id=f"attack-{idx}", **timing)
        parts.append(pkts)
        manifest.extend(entries)

    _check_overlaps(manifest)
    trace = [p for part in parts for p in part]
    trace.sort(key=lambda p: p.ts_ns)
    manifest = [
        ManifestEntry(i, e.key, e.t_open, e.t_last, e.label, e.profile_id, e.pkt_count, e.hel_count)
        for i, e in enumerate(manifest)
    ]
    return trace, manifest


def _check_overlaps(manifest: Sequence[ManifestEntry]) -> None:
    by_tuple: dict[tuple, list[ManifestEntry]] = {}
    for e in manifest:
        by_tuple.setdefault(e.key.canonical, []).append(e)
    for tup, entries in by_tuple.items():
        entries.sort(key=lambda e: e.t_open)
        for a, b in zip(entries, entries[1:]):
            if b.t_open <= a.t_last:
                raise OverlapViolation(f"flows {a.profile_id}/{b.profile_id} reuse {tup} concurrently")


def attack_spans(manifest: Iterable[ManifestEntry]) -> dict[str, tuple[int, int]]:
    """First and last packet time of each attack profile in a manifest."""
    spans: dict[str, tuple[int, int]] = {}
    for e in manifest:
        if e.label is not Label.ATTACK:
            continue
        lo, hi = spans.get(e.profile_id, (e.t_open, e.t_last))
        spans[e.profile_id] = (min(lo, e.t_open), max(hi, e.t_last))
    return spans


def three_attack_scenario(seed: int = 3) -> Scenario:
    """Sixty seconds of normal traffic with three HEL floods.

    HEL_pF/m of 1/50 from 9 s, 50/1 from 26 s and 5/10 from 44 s; the
    creation durations (12, 12, 11 s) match the observed attack spans.
    """
    return Scenario(
        normal=[NormalProfile()],
        attacks=[
            AttackProfile(hel_per_flow=1, flow_rate=50, duration=12, t_start=9),
            AttackProfile(hel_per_flow=50, flow_rate=1, duration=12, t_start=26),
            AttackProfile(hel_per_flow=5, flow_rate=10, duration=11, t_start=44),
        ],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

MANIFEST_COLUMNS = (
    "flow_id", "initiator_ip", "initiator_port", "responder_ip", "responder_port",
    "t_open_ns", "t_last_ns", "label", "profile_id", "pkt_count", "hel_count",
)


def write_manifest(manifest: Iterable[ManifestEntry], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in manifest:
            w.writerow([e.flow_id, e.key.initiator_ip, e.key.initiator_port,
                        e.key.responder_ip, e.key.responder_port, e.t_open, e.t_last,
                        e.label.value, e.profile_id, e.pkt_count, e.hel_count])


def read_manifest(path) -> list[ManifestEntry]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise ValueError(f"{path}: not a ground-truth manifest")
        try:
            return [
                ManifestEntry(
                    int(r["flow_id"]),
                    FlowKey(r["initiator_ip"], int(r["initiator_port"]),
                            r["responder_ip"], int(r["responder_port"])),
                    int(r["t_open_ns"]), int(r["t_last_ns"]), Label(r["label"]),
                    r["profile_id"], int(r["pkt_count"]), int(r["hel_count"]),
                )
                for r in reader
            ]
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{path}: {exc}") from None


_ATTACK_KEYS = {
    "hel_pf": "hel_per_flow", "m": "flow_rate", "d": "duration", "t_start": "t_start",
    "attacker_ip": "attacker_ip", "victim_ip": "victim_ip", "victim_port": "victim_port",
    "valid_hello": "valid_hello",
}
_NORMAL_KEYS = {
    "client_count", "session_period", "request_period", "payload_size", "t_start",
    "t_end", "client_ip_base", "server_ip", "server_port",
}


def parse_scenario(text: str) -> Scenario:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"invalid scenario syntax: {exc}") from None
    top = {"seed", "base_rtt_ms", "jitter_ms", "normal", "attack"}
    unknown = set(doc) - top
    if unknown:
        raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
    try:
        normal = []
        for block in doc.get("normal", []):
            extra = set(block) - _NORMAL_KEYS
            if extra:
                raise ScenarioError(f"unknown [[normal]] keys: {sorted(extra)}")
            normal.append(NormalProfile(**block))
        attacks = []
        for block in doc.get("attack", []):
            extra = set(block) - set(_ATTACK_KEYS)
            if extra:
                raise ScenarioError(f"unknown [[attack]] keys: {sorted(extra)}")
            attacks.append(AttackProfile(**{_ATTACK_KEYS[k]: v for k, v in block.items()}))
        scenario = Scenario(normal, attacks, int(doc.get("seed", 0)),
                            float(doc.get("base_rtt_ms", 20.0)), float(doc.get("jitter_ms", 2.0)))
    except (TypeError, ValueError, SynthError) as exc:
        raise ScenarioError(str(exc)) from None
    if scenario.base_rtt_ms < 0 or scenario.jitter_ms < 0:
        raise ScenarioError("base_rtt_ms and jitter_ms must be non-negative")
    return scenario


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())
