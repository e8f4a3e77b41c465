"""Phenomenological model of an OPC UA server under HEL flooding.

CPU load per sampling period is the summed processing cost of the packets
and Hello messages the server received, divided by the period and clamped
at ``cpu_cap``. Memory (a PSS proxy) holds a base footprint, a fixed amount
per open connection, and a buffer for every Hello received on a connection
that is still open; both are released when the connection closes. The
process terminates the first time memory would exceed ``memory_limit``;
from then on samples report the limit itself as their memory.

All coefficients are calibration constants for desk-scale traces, not
measurements of any particular server.
"""

from __future__ import annotations

import csv
import enum
import math
import sys
from collections import Counter
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

from .capture import PacketRecord, TcpFlags
from .synth import AttackProfile, synth_attack
from .uacp import ScannedMessage, StreamScanner

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

NS_PER_S = 1_000_000_000
KIB = 1024
MIB = 1024 * KIB

# plain ints keep the per-packet loop free of IntFlag arithmetic
_SYN = int(TcpFlags.SYN)
_ACK = int(TcpFlags.ACK)
_CLOSING = int(TcpFlags.FIN | TcpFlags.RST)


class ServerStatus(str, enum.Enum):
    RUNNING = "Running"
    TERMINATED = "Terminated"


@dataclass(frozen=True)
class ResourceParams:
    cpu_cap: float = 0.80
    cpu_cost_per_packet: float = 50e-6
    cpu_cost_per_hel: float = 200e-6
    pss_base: int = 32 * MIB
    pss_per_connection: int = 16 * KIB
    pss_per_hel: int = 64 * KIB
    memory_limit: int = 512 * MIB
    sample_period_ns: int = 200_000_000

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if self.memory_limit <= self.pss_base:
            raise ValueError("memory_limit must exceed pss_base")
        if self.sample_period_ns <= 0:
            raise ValueError("sample_period_ns must be positive")
        if self.cpu_cap > 1:
            raise ValueError("cpu_cap is a fraction of one core")

    def flow_cost(self, hel_per_flow: int, packets_per_flow: int) -> float:
        """CPU-seconds the server spends on one attack flow."""
        return packets_per_flow * self.cpu_cost_per_packet + hel_per_flow * self.cpu_cost_per_hel

    def saturation_rate(self, hel_per_flow: int) -> float:
        """Flows per second at which an HEL flood demands exactly ``cpu_cap``.

        A flood flow delivers SYN, ACK, its Hellos, FIN and a final ACK to
        the server.
        """
        return self.cpu_cap / self.flow_cost(hel_per_flow, 4 + hel_per_flow)


@dataclass(frozen=True)
class ResourceSample:
    t: int
    cpu_util: float
    pss_bytes: int
    status: ServerStatus


def load_params(path) -> ResourceParams:
    """Read ResourceParams overrides from a TOML file; raises ValueError."""
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValueError(f"{path}: {exc}") from None
    known = {f.name for f in fields(ResourceParams)}
    extra = set(doc) - known
    if extra:
        raise ValueError(f"{path}: unknown parameters {sorted(extra)}")
    try:
        return ResourceParams(**doc)
    except TypeError as exc:
        raise ValueError(f"{path}: {exc}") from None


def infer_victim(trace: Iterable[PacketRecord]) -> tuple[str, int] | None:
    """The endpoint receiving the most connection attempts (SYN without ACK)."""
    syns = Counter((p.dst_ip, p.dst_port) for p in trace
                   if p.tcp_flags & TcpFlags.SYN and not p.tcp_flags & TcpFlags.ACK)
    if not syns:
        return None
    return min(syns.items(), key=lambda kv: (-kv[1], kv[0]))[0]


def simulate(trace: Sequence[PacketRecord], params: ResourceParams = ResourceParams(),
             victim: tuple[str, int] | None = None, t_start_ns: int | None = None,
             t_end_ns: int | None = None) -> list[ResourceSample]:
    """Sample the server state every ``params.sample_period_ns``.

    Samples cover ``[t_start_ns, t_end_ns)``, by default the span of the
    trace. ``pss_bytes`` is the peak reached inside each period. The victim
    endpoint is inferred from SYN targets when not given.
    """
    if victim is None:
        victim = infer_victim(trace)
    if t_start_ns is None:
        t_start_ns = trace[0].ts_ns if trace else 0
    if t_end_ns is None:
        t_end_ns = trace[-1].ts_ns + 1 if trace else t_start_ns
    period = params.sample_period_ns
    n = max(0, math.ceil((t_end_ns - t_start_ns) / period))

    pkts = [0] * n  # victim-bound packets per period
    hels = [0] * n  # Hello messages per period
    peak = [0] * n
    terminated_at: int | None = None  # sample index
    frozen_pss = params.pss_base

    # every victim connection is identified by its peer endpoint
    open_conns: dict[tuple, list] = {}  # peer -> [hels held, scanner]
    closed: set[tuple] = set()
    whole_payloads: dict[bytes, int] = {}  # payload -> HELs, for scans that leave no residue
    hel_held = 0
    pss = params.pss_base
    cur = -1  # last period whose peak has been initialised
    v_ip, v_port = victim if victim is not None else (None, None)
    base, per_conn, per_hel = params.pss_base, params.pss_per_connection, params.pss_per_hel
    limit = params.memory_limit

    for pkt in trace:
        k = (pkt.ts_ns - t_start_ns) // period
        if k >= n:
            break
        while cur < k:
            cur += 1
            peak[cur] = pss
        if pkt.dst_port == v_port and pkt.dst_ip == v_ip:
            to_victim = True
            peer = (pkt.src_ip, pkt.src_port)
        elif pkt.src_port == v_port and pkt.src_ip == v_ip:
            to_victim = False
            peer = (pkt.dst_ip, pkt.dst_port)
        else:
            continue
        flags = int(pkt.tcp_flags)
        conn = open_conns.get(peer)
        if to_victim:
            if conn is None and ((flags & _SYN and not flags & _ACK) or peer not in closed):
                conn = open_conns[peer] = [0, StreamScanner()]
                closed.discard(peer)
            if k >= 0:
                pkts[k] += 1
            if conn is not None and pkt.payload:
                scanner = conn[1]
                n_hel = whole_payloads.get(pkt.payload) if scanner.idle else None
                if n_hel is None:
                    was_idle = scanner.idle
                    items = scanner.feed(pkt.payload)
                    n_hel = sum(1 for item in items if isinstance(item, ScannedMessage)
                                and item.message.msg_type == "HEL")
                    if was_idle and scanner.idle and all(isinstance(i, ScannedMessage) for i in items):
                        # self-contained payload: later copies scan identically
                        whole_payloads[pkt.payload] = n_hel
                if n_hel:
                    conn[0] += n_hel
                    hel_held += n_hel
                    if k >= 0:
                        hels[k] += n_hel
        if conn is not None and flags & _CLOSING:
            hel_held -= conn[0]
            del open_conns[peer]
            closed.add(peer)
        pss = base + per_conn * len(open_conns) + per_hel * hel_held
        if k >= 0 and pss > peak[k]:
            if pss > limit:
                # killed on reaching the limit, usage is never observed above it
                terminated_at = k
                peak[k] = frozen_pss = limit
                break
            peak[k] = pss
    while cur < n - 1:
        cur += 1
        peak[cur] = pss

    secs = period / NS_PER_S
    samples = []
    for i in range(n):
        t = t_start_ns + i * period
        demand = pkts[i] * params.cpu_cost_per_packet + hels[i] * params.cpu_cost_per_hel
        cpu = min(params.cpu_cap, demand / secs)
        if terminated_at is None or i < terminated_at:
            samples.append(ResourceSample(t, cpu, peak[i], ServerStatus.RUNNING))
        else:
            # the process dies inside this period and does no further work
            samples.append(ResourceSample(t, cpu if i == terminated_at else 0.0,
                                          frozen_pss, ServerStatus.TERMINATED))
    return samples


@dataclass(frozen=True)
class SweepRow:
    flow_number: int
    hel_pf: int
    mean_cpu: float
    peak_pss: int
    terminated: bool


def _measure(samples: Sequence[ResourceSample], window_ns: int) -> tuple[float, int, bool]:
    """Mean CPU over the flow-creation window (until termination), peak PSS, died?"""
    cpu = []
    for s in samples:
        if s.t - samples[0].t >= window_ns:
            break
        cpu.append(s.cpu_util)
        if s.status is ServerStatus.TERMINATED:
            break
    peak_pss = max((s.pss_bytes for s in samples), default=0)
    died = any(s.status is ServerStatus.TERMINATED for s in samples)
    mean = min(max(cpu, default=0.0), math.fsum(cpu) / len(cpu)) if cpu else 0.0
    return mean, peak_pss, died


def sweep(flow_numbers: Iterable[int], hel_pf_values: Iterable[int],
          params: ResourceParams = ResourceParams(), repetitions: int = 3, seed: int = 0,
          *, duration: float = 1.0, idle_s: float = 10.0, base_rtt_ms: float = 20.0,
          jitter_ms: float = 2.0) -> list[SweepRow]:
    """Attack the model over a (flow number x HEL_pF) grid.

    Each cell runs ``repetitions`` floods of ``flow_number`` flows per
    second for ``duration`` seconds with distinct jitter seeds. CPU is the
    mean over repetitions of the per-run average during flow creation; PSS
    is the largest peak of any run. Flow number 0 measures an idle server
    over ``idle_s`` seconds.
    """
    hel_pf_values = list(hel_pf_values)
    rows = []
    for fn in flow_numbers:
        for pf in hel_pf_values:
            if fn == 0:
                idle = simulate([], params, t_start_ns=0, t_end_ns=round(idle_s * NS_PER_S))
                mean_cpu, peak_pss, died = _measure(idle, round(idle_s * NS_PER_S))
                rows.append(SweepRow(0, pf, mean_cpu, peak_pss, died))
                continue
            profile = AttackProfile(hel_per_flow=pf, flow_rate=fn, duration=duration)
            victim = (profile.victim_ip, profile.victim_port)
            cpus, peaks, died = [], [], False
            for rep in range(repetitions):
                trace, _ = synth_attack(profile, f"{seed}.{rep}", base_rtt_ms=base_rtt_ms,
                                        jitter_ms=jitter_ms, profile_id="sweep")
                end = trace[-1].ts_ns + 1 if trace else 0
                samples = simulate(trace, params, victim, t_start_ns=0, t_end_ns=end)
                c, p, d = _measure(samples, round(duration * NS_PER_S))
                cpus.append(c)
                peaks.append(p)
                died = died or d
            # summation rounding can lift an average of capped values past the cap
            mean_cpu = min(params.cpu_cap, math.fsum(cpus) / len(cpus))
            rows.append(SweepRow(fn, pf, mean_cpu, max(peaks), died))
    return rows


def export_samples(samples: Iterable[ResourceSample], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("t_ns", "cpu_util", "pss_bytes", "status"))
        for s in samples:
            w.writerow((s.t, repr(float(s.cpu_util)), s.pss_bytes, s.status.value))


def export_sweep(rows: Iterable[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("flow_number", "hel_pf", "mean_cpu", "peak_pss_bytes", "terminated"))
        for r in rows:
            w.writerow((r.flow_number, r.hel_pf, repr(float(r.mean_cpu)), r.peak_pss,
                        int(r.terminated)))
