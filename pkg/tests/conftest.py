import random
import socket
import struct

import pytest
from hypothesis import strategies as st

from uacp_sentinel.capture import PacketRecord, TcpFlags, frame_len

ipv4 = st.integers(0x01000000, 0xDFFFFFFF).map(lambda n: socket.inet_ntoa(struct.pack("!I", n)))
ports = st.integers(0, 0xFFFF)
flags = st.integers(0, 31).map(TcpFlags)


@st.composite
def packet_records(draw, max_payload=200):
    payload = draw(st.binary(max_size=max_payload))
    extra = draw(st.integers(0, 1500))
    return PacketRecord(
        ts_ns=0, src_ip=draw(ipv4), dst_ip=draw(ipv4), src_port=draw(ports),
        dst_port=draw(ports), tcp_flags=draw(flags), payload=payload,
        wire_len=frame_len(len(payload)) + extra,
    )


@st.composite
def ordered_traces(draw, min_size=0, max_size=50, resolution_ns=1):
    recs = draw(st.lists(packet_records(), min_size=min_size, max_size=max_size))
    gaps = draw(st.lists(st.integers(0, 5_000_000_000), min_size=len(recs), max_size=len(recs)))
    out, t = [], 0
    for rec, gap in zip(recs, gaps):
        t += gap - gap % resolution_ns
        out.append(PacketRecord(t, rec.src_ip, rec.dst_ip, rec.src_port, rec.dst_port,
                                rec.tcp_flags, rec.payload, rec.wire_len))
    return out


def random_records(n: int, seed: int = 0, resolution_ns: int = 1) -> list[PacketRecord]:
    rng = random.Random(seed)
    out, t = [], 0
    for _ in range(n):
        t += rng.randrange(0, 2_000_000_000) // resolution_ns * resolution_ns
        payload = rng.randbytes(rng.choice((0, 0, 8, rng.randrange(1, 1400))))
        out.append(PacketRecord(
            t, socket.inet_ntoa(rng.randbytes(4)), socket.inet_ntoa(rng.randbytes(4)),
            rng.randrange(65536), rng.randrange(65536), TcpFlags(rng.randrange(32)), payload,
            frame_len(len(payload)) + rng.choice((0, 0, rng.randrange(1, 3000)))))
    return out


# acceptance reporting: each criterion test records one line here
ACCEPTANCE_RESULTS: dict[str, str] = {}


@pytest.fixture
def criterion(request):
    def record(number: int, title: str):
        ACCEPTANCE_RESULTS[request.node.nodeid] = f"criterion {number}: {title}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    outcomes = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when == "call" or rep.outcome != "passed":
                outcomes[rep.nodeid] = rep.outcome
    terminalreporter.section("acceptance criteria")
    for nodeid, line in sorted(ACCEPTANCE_RESULTS.items(), key=lambda kv: kv[1]):
        status = "PASS" if outcomes.get(nodeid) == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {line}")
