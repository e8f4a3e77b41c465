import random
from collections import Counter

from hypothesis import given, settings
from hypothesis import strategies as st

from uacp_sentinel.capture import PacketRecord, TcpFlags, frame_len
from uacp_sentinel.flows import (FLOW_CSV_COLUMNS, FlowClosed, FlowKey, FlowOpened, FlowState,
                                 FlowTracker, Label, MessageSeen, export_flows, label_flows, track)
from uacp_sentinel.synth import AttackProfile, compose, three_attack_scenario, synth_attack
from uacp_sentinel.uacp import encode, hello

S, SA, A = TcpFlags.SYN, TcpFlags.SYN | TcpFlags.ACK, TcpFlags.ACK
FA, PA, R = TcpFlags.FIN | TcpFlags.ACK, TcpFlags.PSH | TcpFlags.ACK, TcpFlags.RST
CLIENT, SERVER = ("10.0.0.1", 50000), ("10.0.0.2", 4840)


def pkt(ts_ms, flags, payload=b"", forward=True, client=CLIENT):
    src, dst = (client, SERVER) if forward else (SERVER, client)
    return PacketRecord(int(ts_ms * 1_000_000), src[0], dst[0], src[1], dst[1], flags, payload,
                        frame_len(len(payload)))


def handshake_flow(t0=0, client=CLIENT, close=FA):
    return [pkt(t0, S, client=client), pkt(t0 + 20, SA, forward=False, client=client),
            pkt(t0 + 21, A, client=client), pkt(t0 + 22, PA, encode(hello("opc.tcp://x")), client=client),
            pkt(t0 + 30, close, client=client), pkt(t0 + 50, FA, forward=False, client=client)]


def run(packets, **kw):
    tracker, events = track(packets, **kw)
    intervals = tracker.active_flow_intervals()
    records, tail = tracker.finalize()
    return records, events + tail, intervals


def test_single_flow_walkthrough():
    records, events, _ = run(handshake_flow())
    assert [type(e) for e in events] == [FlowOpened, MessageSeen, FlowClosed]
    assert events[1].message.msg_type == "HEL" and events[1].from_initiator
    (rec,) = records
    assert rec.hel_count == 1 and rec.uacp_counts == Counter(HEL=1)
    assert rec.state is FlowState.CLOSED and rec.t_close == 50_000_000
    assert rec.key == FlowKey(*CLIENT, *SERVER)
    assert rec.pkt_count == 6 and rec.byte_count == sum(p.wire_len for p in handshake_flow())


def test_rst_closes():
    packets = handshake_flow()[:4] + [pkt(40, R, forward=False)]
    records, events, _ = run(packets)
    assert isinstance(events[-1], FlowClosed) and events[-1].reason == "rst"
    assert records[0].t_close == 40_000_000


def test_attack_trace_opens_fifty_flows_with_distinct_ports():
    trace, manifest = synth_attack(AttackProfile(hel_per_flow=1, flow_rate=50, duration=1), seed=7)
    records, events, intervals = run(trace)
    opened = [e for e in events if isinstance(e, FlowOpened)]
    assert len(opened) == 50
    assert len({e.key.initiator_port for e in opened}) == 50
    assert all(e.state is FlowState.HANDSHAKING for e in opened)
    assert sum(r.hel_count for r in records) == 50
    # intervals against the manifest oracle: every flow lives inside its manifest span
    # and overlaps the attack second
    by_port = {m.key.initiator_port: m for m in manifest}
    assert len(intervals) == 50
    for key, t_open, t_close in intervals:
        m = by_port[key.initiator_port]
        assert t_open == m.t_open and t_close is not None and t_open < t_close <= m.t_last
        assert t_open < 1_000_000_000


def test_mid_capture_join_is_established():
    trace = handshake_flow()[3:]
    records, events, _ = run(trace)
    assert isinstance(events[0], FlowOpened) and events[0].state is FlowState.ESTABLISHED
    assert records[0].hel_count == 1


def test_syn_ack_first_orients_key_to_client():
    records, _, _ = run(handshake_flow()[1:])
    assert records[0].key == FlowKey(*CLIENT, *SERVER)


def test_finalize_closes_open_flow_at_last_packet():
    records, events, intervals = run([pkt(0, S), pkt(5000, A)])
    assert intervals[0][2] is None
    assert records[0].state is FlowState.CLOSED and records[0].t_close == 5_000_000_000
    assert events[-1].reason == "finalize"


def test_empty_tracker():
    assert run([]) == ([], [], [])


def test_trailing_ack_stays_with_closed_flow_and_new_syn_reopens():
    packets = handshake_flow() + [pkt(51, A)] + handshake_flow(t0=100)
    records, events, _ = run(packets)
    assert len(records) == 2
    assert records[0].pkt_count == 7 and records[1].pkt_count == 6
    assert sum(isinstance(e, FlowOpened) for e in events) == 2


def test_idle_timeout_splits_reused_tuple():
    packets = [pkt(0, PA, b"x"), pkt(61_000 + 1, PA, b"y")]
    records, events, _ = run(packets)
    assert len(records) == 2
    closed = [e for e in events if isinstance(e, FlowClosed)]
    assert closed[0].reason == "idle" and closed[0].ts == 0


def test_small_reordering_is_repaired():
    flow = handshake_flow(t0=10)
    # the SYN-ACK shows up 0.5 ms before the SYN it answers
    syn = flow[0]
    syn_ack = PacketRecord(syn.ts_ns - 500_000, SERVER[0], CLIENT[0], SERVER[1], CLIENT[1], SA,
                           b"", frame_len(0))
    tracker = FlowTracker()
    for p in [syn, syn_ack] + flow[2:]:
        tracker.observe(p)
    records, events = tracker.finalize()
    assert tracker.late_packets == 0
    assert records[0].key == FlowKey(*CLIENT, *SERVER)
    assert records[0].t_first == syn_ack.ts_ns


def test_late_packet_beyond_tolerance_is_counted():
    tracker = FlowTracker()
    tracker.observe(pkt(0, S))
    tracker.observe(pkt(10, A))
    tracker.observe(pkt(5, A))
    records, _ = tracker.finalize()
    assert tracker.late_packets == 1
    assert records[0].pkt_count == 3


def test_three_attacks_replay_matches_manifest():
    trace, manifest = compose(three_attack_scenario())
    records, _, _ = run(trace)
    assert len(records) == len(manifest)
    assert label_flows(records, manifest) == 0
    assert sum(r.pkt_count for r in records) == len(trace)
    key = lambda k: (k.initiator_ip, k.initiator_port, k.responder_ip, k.responder_port)
    want = Counter((key(m.key), m.hel_count, m.pkt_count, m.label) for m in manifest)
    got = Counter((key(r.key), r.hel_count, r.pkt_count, r.label) for r in records)
    assert got == want
    attack_hels = sum(r.hel_count for r in records if r.label is Label.ATTACK)
    assert attack_hels == 1 * 600 + 50 * 12 + 5 * 110


def rechunk(trace, rng):
    """Split every payload-bearing packet into several segments at the same instant."""
    out = []
    for p in trace:
        if len(p.payload) < 2:
            out.append(p)
            continue
        cuts = sorted(rng.sample(range(1, len(p.payload)), min(3, len(p.payload) - 1)))
        bounds = [0, *cuts, len(p.payload)]
        for a, b in zip(bounds, bounds[1:]):
            seg = p.payload[a:b]
            out.append(PacketRecord(p.ts_ns, p.src_ip, p.dst_ip, p.src_port, p.dst_port,
                                    p.tcp_flags if b == len(p.payload) else PA, seg,
                                    frame_len(len(seg))))
    return out


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 20), st.integers(1, 15), st.integers(0, 2**32))
def test_counters_invariant_under_rechunking(hel_pf, m, seed):
    trace, manifest = synth_attack(AttackProfile(hel_pf, m, 1), seed=seed)
    records, _, _ = run(trace)
    split = rechunk(trace, random.Random(seed))
    records2, _, _ = run(split)
    assert sum(r.pkt_count for r in records) == len(trace)
    assert sum(r.pkt_count for r in records2) == len(split)
    assert [(r.key, r.uacp_counts, r.desync_count) for r in records] == \
        [(r.key, r.uacp_counts, r.desync_count) for r in records2]
    assert sum(r.hel_count for r in records) == hel_pf * len(manifest)


def test_flow_csv(tmp_path):
    records, _, _ = run(handshake_flow())
    path = tmp_path / "flows.csv"
    export_flows(records, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(FLOW_CSV_COLUMNS)
    row = dict(zip(FLOW_CSV_COLUMNS, lines[1].split(",")))
    assert row["hel_count"] == "1" and row["state"] == "Closed" and row["label"] == "Unknown"
