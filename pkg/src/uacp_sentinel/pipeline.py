"""Trace to labelled feature windows: flow tracking, windowing, labelling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .capture import PacketRecord
from .features import DEFAULT_WINDOW_NS, FeatureWindow, label_windows, windowize
from .flows import FlowEvent, FlowRecord, FlowTracker, label_flows


@dataclass
class Analysis:
    windows: list[FeatureWindow]
    flows: list[FlowRecord]
    events: list[FlowEvent]
    late_packets: int = 0


def analyze(packets: Sequence[PacketRecord], manifest=None,
            window_len_ns: int = DEFAULT_WINDOW_NS) -> Analysis:
    tracker = FlowTracker()
    events: list[FlowEvent] = []
    for pkt in packets:
        events.extend(tracker.observe(pkt))
    events.extend(tracker.flush())
    # taken before finalize so never-closed flows stay open-ended
    intervals = tracker.active_flow_intervals()
    flows, tail = tracker.finalize()
    events.extend(tail)
    windows = windowize(packets, events, intervals, window_len_ns)
    if manifest is not None:
        label_flows(flows, manifest)
        windows = label_windows(windows, packets, manifest)
    return Analysis(windows, flows, events, tracker.late_packets)
