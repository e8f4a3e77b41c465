"""Tumbling-window traffic features and labelled dataset export.

Feature definitions (one value per window):

hel_packet_count
    UACP Hello messages whose first byte arrived in the window, all flows.
parallel_flow_count
    Flows whose [open, close] lifetime overlaps the window; flows that never
    closed extend to the end of the trace.
max_request_burst
    Largest number of client-to-server UACP messages any single flow sent in
    the window.
avg_iat_ms
    Mean gap between consecutive packets of the window, in milliseconds;
    0 for windows holding fewer than two packets.
avg_packet_size
    Mean on-wire packet length in bytes; 0 for empty windows.
"""

from __future__ import annotations

import bisect
import csv
import warnings
from collections import Counter
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .capture import PacketRecord
from .flows import Label, MessageSeen, packet_tuple

DEFAULT_WINDOW_NS = 500_000_000

CSV_COLUMNS = (
    "window_index", "t_start_ns", "t_end_ns", "hel_packet_count",
    "parallel_flow_count", "max_request_burst", "avg_iat_ms",
    "avg_packet_size", "attack_fraction", "label",
)
FEATURE_NAMES = (
    "hel_packet_count", "parallel_flow_count", "max_request_burst",
    "avg_iat_ms", "avg_packet_size",
)


class ManifestMismatch(UserWarning):
    """Trace packets belong to flows the ground-truth manifest does not list."""


@dataclass
class FeatureWindow:
    window_index: int
    t_start: int
    t_end: int
    hel_packet_count: int = 0
    parallel_flow_count: int = 0
    max_request_burst: int = 0
    avg_iat_ms: float = 0.0
    avg_packet_size: float = 0.0
    attack_fraction: float = 0.0
    label: Label = Label.UNKNOWN
    packet_count: int = 0
    attack_packet_count: int = 0
    partial: bool = False

    def features(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in FEATURE_NAMES}


def windowize(packets: Sequence[PacketRecord], events: Iterable, intervals: Iterable,
              window_len_ns: int = DEFAULT_WINDOW_NS,
              trace_end_ns: int | None = None) -> list[FeatureWindow]:
    """Compute features over tumbling windows aligned to the first packet.

    ``events`` are flow-tracker events (only MessageSeen is used) and
    ``intervals`` the tracker's ``(key, t_open, t_close_or_None)`` tuples.
    Returns an empty list for an empty trace.
    """
    if window_len_ns <= 0:
        raise ValueError("window length must be positive")
    if not packets:
        return []
    origin = min(p.ts_ns for p in packets)
    last = max(p.ts_ns for p in packets)
    n = (last - origin) // window_len_ns + 1
    trace_end = last + 1 if trace_end_ns is None else trace_end_ns

    count = [0] * n
    size_sum = [0] * n
    first_ts = [0] * n
    last_ts = [0] * n
    for p in packets:
        w = (p.ts_ns - origin) // window_len_ns
        if count[w] == 0:
            first_ts[w] = last_ts[w] = p.ts_ns
        else:
            if p.ts_ns < first_ts[w]:
                first_ts[w] = p.ts_ns
            if p.ts_ns > last_ts[w]:
                last_ts[w] = p.ts_ns
        count[w] += 1
        size_sum[w] += p.wire_len

    hel = [0] * n
    requests: list[Counter] = [Counter() for _ in range(n)]
    for ev in events:
        if not isinstance(ev, MessageSeen):
            continue
        w = (ev.ts - origin) // window_len_ns
        if not 0 <= w < n:
            continue
        if ev.message.msg_type == "HEL":
            hel[w] += 1
        if ev.from_initiator:
            requests[w][ev.flow_id] += 1

    # difference array over window indices touched by each lifetime
    delta = [0] * (n + 1)
    for _key, t_open, t_close in intervals:
        end = last if t_close is None else t_close
        lo = max(0, (t_open - origin) // window_len_ns)
        hi = min(n - 1, (end - origin) // window_len_ns)
        if hi < lo:
            continue
        delta[lo] += 1
        delta[hi + 1] -= 1

    windows = []
    running = 0
    for w in range(n):
        running += delta[w]
        t_start = origin + w * window_len_ns
        c = count[w]
        windows.append(FeatureWindow(
            window_index=w,
            t_start=t_start,
            t_end=t_start + window_len_ns,
            hel_packet_count=hel[w],
            parallel_flow_count=running,
            max_request_burst=max(requests[w].values(), default=0),
            avg_iat_ms=(last_ts[w] - first_ts[w]) / (c - 1) / 1e6 if c >= 2 else 0.0,
            avg_packet_size=size_sum[w] / c if c else 0.0,
            packet_count=c,
            partial=t_start + window_len_ns > trace_end,
        ))
    return windows


class PacketLabeler:
    """Maps packets to manifest labels by connection tuple and open time."""

    def __init__(self, manifest: Iterable):
        self._index: dict[tuple, tuple[list[int], list[Label]]] = {}
        rows = sorted(((e.key.canonical, e.t_open, Label(e.label)) for e in manifest),
                      key=lambda r: (r[0], r[1]))
        for tup, t_open, label in rows:
            opens, labels = self._index.setdefault(tup, ([], []))
            opens.append(t_open)
            labels.append(label)

    def label(self, pkt: PacketRecord) -> Label:
        entry = self._index.get(packet_tuple(pkt))
        if entry is None:
            return Label.UNKNOWN
        opens, labels = entry
        i = bisect.bisect_right(opens, pkt.ts_ns) - 1
        return labels[i] if i >= 0 else Label.UNKNOWN


def label_windows(windows: Sequence[FeatureWindow], packets: Iterable[PacketRecord],
                  manifest: Iterable) -> list[FeatureWindow]:
    """Attach attack fractions: attack-flow packets over all packets per window.

    Packets of flows missing from the manifest stay in the denominator only,
    and a ManifestMismatch warning is issued.
    """
    if not windows:
        return []
    labeler = PacketLabeler(manifest)
    origin = windows[0].t_start
    width = windows[0].t_end - windows[0].t_start
    total = [0] * len(windows)
    attack = [0] * len(windows)
    unknown = 0
    for p in packets:
        w = (p.ts_ns - origin) // width
        if not 0 <= w < len(windows):
            continue
        lab = labeler.label(p)
        total[w] += 1
        if lab is Label.ATTACK:
            attack[w] += 1
        elif lab is Label.UNKNOWN:
            unknown += 1
    if unknown:
        warnings.warn(ManifestMismatch(f"{unknown} packets belong to flows absent from the manifest"),
                      stacklevel=2)
    out = []
    for win, t, a in zip(windows, total, attack):
        frac = a / t if t else 0.0
        out.append(replace(win, attack_fraction=frac, attack_packet_count=a,
                           label=Label.ATTACK if frac > 0 else Label.NORMAL))
    return out


def export_dataset(windows: Iterable[FeatureWindow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for win in windows:
            w.writerow([
                win.window_index, win.t_start, win.t_end, win.hel_packet_count,
                win.parallel_flow_count, win.max_request_burst,
                repr(float(win.avg_iat_ms)), repr(float(win.avg_packet_size)),
                repr(float(win.attack_fraction)), win.label.value,
            ])


def read_dataset(path) -> list[FeatureWindow]:
    """Load a CSV written by ``export_dataset``; raises ValueError if malformed."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header!r}")
        windows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} fields")
            try:
                windows.append(FeatureWindow(
                    window_index=int(row[0]), t_start=int(row[1]), t_end=int(row[2]),
                    hel_packet_count=int(row[3]), parallel_flow_count=int(row[4]),
                    max_request_burst=int(row[5]), avg_iat_ms=float(row[6]),
                    avg_packet_size=float(row[7]), attack_fraction=float(row[8]),
                    label=Label(row[9]),
                ))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return windows
