"""uacp-sentinel command line.

Exit codes: 0 success, 1 I/O or parse failure, 2 bad configuration,
3 analysis precondition not met (e.g. no baseline can be fitted).
Set UACP_SENTINEL_LOG=DEBUG|INFO|WARNING to change verbosity.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
import tempfile
from collections import Counter
from pathlib import Path

from . import __version__
from .capture import CaptureError, TraceMeta, read_trace, write_trace
from .detector import (BaselineProfile, ContaminatedInput, InsufficientData, Verdict,
                       evaluate, export_alerts, fit_baseline, score)
from .features import FEATURE_NAMES, export_dataset, read_dataset
from .flows import Label, export_flows
from .pipeline import analyze
from .synth import (AttackProfile, Scenario, ScenarioError, SynthError, compose,
                    load_scenario, read_manifest, write_manifest)
from .victim import ResourceParams, export_samples, export_sweep, load_params, simulate, sweep

log = logging.getLogger("uacp_sentinel")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_PRECONDITION = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@contextlib.contextmanager
def _atomic_outputs(*paths):
    """Yield temp paths that replace ``paths`` only if the block succeeds."""
    temps = []
    try:
        for p in paths:
            p = Path(p)
            fd, tmp = tempfile.mkstemp(prefix=f".{p.name}.", dir=p.parent if str(p.parent) else ".")
            os.close(fd)
            temps.append(tmp)
        yield temps
        for tmp, p in zip(temps, paths):
            os.replace(tmp, p)
        temps = []
    except OSError as exc:
        raise CliError(f"cannot write output: {exc}", EXIT_IO) from None
    finally:
        for tmp in temps:
            with contextlib.suppress(OSError):
                os.unlink(tmp)


def _sibling(path: str, suffix: str) -> str:
    p = Path(path)
    return str(p.with_name(p.stem + suffix))


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("need at least one non-negative integer")
    return values


def _endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected IP:PORT, got {text!r}")
    return host, int(port)


def _load_params(path) -> ResourceParams:
    if path is None:
        return ResourceParams()
    try:
        return load_params(path)
    except FileNotFoundError:
        raise CliError(f"params file not found: {path}", EXIT_CONFIG) from None
    except ValueError as exc:
        raise CliError(f"bad victim params: {exc}", EXIT_CONFIG) from None


def _read_trace(path, strip_gtpu=False):
    try:
        meta, packets = read_trace(path, strip_gtpu=strip_gtpu)
    except (OSError, CaptureError) as exc:
        raise CliError(f"cannot read trace {path}: {exc}", EXIT_IO) from None
    if meta.skipped:
        log.info("skipped frames: %s", dict(meta.skipped))
    return packets


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.kind == "attack":
        if args.scenario:
            raise CliError("give either 'attack' parameters or --scenario, not both", EXIT_CONFIG)
        try:
            profile = AttackProfile(args.hel_pf, args.m, args.d, t_start=args.t_start,
                                    attacker_ip=args.attacker_ip, victim_ip=args.victim[0],
                                    victim_port=args.victim[1], valid_hello=not args.invalid_hello)
        except SynthError as exc:
            raise CliError(str(exc), EXIT_CONFIG) from None
        scenario = Scenario(attacks=[profile], seed=args.seed or 0,
                            base_rtt_ms=args.base_rtt_ms, jitter_ms=args.jitter_ms)
    elif args.scenario:
        try:
            scenario = load_scenario(args.scenario)
        except FileNotFoundError:
            raise CliError(f"scenario file not found: {args.scenario}", EXIT_CONFIG) from None
        except (ScenarioError, UnicodeDecodeError) as exc:
            raise CliError(f"bad scenario: {exc}", EXIT_CONFIG) from None
        if args.seed is not None:
            scenario.seed = args.seed
    else:
        raise CliError("nothing to synthesize: use 'synth attack ...' or 'synth --scenario FILE'",
                       EXIT_CONFIG)

    try:
        trace, manifest = compose(scenario)
    except SynthError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    log.debug("composed %d attack and %d normal profiles, seed %r",
              len(scenario.attacks), len(scenario.normal), scenario.seed)
    manifest_path = args.manifest or _sibling(args.out, ".manifest.csv")
    with _atomic_outputs(args.out, manifest_path) as (tmp_trace, tmp_manifest):
        write_trace(trace, TraceMeta(), tmp_trace)
        write_manifest(manifest, tmp_manifest)
    n_attack = sum(e.label is Label.ATTACK for e in manifest)
    hels = sum(e.hel_count for e in manifest)
    attack_hels = sum(e.hel_count for e in manifest if e.label is Label.ATTACK)
    print(f"packets={len(trace)} flows={len(manifest)} attack_flows={n_attack} "
          f"normal_flows={len(manifest) - n_attack} hel_messages={hels} attack_hel_messages={attack_hels}")
    print(f"wrote {args.out} and {manifest_path}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.window_ms <= 0:
        raise CliError("--window-ms must be positive", EXIT_CONFIG)
    packets = _read_trace(args.trace, args.strip_gtpu)
    manifest = None
    if args.manifest:
        try:
            manifest = read_manifest(args.manifest)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read manifest: {exc}", EXIT_IO) from None
    result = analyze(packets, manifest, round(args.window_ms * 1_000_000))
    if result.late_packets:
        log.info("%d packets arrived beyond the reorder tolerance", result.late_packets)
    desyncs = sum(f.desync_count for f in result.flows)
    if desyncs:
        log.warning("%d UACP desync regions across %d flows", desyncs,
                    sum(1 for f in result.flows if f.desync_count))
    flows_path = args.flows or _sibling(args.out, ".flows.csv")
    with _atomic_outputs(args.out, flows_path) as (tmp_features, tmp_flows):
        export_dataset(result.windows, tmp_features)
        export_flows(result.flows, tmp_flows)
    labels = Counter(w.label.value for w in result.windows)
    print(f"packets={len(packets)} flows={len(result.flows)} windows={len(result.windows)} "
          + " ".join(f"{k.lower()}_windows={v}" for k, v in sorted(labels.items())))
    print(f"wrote {args.out} and {flows_path}")
    return EXIT_OK


def cmd_victim(args) -> int:
    params = _load_params(args.params)
    packets = _read_trace(args.trace)
    samples = simulate(packets, params, victim=args.victim)
    with _atomic_outputs(args.out) as (tmp,):
        export_samples(samples, tmp)
    terminated = next((s for s in samples if s.status.value == "Terminated"), None)
    mean_cpu = sum(s.cpu_util for s in samples) / len(samples) if samples else 0.0
    peak = max((s.pss_bytes for s in samples), default=params.pss_base)
    print(f"samples={len(samples)} mean_cpu={mean_cpu:.4f} peak_pss_bytes={peak} "
          f"terminated={'yes at t=%d ns' % terminated.t if terminated else 'no'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    params = _load_params(args.params)
    if args.reps < 1:
        raise CliError("--reps must be at least 1", EXIT_CONFIG)
    try:
        rows = sweep(args.flows, args.hel_pf, params, repetitions=args.reps, seed=args.seed,
                     duration=args.d)
    except SynthError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    with _atomic_outputs(args.out) as (tmp,):
        export_sweep(rows, tmp)
    for r in rows:
        print(f"flows={r.flow_number:>6} hel_pf={r.hel_pf:>4} mean_cpu={r.mean_cpu:.4f} "
              f"peak_pss={r.peak_pss} terminated={int(r.terminated)}")
    return EXIT_OK


def cmd_detect(args) -> int:
    try:
        windows = read_dataset(args.features)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read features: {exc}", EXIT_IO) from None
    if args.baseline:
        try:
            baseline = BaselineProfile.load(args.baseline)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read baseline: {exc}", EXIT_IO) from None
    else:
        normal = [w for w in windows if w.label is Label.NORMAL]
        try:
            baseline = fit_baseline(normal)
        except (InsufficientData, ContaminatedInput, ValueError) as exc:
            raise CliError(f"cannot fit baseline: {exc}", EXIT_PRECONDITION) from None
    try:
        alerts = [score(w, baseline, args.z_threshold, args.votes) for w in windows]
    except ValueError as exc:
        raise CliError(str(exc), EXIT_PRECONDITION) from None
    outputs = [args.out] + ([args.save_baseline] if args.save_baseline else [])
    with _atomic_outputs(*outputs) as tmps:
        export_alerts(alerts, tmps[0])
        if args.save_baseline:
            baseline.save(tmps[1])
    flagged = sum(a.verdict is Verdict.ANOMALOUS for a in alerts)
    print(f"windows={len(windows)} anomalous={flagged}")
    if any(w.label is Label.ATTACK for w in windows):
        p, r, f1 = evaluate(alerts, windows)
        print(f"precision={p:.4f} recall={r:.4f} f1={f1:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        windows = read_dataset(args.features)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read features: {exc}", EXIT_IO) from None
    groups: dict[str, list] = {}
    for w in windows:
        groups.setdefault(w.label.value, []).append(w)
    print(f"{'feature':<22}" + "".join(f"{k:>14}" for k in sorted(groups)))
    for name in FEATURE_NAMES:
        row = f"{name:<22}"
        for k in sorted(groups):
            vals = [getattr(w, name) for w in groups[k]]
            row += f"{sum(vals) / len(vals):>14.3f}"
        print(row)
    print(f"{'windows':<22}" + "".join(f"{len(groups[k]):>14}" for k in sorted(groups)))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uacp-sentinel",
        description="Synthesize, inspect and score OPC UA HEL-flood traffic.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a labelled synthetic capture",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("kind", nargs="?", choices=["attack"],
                   help="single HEL-flood profile instead of a scenario file")
    p.add_argument("--scenario", help="TOML scenario file")
    p.add_argument("-o", "--out", required=True, help="output pcap")
    p.add_argument("--manifest", help="ground-truth CSV (default: <out>.manifest.csv)")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--hel-pf", type=int, default=1, help="HEL messages per flow")
    p.add_argument("--m", type=float, default=50, help="flows created per second")
    p.add_argument("--d", type=float, default=1, help="flow creation duration, seconds")
    p.add_argument("--t-start", type=float, default=0.0, help="attack start offset, seconds")
    p.add_argument("--attacker-ip", default="10.0.0.66")
    p.add_argument("--victim", type=_endpoint, default=("10.0.0.10", 4840), help="IP:PORT")
    p.add_argument("--base-rtt-ms", type=float, default=20.0)
    p.add_argument("--jitter-ms", type=float, default=2.0)
    p.add_argument("--invalid-hello", action="store_true",
                   help="advertise receive/send buffers below 8192 bytes")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("analyze", help="flow tracking and windowed features",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("trace")
    p.add_argument("--manifest", help="ground-truth CSV used for labels")
    p.add_argument("-o", "--out", required=True, help="feature CSV")
    p.add_argument("--flows", help="flow CSV (default: <out>.flows.csv)")
    p.add_argument("--window-ms", type=float, default=500.0)
    p.add_argument("--strip-gtpu", action="store_true", help="decapsulate UDP/2152 GTP-U")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("victim", help="simulate server CPU/PSS for a trace",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("trace")
    p.add_argument("--params", help="TOML file overriding resource parameters")
    p.add_argument("--victim", type=_endpoint, help="server IP:PORT (default: most SYN-ed endpoint)")
    p.add_argument("-o", "--out", required=True, help="sample CSV")
    p.set_defaults(func=cmd_victim)

    p = sub.add_parser("sweep", help="victim resource sweep over flow number x HEL_pF",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--flows", type=_int_list, default=[0, 100, 500, 1000, 2000],
                   help="comma-separated flows per second")
    p.add_argument("--hel-pf", type=_int_list, default=[0, 1, 10, 50])
    p.add_argument("--d", type=float, default=1.0, help="flow creation duration, seconds")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--params", help="TOML file overriding resource parameters")
    p.add_argument("-o", "--out", required=True, help="sweep CSV")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("detect", help="score feature windows against a robust baseline",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("features")
    p.add_argument("--baseline", help="baseline JSON (default: fit on Normal rows)")
    p.add_argument("--save-baseline", help="write the baseline used")
    p.add_argument("-o", "--out", required=True, help="alert CSV")
    p.add_argument("--z-threshold", type=float, default=3.0)
    p.add_argument("--votes", type=int, default=2, help="features that must exceed for an alert")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("report", help="per-label feature means of a feature CSV")
    p.add_argument("features")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("UACP_SENTINEL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
