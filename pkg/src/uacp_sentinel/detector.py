"""Robust z-score baseline detector with multi-feature voting."""

from __future__ import annotations

import csv
import enum
import json
import statistics
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

from .features import FEATURE_NAMES, FeatureWindow
from .flows import Label

MAD_EPSILON = 1e-9
# scales the MAD to the standard deviation of a normal distribution
NORMAL_CONSISTENCY = 1.4826
MIN_BASELINE_WINDOWS = 10


class InsufficientData(ValueError):
    pass


class ContaminatedInput(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class Verdict(str, enum.Enum):
    NORMAL = "Normal"
    ANOMALOUS = "Anomalous"


@dataclass(frozen=True)
class BaselineProfile:
    medians: dict[str, float]
    mads: dict[str, float]
    window_len_ns: int
    n_windows: int

    def save(self, path) -> None:
        doc = {
            "window_len_ns": self.window_len_ns,
            "n_windows": self.n_windows,
            "features": [{"name": f, "median": self.medians[f], "mad": self.mads[f]}
                         for f in FEATURE_NAMES],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "BaselineProfile":
        with open(path) as fh:
            doc = json.load(fh)
        try:
            feats = {f["name"]: f for f in doc["features"]}
            return cls({n: float(feats[n]["median"]) for n in FEATURE_NAMES},
                       {n: float(feats[n]["mad"]) for n in FEATURE_NAMES},
                       int(doc["window_len_ns"]), int(doc["n_windows"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{path}: incomplete baseline ({exc})") from None


@dataclass(frozen=True)
class Alert:
    window_index: int
    z_scores: dict[str, float]
    exceed_count: int
    verdict: Verdict


def fit_baseline(windows: Sequence[FeatureWindow]) -> BaselineProfile:
    """Per-feature median and MAD from attack-free windows.

    Unlabelled windows are accepted as normal; a MAD of zero becomes
    ``MAD_EPSILON``.
    """
    if any(w.label is Label.ATTACK for w in windows):
        raise ContaminatedInput("baseline windows include Attack-labelled ones")
    if len(windows) < MIN_BASELINE_WINDOWS:
        raise InsufficientData(f"need {MIN_BASELINE_WINDOWS} windows, got {len(windows)}")
    widths = {w.t_end - w.t_start for w in windows}
    if len(widths) != 1:
        raise ValueError("baseline windows have mixed lengths")
    medians, mads = {}, {}
    for name in FEATURE_NAMES:
        values = [float(getattr(w, name)) for w in windows]
        med = statistics.median(values)
        mad = statistics.median(abs(v - med) for v in values)
        medians[name] = med
        mads[name] = mad if mad > 0 else MAD_EPSILON
    return BaselineProfile(medians, mads, widths.pop(), len(windows))


def score(window: FeatureWindow, baseline: BaselineProfile, z_threshold: float = 3.0,
          vote_threshold: int = 2) -> Alert:
    if window.t_end - window.t_start != baseline.window_len_ns:
        raise ValueError("window length differs from the baseline's")
    z = {}
    for name in FEATURE_NAMES:
        x = float(getattr(window, name))
        z[name] = abs(x - baseline.medians[name]) / (NORMAL_CONSISTENCY * baseline.mads[name])
    exceed = sum(1 for v in z.values() if v > z_threshold)
    verdict = Verdict.ANOMALOUS if exceed >= vote_threshold else Verdict.NORMAL
    return Alert(window.window_index, z, exceed, verdict)


def evaluate(alerts: Sequence[Alert], labeled_windows: Sequence[FeatureWindow]) -> tuple[float, float, float]:
    """Precision, recall and F1 with Attack as the positive class."""
    if len(alerts) != len(labeled_windows):
        raise LengthMismatch(f"{len(alerts)} alerts for {len(labeled_windows)} windows")
    tp = fp = fn = 0
    for a, w in zip(alerts, labeled_windows):
        predicted = a.verdict is Verdict.ANOMALOUS
        actual = w.label is Label.ATTACK
        tp += predicted and actual
        fp += predicted and not actual
        fn += actual and not predicted
    precision = _ratio(tp, tp + fp, "precision")
    recall = _ratio(tp, tp + fn, "recall")
    f1 = _ratio(2 * precision * recall, precision + recall, "f1")
    return precision, recall, f1


def _ratio(num: float, den: float, what: str) -> float:
    if den == 0:
        warnings.warn(f"{what} undefined (zero denominator); reporting 0", RuntimeWarning, stacklevel=3)
        return 0.0
    return num / den


def export_alerts(alerts: Iterable[Alert], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("window_index", *(f"z_{n}" for n in FEATURE_NAMES), "exceed_count", "verdict"))
        for a in alerts:
            w.writerow((a.window_index, *(repr(float(a.z_scores[n])) for n in FEATURE_NAMES),
                        a.exceed_count, a.verdict.value))
