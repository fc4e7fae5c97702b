"""Comfort scoring against a reference (angular velocity, jerk) histogram,
plus pass-rate aggregation with per-category/per-reason breakdowns.

Angular velocity is v * tan(steer) / wheelbase from the executed controls;
jerk is the backward difference of executed accelerations (zero for the
first tick). Bins are signed with floor semantics: bin(u) = floor(u / width).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

OMEGA_BIN = 0.1  # rad/s
JERK_BIN = 1.0  # m/s^3


def frame_values(log, wheelbase: float) -> np.ndarray:
    """(T, 2) per-tick (angular velocity, jerk) pairs of a rollout log."""
    recs = log.records
    out = np.zeros((len(recs), 2))
    prev_a = None
    for i, r in enumerate(recs):
        out[i, 0] = r.ego.speed * math.tan(r.control.steer) / wheelbase
        a = r.control.accel
        out[i, 1] = 0.0 if prev_a is None else (a - prev_a) / log.dt
        prev_a = a
    return out


def bin_index(u: float, width: float) -> int:
    return int(math.floor(u / width))


@dataclass
class ComfortHistogram:
    omega_bin: float
    jerk_bin: float
    table: dict  # (omega_idx, jerk_idx) -> probability
    frames: int

    def __post_init__(self):
        total = sum(self.table.values())
        if self.table and abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {total}, not 1")
        if any(p < 0 for p in self.table.values()):
            raise ValueError("negative probability")

    def probability(self, omega: float, jerk: float) -> float:
        key = (bin_index(omega, self.omega_bin), bin_index(jerk, self.jerk_bin))
        return self.table.get(key, 0.0)


def build_histogram(reference_logs: Sequence, wheelbase: float = 2.8,
                    omega_bin: float = OMEGA_BIN,
                    jerk_bin: float = JERK_BIN) -> ComfortHistogram:
    """Normalized (omega, jerk) bin frequencies over reference rollouts."""
    counts: Counter = Counter()
    frames = 0
    for log in reference_logs:
        for omega, jerk in frame_values(log, wheelbase):
            counts[(bin_index(omega, omega_bin), bin_index(jerk, jerk_bin))] += 1
            frames += 1
    if frames == 0:
        raise ValueError("no frames in reference logs")
    table = {k: v / frames for k, v in sorted(counts.items())}
    return ComfortHistogram(omega_bin=omega_bin, jerk_bin=jerk_bin,
                            table=table, frames=frames)


def comfort_score(test_log, hist: ComfortHistogram,
                  wheelbase: float = 2.8) -> float:
    """Mean reference probability of the log's per-frame (omega, jerk)."""
    vals = frame_values(test_log, wheelbase)
    if len(vals) == 0:
        raise ValueError("empty test log")
    return float(sum(hist.probability(o, j) for o, j in vals) / len(vals))


@dataclass
class PassRateReport:
    rate: float
    passed: int
    total: int
    by_category: dict  # category -> (passed, total)
    failures: dict  # (category, reason) -> count

    def reason_counts(self) -> Counter:
        c: Counter = Counter()
        for (_, reason), n in self.failures.items():
            c[reason] += n
        return c


def pass_rate(verdicts: Sequence) -> PassRateReport:
    """Aggregate verdicts into a pass rate and failure histograms."""
    verdicts = list(verdicts)
    if not verdicts:
        raise ValueError("no verdicts to aggregate")
    passed = sum(1 for v in verdicts if v.passed)
    by_cat: dict = {}
    failures: dict = {}
    for v in verdicts:
        got = by_cat.setdefault(v.category, [0, 0])
        got[1] += 1
        if v.passed:
            got[0] += 1
        for reason in v.failure_reasons:
            key = (v.category, reason)
            failures[key] = failures.get(key, 0) + 1
    return PassRateReport(rate=passed / len(verdicts), passed=passed,
                          total=len(verdicts),
                          by_category={k: tuple(v) for k, v in sorted(by_cat.items())},
                          failures=dict(sorted(failures.items())))


def histogram_to_dict(hist: ComfortHistogram) -> dict:
    return {
        "omega_bin": hist.omega_bin,
        "jerk_bin": hist.jerk_bin,
        "frames": hist.frames,
        "entries": [{"omega_idx": k[0], "jerk_idx": k[1], "p": p}
                    for k, p in sorted(hist.table.items())],
    }


def histogram_from_dict(d: dict) -> ComfortHistogram:
    table = {(e["omega_idx"], e["jerk_idx"]): e["p"] for e in d["entries"]}
    return ComfortHistogram(omega_bin=d["omega_bin"], jerk_bin=d["jerk_bin"],
                            table=table, frames=d["frames"])
