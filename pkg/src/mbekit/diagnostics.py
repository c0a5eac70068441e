"""Gradient-alignment measurements and oscillation statistics.

Alignment between cross-entropy and entropy-regularizer gradients is
tracked per parameter group as a cosine-similarity series; its oscillation
is summarized by standard deviation (strength), zero-crossing rate
(frequency, computed on the raw series), and the peak-to-mean ratio of the
mean-removed periodogram (periodicity strength).
"""

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

DEGENERATE_NORM = 1e-15
MIN_SERIES_LENGTH = 8

SOURCE_CE = "CE"
SOURCE_MBE = "MBE"


class GroupId(NamedTuple):
    layer: int
    kind: str  # attention | mlp | embedding | other

    def label(self):
        return f"{self.layer}:{self.kind}"


@dataclass(frozen=True)
class GradientSnapshot:
    step: int
    group: GroupId
    source: str
    vector: np.ndarray


@dataclass
class AlignmentSeries:
    """Per-group cosine-similarity series over training steps."""

    group: GroupId
    steps: list = field(default_factory=list)
    values: list = field(default_factory=list)

    def append(self, step, value):
        if abs(value) > 1.0 + 1e-9:
            raise ValueError(f"cosine similarity out of range: {value}")
        if self.steps and step <= self.steps[-1]:
            raise ValueError(f"steps must be strictly increasing, got {step}")
        self.steps.append(int(step))
        self.values.append(float(value))

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class OscillationStats:
    std: float
    zero_crossing_rate: float
    psd_peak_to_mean: float


def cosine_similarity_with_flag(a, b):
    """(cosine, degenerate) where near-zero-norm inputs yield (0.0, True)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        return 0.0, True
    return float(a @ b / (na * nb)), False


def cosine_similarity(a, b):
    return cosine_similarity_with_flag(a, b)[0]


def _vectors(snapshots, expect_source=None):
    """Extract equal-group vectors from snapshots (plain arrays pass through)."""
    vectors = []
    group = None
    for snap in snapshots:
        if isinstance(snap, GradientSnapshot):
            if group is None:
                group = snap.group
            elif snap.group != group:
                raise ValueError(f"group mismatch: {snap.group} vs {group}")
            if expect_source is not None and snap.source != expect_source:
                raise ValueError(f"expected {expect_source} snapshot, got {snap.source}")
            vectors.append(snap.vector)
        else:
            vectors.append(np.asarray(snap))
    return vectors


def cross_batch_consistency(snapshots):
    """Mean cosine similarity over all unordered pairs of same-step gradients."""
    vectors = _vectors(snapshots)
    k = len(vectors)
    if k < 2:
        raise ValueError(f"need at least 2 snapshots, got {k}")
    total = 0.0
    for i in range(k):
        for j in range(i + 1, k):
            total += cosine_similarity(vectors[i], vectors[j])
    return total / (k * (k - 1) / 2)


def ce_mbe_alignment(ce_snapshots, mbe_snapshots):
    """Mean cosine similarity over all ordered (CE, MBE) batch pairs."""
    ce_vectors = _vectors(ce_snapshots)
    mbe_vectors = _vectors(mbe_snapshots)
    if not ce_vectors or not mbe_vectors:
        raise ValueError("need at least one snapshot per source")
    if isinstance(ce_snapshots[0], GradientSnapshot) and isinstance(
        mbe_snapshots[0], GradientSnapshot
    ):
        if ce_snapshots[0].group != mbe_snapshots[0].group:
            raise ValueError(
                f"group mismatch: {ce_snapshots[0].group} vs {mbe_snapshots[0].group}"
            )
    total = 0.0
    for a in ce_vectors:
        for b in mbe_vectors:
            total += cosine_similarity(a, b)
    return total / (len(ce_vectors) * len(mbe_vectors))


def zero_crossing_rate(values):
    """Fraction of consecutive sign flips; zeros inherit the previous sign."""
    values = np.asarray(values, dtype=np.float64)
    crossings = 0
    last_sign = 0
    for v in values:
        s = int(np.sign(v))
        if s == 0:
            continue
        if last_sign != 0 and s != last_sign:
            crossings += 1
        last_sign = s
    return crossings / (len(values) - 1)


def periodogram(values):
    """Squared DFT magnitudes of the mean-removed series over nonzero
    frequencies (bins 1 .. n//2)."""
    x = np.asarray(values, dtype=np.float64)
    x = x - x.mean()
    spectrum = np.fft.rfft(x)
    power = np.abs(spectrum) ** 2
    return power[1:]


def oscillation_stats(values):
    """std / zero-crossing rate / PSD peak-to-mean of an alignment series.

    std and the PSD are offset-invariant (mean removal); the zero-crossing
    rate deliberately is not, since it counts sign flips of the raw series.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size < MIN_SERIES_LENGTH:
        raise ValueError(f"series too short: {values.size} < {MIN_SERIES_LENGTH}")
    power = periodogram(values)
    mean_power = power.mean()
    if mean_power <= 0.0:
        ratio = 1.0  # flat (all-zero) spectrum
    else:
        ratio = float(power.max() / mean_power)
    return OscillationStats(
        std=float(values.std()),
        zero_crossing_rate=zero_crossing_rate(values),
        psd_peak_to_mean=ratio,
    )


def write_group_stats_csv(path, stats_by_group):
    """Per-group oscillation table: group_id, std, zcr, psd_peak_to_mean."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group_id", "std", "zcr", "psd_peak_to_mean"])
        for group in sorted(stats_by_group):
            s = stats_by_group[group]
            label = group.label() if isinstance(group, GroupId) else str(group)
            writer.writerow([label, s.std, s.zero_crossing_rate, s.psd_peak_to_mean])
