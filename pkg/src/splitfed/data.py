"""ECG-like segment datasets: synthetic generation, CSV loading, client sharding."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SEGMENT_LENGTH = 256


class DataError(ValueError):
    pass


@dataclass(eq=False)
class SegmentDataset:
    segments: np.ndarray  # (n, 256) float32
    labels: np.ndarray  # (n,) int64, 0 = normal, 1 = arrhythmia

    def __post_init__(self):
        self.segments = np.asarray(self.segments, dtype=np.float32).reshape(-1, SEGMENT_LENGTH)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.segments.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.segments.shape[0]} segments but {self.labels.shape[0]} labels")
        if self.labels.size and not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def inputs(self):
        """Segments shaped ``(n, 1, 256)`` for a single-lead network."""
        return self.segments[:, None, :]

    def subset(self, idx):
        return SegmentDataset(self.segments[idx], self.labels[idx])


def _beat_train(rng, intervals, phase):
    beats = phase + np.concatenate([[0.0], np.cumsum(intervals)])
    return beats[beats < SEGMENT_LENGTH + 8]


def _render(rng, beats, noise):
    t = np.arange(SEGMENT_LENGTH, dtype=np.float64)
    x = np.zeros(SEGMENT_LENGTH)
    for b in beats:
        d = t - b
        # sharp R peak with a shallow S dip after it
        x += np.exp(-0.5 * (d / 1.5) ** 2) - 0.3 * np.exp(-0.5 * ((d - 4.0) / 2.5) ** 2)
    x += rng.normal(0.0, noise, SEGMENT_LENGTH)
    peak = np.abs(x).max()
    return x / peak if peak > 0 else x


def synth_generate(n: int, seed: int = 0, positive_rate: float = 0.5, noise: float = 0.15,
                   mean_interval=(24.0, 40.0), irregular_cv=(0.4, 0.7)) -> SegmentDataset:
    """Synthetic single-lead segments.

    Class 0 beats repeat at a fixed per-segment interval with 1-sample
    Gaussian jitter; class 1 draws every inter-beat interval from a gamma
    distribution whose coefficient of variation is at least 0.3. Both share
    the same noise model, and each segment is scaled to [-1, 1].
    """
    if n < 0:
        raise DataError("n must be non-negative")
    if not 0 <= positive_rate <= 1:
        raise DataError("positive_rate must lie in [0, 1]")
    if irregular_cv[0] < 0.3:
        raise DataError("irregular coefficient of variation must be at least 0.3")
    rng = np.random.default_rng(seed)
    n_pos = int(round(n * positive_rate))
    labels = np.zeros(n, dtype=np.int64)
    labels[:n_pos] = 1
    rng.shuffle(labels)
    segments = np.empty((n, SEGMENT_LENGTH), dtype=np.float32)
    n_beats = SEGMENT_LENGTH // 4
    for i in range(n):
        mu = rng.uniform(*mean_interval)
        if labels[i]:
            cv = rng.uniform(*irregular_cv)
            shape = 1.0 / cv**2
            intervals = np.maximum(rng.gamma(shape, mu / shape, n_beats), 6.0)
        else:
            intervals = mu + rng.normal(0.0, 1.0, n_beats)
        beats = _beat_train(rng, intervals, rng.uniform(-mu, 0.0))
        segments[i] = _render(rng, beats, noise)
    return SegmentDataset(segments, labels)


def write_segments(ds: SegmentDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for seg, lab in zip(ds.segments, ds.labels):
            # repr of a float32 widened to float64 is exact, so loading restores the same bits
            w.writerow([int(lab)] + [repr(float(v)) for v in seg])


def load_segments(path) -> SegmentDataset:
    """Read a CSV with one segment per row: integer label then 256 values."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"segment file not found: {p}")
    segs, labels = [], []
    with open(p, newline="") as fh:
        for row_no, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != SEGMENT_LENGTH + 1:
                raise DataError(f"{p}: row {row_no}: expected label + {SEGMENT_LENGTH} values, got {len(row) - 1} values")
            try:
                lab = int(row[0])
                vals = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise DataError(f"{p}: row {row_no}: parse error: {exc}") from None
            if lab not in (0, 1):
                raise DataError(f"{p}: row {row_no}: label must be 0 or 1, got {lab}")
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{p}: row {row_no}: non-finite value")
            labels.append(lab)
            segs.append(vals)
    return SegmentDataset(np.array(segs, dtype=np.float32).reshape(-1, SEGMENT_LENGTH), np.array(labels, dtype=np.int64))


def partition_shards(ds: SegmentDataset, devices: int, strategy: str = "iid", seed: int = 0):
    """Split ``ds`` into ``devices`` disjoint shards covering it exactly.

    ``iid`` shuffles with ``seed`` and deals contiguous blocks whose sizes
    differ by at most one; ``label-sorted`` stable-sorts by label first.
    """
    if devices < 1:
        raise DataError("need at least one device")
    if devices > len(ds):
        raise DataError(f"{devices} devices but only {len(ds)} samples")
    if devices == 1:
        return [ds.subset(np.arange(len(ds)))]
    if strategy == "iid":
        order = np.random.default_rng(seed).permutation(len(ds))
    elif strategy == "label-sorted":
        order = np.argsort(ds.labels, kind="stable")
    else:
        raise DataError(f"unknown sharding strategy {strategy!r}")
    return [ds.subset(part) for part in np.array_split(order, devices)]


class BatchCursor:
    """Endless seeded minibatch stream over one shard; reshuffles every pass, never yields short batches."""

    def __init__(self, size: int, batch: int, seed: int):
        if size < 1:
            raise DataError("shard is empty")
        self.size = size
        self.batch = batch
        self.rng = np.random.default_rng(seed)
        self._order = self.rng.permutation(size)
        self._pos = 0

    def next(self):
        out = []
        need = self.batch
        while need:
            take = min(need, self.size - self._pos)
            out.append(self._order[self._pos : self._pos + take])
            self._pos += take
            need -= take
            if self._pos == self.size:
                self._order = self.rng.permutation(self.size)
                self._pos = 0
        return np.concatenate(out)
