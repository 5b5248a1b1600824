"""Cohort filtering, hourly gridding, imputation, scaling, labels and undersampling."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .data import CHANNEL_NAMES, N_CHANNELS, CohortEntry, RawObservation

FRAMES = (6, 12, 24)
MIN_AGE, MAX_AGE = 16.0, 89.0
MIN_LOS_HOURS = 1.0
LOS_EDGES = (6.0, 12.0, 24.0)
N_LOS_CLASSES = 4


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ChannelGrid:
    """Hour-by-channel matrix for the first ``frame_hours`` hours of a stay.

    ``mask[t, c]`` is True where the cell holds a measured or filled value.
    """

    stay_id: str
    frame_hours: int
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.frame_hours not in FRAMES:
            raise ValueError(f"frame_hours must be one of {FRAMES}, got {self.frame_hours}")
        shape = (self.frame_hours, N_CHANNELS)
        values = _frozen(self.values, np.float64)
        mask = _frozen(self.mask, bool)
        if values.shape != shape or mask.shape != shape:
            raise ValueError(f"grid shape must be {shape}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    def replace(self, values=None, mask=None) -> "ChannelGrid":
        return ChannelGrid(self.stay_id, self.frame_hours,
                           self.values if values is None else values,
                           self.mask if mask is None else mask)

    @property
    def complete(self) -> bool:
        return bool(self.mask.all()) and bool(np.isfinite(self.values).all())

    def __eq__(self, other):
        if not isinstance(other, ChannelGrid):
            return NotImplemented
        return (self.stay_id == other.stay_id and self.frame_hours == other.frame_hours
                and np.array_equal(self.mask, other.mask)
                and np.array_equal(self.values, other.values, equal_nan=True))


@dataclass(frozen=True, eq=False)
class ChannelStats:
    mean: np.ndarray
    sd: np.ndarray

    def __post_init__(self):
        mean = _frozen(self.mean, np.float64)
        sd = _frozen(self.sd, np.float64)
        if mean.shape != (N_CHANNELS,) or sd.shape != (N_CHANNELS,):
            raise ValueError(f"channel stats need exactly {N_CHANNELS} entries")
        if (sd < 0).any():
            raise ValueError("standard deviations must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sd", sd)

    def __eq__(self, other):
        if not isinstance(other, ChannelStats):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.sd, other.sd)


@dataclass(frozen=True)
class LabeledWindow:
    grid: ChannelGrid
    mortality_label: int
    los_class: Optional[int] = None

    def __post_init__(self):
        if self.mortality_label not in (0, 1):
            raise ValueError("mortality_label must be 0 or 1")
        if self.los_class is not None:
            if self.los_class not in range(N_LOS_CLASSES):
                raise ValueError("los_class must be in 0..3")
            if self.mortality_label != 1:
                raise ValueError("los_class requires mortality_label == 1")


def apply_exclusions(cohort: Iterable[CohortEntry]) -> list[CohortEntry]:
    """Keep adult stays (16 <= age <= 89) lasting at least one hour."""
    return [e for e in cohort
            if MIN_AGE <= e.age_years <= MAX_AGE and e.los_hours >= MIN_LOS_HOURS]


def resample_to_grid(obs: Sequence[RawObservation], frame_hours: int,
                     stay_id: Optional[str] = None) -> ChannelGrid:
    """Average the observations falling into each hourly bin of the frame.

    Bin ``t`` covers offsets in ``[60t, 60(t+1))`` minutes; readings past the
    frame are ignored and empty bins are left masked out.
    """
    if stay_id is None:
        if not obs:
            raise ValueError("stay_id is required when there are no observations")
        stay_id = obs[0].stay_id
    sums = np.zeros((frame_hours, N_CHANNELS))
    counts = np.zeros((frame_hours, N_CHANNELS), dtype=np.int64)
    for o in obs:
        if o.stay_id != stay_id:
            raise ValueError(f"observation for stay {o.stay_id!r} in grid of {stay_id!r}")
        t = o.offset_minutes // 60
        if t < frame_hours:
            sums[t, o.channel] += o.value
            counts[t, o.channel] += 1
    mask = counts > 0
    values = np.full((frame_hours, N_CHANNELS), np.nan)
    values[mask] = sums[mask] / counts[mask]
    return ChannelGrid(stay_id, frame_hours, values, mask)


def group_observations(obs: Iterable[RawObservation]) -> dict[str, list[RawObservation]]:
    by_stay = defaultdict(list)
    for o in obs:
        by_stay[o.stay_id].append(o)
    return dict(by_stay)


def interpolate_linear(grid: ChannelGrid) -> ChannelGrid:
    """Fill interior gaps of each channel linearly in hour index.

    Leading and trailing gaps stay masked out.
    """
    values = grid.values.copy()
    mask = grid.mask.copy()
    hours = np.arange(grid.frame_hours)
    for c in range(N_CHANNELS):
        seen = np.flatnonzero(grid.mask[:, c])
        if len(seen) < 2:
            continue
        inner = np.arange(seen[0], seen[-1] + 1)
        gaps = inner[~grid.mask[inner, c]]
        if len(gaps):
            values[gaps, c] = np.interp(hours[gaps], seen, grid.values[seen, c])
            mask[gaps, c] = True
    return grid.replace(values, mask)


def compute_channel_stats(training_grids: Sequence[ChannelGrid]) -> ChannelStats:
    """Per-channel mean and population sd over mask-true cells of the training grids."""
    if not training_grids:
        raise ValueError("no training grids")
    values = np.concatenate([g.values for g in training_grids])
    mask = np.concatenate([g.mask for g in training_grids])
    empty = [CHANNEL_NAMES[c] for c in range(N_CHANNELS) if not mask[:, c].any()]
    if empty:
        raise ValueError(f"no observed values in training data for channel(s): {', '.join(empty)}")
    mean = np.empty(N_CHANNELS)
    sd = np.empty(N_CHANNELS)
    for c in range(N_CHANNELS):
        col = values[mask[:, c], c]
        mean[c] = col.mean()
        sd[c] = col.std()
    return ChannelStats(mean, sd)


def impute_mean(grid: ChannelGrid, stats: ChannelStats) -> ChannelGrid:
    values = np.where(grid.mask, grid.values, stats.mean[None, :])
    return grid.replace(values, np.ones_like(grid.mask))


def normalize_zscore(grid: ChannelGrid, stats: ChannelStats) -> ChannelGrid:
    # Zero-spread channels map to 0 rather than dividing by zero.
    safe_sd = np.where(stats.sd > 0, stats.sd, 1.0)
    z = np.where(stats.sd > 0, (grid.values - stats.mean) / safe_sd, 0.0)
    return grid.replace(z)


def prepare_grid(grid: ChannelGrid, stats: ChannelStats) -> ChannelGrid:
    """Mean-impute then z-normalize an already interpolated grid."""
    return normalize_zscore(impute_mean(grid, stats), stats)


def label_mortality(entry: CohortEntry) -> int:
    return int(entry.death_time_hours is not None)


def label_los(entry: CohortEntry) -> int:
    """Bucket time to death: <6 h, 6-12 h, 12-24 h, >=24 h."""
    t = entry.death_time_hours
    if t is None or not t > 0:
        raise ValueError(f"stay {entry.stay_id!r}: LOS class needs a positive death time, got {t}")
    return int(np.searchsorted(LOS_EDGES, t, side="right"))


def undersample(windows: Sequence, label_extractor: Callable[[object], int],
                seed: int) -> list:
    """Randomly drop majority-class items until every class has the minority count.

    Survivors keep their original relative order.
    """
    if not windows:
        raise ValueError("cannot undersample an empty set")
    by_class = defaultdict(list)
    for i, w in enumerate(windows):
        by_class[label_extractor(w)].append(i)
    n_min = min(len(ix) for ix in by_class.values())
    rng = np.random.Generator(np.random.PCG64(seed))
    keep = []
    for label in sorted(by_class):
        ix = np.asarray(by_class[label])
        keep.extend(rng.choice(ix, size=n_min, replace=False).tolist())
    return [windows[i] for i in sorted(keep)]
