"""Weekly multichannel listening signals.

Each user's valid streams are folded onto the 168 hour-of-week slots
(Monday 00:00 is slot 0) as a 4-channel series:

* ``volume``      - streams per 1-hour window, averaged over all windows of
                    the study period mapping to the slot (empty windows count
                    as zero and stay in the divisor);
* ``repetition``  - per-window fraction of streams whose track the user played
                    more than 3 times over the whole period;
* ``organicity``  - per-window fraction of streams with organic origin;
* ``liked``       - per-window fraction of streams of liked content.

Raw series are smoothed with a circular length-3 moving average and then
normalized per channel to mean 0 and maximum absolute value 1.  Slots are
computed in local time: each event's explicit minute offset wins, otherwise a
configurable default applies.  Only 1-hour windows fully inside the study
period are aggregated, so ragged period edges never skew the per-slot divisor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import storage
from .errors import SignalError
from .ingest import (EventLog, ProfileSet, StreamEvent, StudyPeriod, UserProfile,
                     ORGANIC, REPEAT_PLAY_THRESHOLD)

CHANNELS = ("volume", "repetition", "organicity", "liked")
N_CHANNELS = len(CHANNELS)
SLOTS_PER_WEEK = 168

RAW = "raw"
SMOOTHED = "smoothed"
NORMALIZED = "normalized"

# 1970-01-01 was a Thursday; Monday = 0.
_EPOCH_WEEKDAY = 3


def slot_of_hour_index(hour_index):
    """Weekly slot of an absolute local hour index (hours since epoch)."""
    day_of_week = (hour_index // 24 + _EPOCH_WEEKDAY) % 7
    return day_of_week * 24 + hour_index % 24


def weekly_slot(timestamp: int, tz_offset_min: int = 0) -> int:
    """Slot of the local 1-hour window containing ``timestamp``."""
    return int(slot_of_hour_index((timestamp + tz_offset_min * 60) // 3600))


@dataclass(frozen=True)
class UserSignal:
    """One user's 4x168 series at a given processing stage."""

    user_id: str
    values: np.ndarray  # (N_CHANNELS, SLOTS_PER_WEEK), float64
    stage: str

    def channel(self, name: str) -> np.ndarray:
        return self.values[CHANNELS.index(name)]


@dataclass(frozen=True)
class SignalSet:
    """Stacked normalized signals, one row per user, channel-major columns.

    Row layout: ``[volume slots 0..167, repetition 0..167, organicity 0..167,
    liked 0..167]``; rows follow ``user_ids`` (lexicographic).
    """

    user_ids: tuple[str, ...]
    matrix: np.ndarray  # (n_users, N_CHANNELS * SLOTS_PER_WEEK)

    def __post_init__(self):
        if self.matrix.shape != (len(self.user_ids), N_CHANNELS * SLOTS_PER_WEEK):
            raise SignalError(f"signal matrix shape {self.matrix.shape} does not match "
                              f"{len(self.user_ids)} users x {N_CHANNELS * SLOTS_PER_WEEK}")

    def row(self, user_id: str) -> np.ndarray:
        return self.matrix[self.user_ids.index(user_id)]

    def as_channels(self) -> np.ndarray:
        """View shaped (n_users, N_CHANNELS, SLOTS_PER_WEEK)."""
        return self.matrix.reshape(len(self.user_ids), N_CHANNELS, SLOTS_PER_WEEK)


def window_features(profile: UserProfile, events: Sequence[StreamEvent]):
    """The four channel values for one user's events inside one 1-hour window.

    Empty windows contribute (0, 0, 0, 0).
    """
    n = len(events)
    if n == 0:
        return (0.0, 0.0, 0.0, 0.0)
    repeated = sum(1 for e in events
                   if profile.play_count_per_track.get(e.track_id, 0) > REPEAT_PLAY_THRESHOLD)
    organic = sum(1 for e in events if e.origin == ORGANIC)
    liked = sum(1 for e in events if e.track_id in profile.liked_tracks)
    return (float(n), repeated / n, organic / n, liked / n)


def _window_range(period: StudyPeriod, default_tz_offset_min: int) -> tuple[int, int]:
    """First and one-past-last absolute hour index fully inside the period."""
    shift = default_tz_offset_min * 60
    local_start = period.start + shift
    local_end = period.end + shift
    k_first = -((-local_start) // 3600)   # ceil
    k_excl = local_end // 3600            # window k needs 3600*(k+1) <= local_end
    if k_excl - k_first < SLOTS_PER_WEEK:
        raise SignalError(f"study period covers {max(k_excl - k_first, 0)} whole hours; "
                          f"at least one week ({SLOTS_PER_WEEK}) is required")
    return int(k_first), int(k_excl)


def _slot_divisors(k_first: int, k_excl: int) -> np.ndarray:
    """How many in-period windows map to each weekly slot."""
    slots = slot_of_hour_index(np.arange(k_first, k_excl, dtype=np.int64))
    return np.bincount(slots, minlength=SLOTS_PER_WEEK).astype(np.float64)


def _aggregate_rows(log: EventLog, row_of_user: np.ndarray, n_rows: int,
                    profiles: ProfileSet, period: StudyPeriod,
                    default_tz_offset_min: int) -> np.ndarray:
    """Raw (n_rows, 4, 168) aggregation shared by single-user and bulk paths."""
    k_first, k_excl = _window_range(period, default_tz_offset_min)
    n_windows = k_excl - k_first
    divisor = _slot_divisors(k_first, k_excl)

    repeated, liked = profiles.event_flags(log)
    k = log.local_timestamps(default_tz_offset_min) // 3600
    rows = row_of_user[log.user_idx]
    in_scope = (k >= k_first) & (k < k_excl) & (rows >= 0)

    k = k[in_scope]
    rows = rows[in_scope].astype(np.int64)
    repeated = repeated[in_scope]
    liked = liked[in_scope]
    organic = log.organic[in_scope]

    # Group events by (row, window) to get per-window counts and fractions.
    key = rows * n_windows + (k - k_first)
    uw_key, inverse, volume = np.unique(key, return_inverse=True, return_counts=True)
    frac_rep = np.bincount(inverse, weights=repeated) / volume
    frac_org = np.bincount(inverse, weights=organic) / volume
    frac_lik = np.bincount(inverse, weights=liked) / volume

    uw_row = uw_key // n_windows
    uw_slot = slot_of_hour_index(k_first + uw_key % n_windows)
    cell = uw_row * SLOTS_PER_WEEK + uw_slot
    size = n_rows * SLOTS_PER_WEEK

    raw = np.empty((n_rows, N_CHANNELS, SLOTS_PER_WEEK))
    for ci, values in enumerate((volume.astype(np.float64), frac_rep, frac_org, frac_lik)):
        raw[:, ci, :] = np.bincount(cell, weights=values, minlength=size).reshape(n_rows, SLOTS_PER_WEEK)
    raw /= divisor
    return raw


def aggregate(user_log: EventLog, profiles: ProfileSet, period: StudyPeriod,
              default_tz_offset_min: int = 0) -> UserSignal:
    """Raw weekly signal for the single user present in ``user_log``."""
    present = np.unique(user_log.user_idx)
    if len(present) != 1:
        raise SignalError(f"aggregate expects events of exactly one user, found {len(present)}")
    row_of_user = np.full(len(user_log.users), -1, dtype=np.int64)
    row_of_user[present[0]] = 0
    raw = _aggregate_rows(user_log, row_of_user, 1, profiles, period, default_tz_offset_min)
    return UserSignal(user_id=str(user_log.users[present[0]]), values=raw[0], stage=RAW)


def _smooth_values(values: np.ndarray) -> np.ndarray:
    """Circular moving average with kernel (1/3, 1/3, 1/3) along the last axis."""
    return (values + np.roll(values, 1, axis=-1) + np.roll(values, -1, axis=-1)) / 3.0


def _normalize_values(values: np.ndarray) -> np.ndarray:
    """Per-channel mean-0 / maxabs-1 along the last axis; constant channels go to zero.

    A channel whose centered spread sits at roundoff level relative to its
    input is constant in exact arithmetic and is snapped to zero rather than
    having float noise blown up to maxabs 1.  Centering and rescaling then run
    twice so the mean-0 / maxabs-1 invariants hold to well under 1e-9 even on
    near-constant channels.
    """
    out = values - values.mean(axis=-1, keepdims=True)
    spread = np.abs(out).max(axis=-1, keepdims=True)
    roundoff = np.abs(values).max(axis=-1, keepdims=True) * 1e-13
    out = np.where(spread <= roundoff, 0.0, out)
    for _ in range(2):
        scale = np.abs(out).max(axis=-1, keepdims=True)
        np.divide(out, scale, out=out, where=scale > 0)
        out -= out.mean(axis=-1, keepdims=True)
    scale = np.abs(out).max(axis=-1, keepdims=True)
    np.divide(out, scale, out=out, where=scale > 0)
    return out


def smooth(signal: UserSignal) -> UserSignal:
    """Length-3 circular smoothing of a raw signal."""
    if signal.stage != RAW:
        raise SignalError(f"smooth expects a raw signal, got stage {signal.stage!r}")
    return UserSignal(signal.user_id, _smooth_values(signal.values), SMOOTHED)


def normalize(signal: UserSignal) -> UserSignal:
    """Mean-0 / maxabs-1 normalization of a smoothed signal."""
    if signal.stage != SMOOTHED:
        raise SignalError(f"normalize expects a smoothed signal, got stage {signal.stage!r}")
    if not np.isfinite(signal.values).all():
        raise SignalError(f"non-finite values in signal of user {signal.user_id}")
    return UserSignal(signal.user_id, _normalize_values(signal.values), NORMALIZED)


def build_signal_set(profiles: ProfileSet, log: EventLog, period: StudyPeriod,
                     default_tz_offset_min: int = 0, user_ids: Sequence[str] | None = None) -> SignalSet:
    """Aggregate, smooth and normalize every user, stacked channel-major.

    Users default to those present in ``log``; rows are ordered
    lexicographically by user id regardless of input order.
    """
    users = sorted(user_ids) if user_ids is not None else log.user_ids_present()
    row_of_user = np.full(len(log.users), -1, dtype=np.int64)
    pos = {u: i for i, u in enumerate(users)}
    for idx, name in enumerate(log.users):
        row = pos.get(str(name))
        if row is not None:
            row_of_user[idx] = row

    raw = _aggregate_rows(log, row_of_user, len(users), profiles, period, default_tz_offset_min)
    if not np.isfinite(raw).all():
        raise SignalError("non-finite values in aggregated signals")
    norm = _normalize_values(_smooth_values(raw))
    return SignalSet(user_ids=tuple(users), matrix=norm.reshape(len(users), -1))


def save_signal_set(sset: SignalSet, index_path, matrix_path, fmt: str = "npy") -> None:
    """Persist as a user-index text file plus a matrix file (``npy`` or ``csv``)."""
    storage.save_index(sset.user_ids, index_path)
    storage.save_matrix(sset.matrix, matrix_path, fmt)


def load_signal_set(index_path, matrix_path) -> SignalSet:
    users = storage.load_index(index_path)
    matrix = storage.load_matrix(matrix_path)
    if matrix.shape[0] != len(users):
        raise SignalError(f"matrix rows {matrix.shape[0]} do not match index ({len(users)} users)")
    return SignalSet(user_ids=users, matrix=matrix)
