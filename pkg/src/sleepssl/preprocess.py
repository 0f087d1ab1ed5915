"""Night-level preprocessing: trim, normalize, segment, split."""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import NightRecording, slot_event_flags
from .montage import EPOCH_SAMPLES, EPOCH_SECONDS, EVENTS, MONTAGE, TARGET_RATE, ChannelMontage

logger = logging.getLogger(__name__)

CLIP = 6.0
WAKE = 0
TRIM_MAX_RUN = 60  # slots of edge Wake tolerated before trimming
TRIM_BUFFER = 10  # slots of edge Wake kept after trimming
RESP_WINDOW_S = 300.0
RESP_HOP_S = 30.0


@dataclass
class Epoch:
    values: np.ndarray  # (12, 1920) float32
    channel_valid: np.ndarray  # (12,) bool
    stage: int
    event_flags: np.ndarray  # (4,) bool
    hr_bpm: float | None
    patient_id: int
    cohort_id: str
    night_index: int


class EpochSet(Sequence[Epoch]):
    """Columnar collection of epochs; indexing with an int yields an :class:`Epoch`."""

    def __init__(self, values, channel_valid, stage, event_flags, hr, patient_id, night_index, cohort_id):
        self.values = values
        self.channel_valid = np.asarray(channel_valid, dtype=bool)
        self.stage = np.asarray(stage, dtype=np.int64)
        self.event_flags = np.asarray(event_flags, dtype=bool)
        self.hr = np.asarray(hr, dtype=np.float32)
        self.patient_id = np.asarray(patient_id, dtype=np.int64)
        self.night_index = np.asarray(night_index, dtype=np.int64)
        self.cohort_id = np.asarray(cohort_id, dtype=object)
        n = len(self.stage)
        for name in ("channel_valid", "event_flags", "hr", "patient_id", "night_index", "cohort_id"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"EpochSet column {name} has length {len(getattr(self, name))}, expected {n}")
        if values.shape[0] != n:
            raise ValueError("values/labels length mismatch")

    @classmethod
    def empty(cls) -> "EpochSet":
        return cls(
            np.zeros((0, 12, EPOCH_SAMPLES), np.float32), np.zeros((0, 12), bool), [], np.zeros((0, 4), bool),
            [], [], [], [],
        )

    @classmethod
    def from_epochs(cls, epochs: Iterable[Epoch]) -> "EpochSet":
        epochs = list(epochs)
        if not epochs:
            return cls.empty()
        return cls(
            np.stack([e.values for e in epochs]).astype(np.float32, copy=False),
            np.stack([e.channel_valid for e in epochs]),
            [e.stage for e in epochs],
            np.stack([e.event_flags for e in epochs]),
            [np.nan if e.hr_bpm is None else e.hr_bpm for e in epochs],
            [e.patient_id for e in epochs],
            [e.night_index for e in epochs],
            [e.cohort_id for e in epochs],
        )

    @classmethod
    def concat(cls, sets: Sequence["EpochSet"]) -> "EpochSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        return cls(
            np.concatenate([np.asarray(s.values) for s in sets]),
            np.concatenate([s.channel_valid for s in sets]),
            np.concatenate([s.stage for s in sets]),
            np.concatenate([s.event_flags for s in sets]),
            np.concatenate([s.hr for s in sets]),
            np.concatenate([s.patient_id for s in sets]),
            np.concatenate([s.night_index for s in sets]),
            np.concatenate([s.cohort_id for s in sets]),
        )

    def __len__(self) -> int:
        return len(self.stage)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            hr = float(self.hr[idx])
            return Epoch(
                values=np.asarray(self.values[idx]),
                channel_valid=self.channel_valid[idx].copy(),
                stage=int(self.stage[idx]),
                event_flags=self.event_flags[idx].copy(),
                hr_bpm=None if math.isnan(hr) else hr,
                patient_id=int(self.patient_id[idx]),
                cohort_id=str(self.cohort_id[idx]),
                night_index=int(self.night_index[idx]),
            )
        if isinstance(idx, slice):
            idx = np.arange(len(self))[idx]
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return EpochSet(
            np.asarray(self.values[idx]), self.channel_valid[idx], self.stage[idx], self.event_flags[idx],
            self.hr[idx], self.patient_id[idx], self.night_index[idx], self.cohort_id[idx],
        )

    def batch_values(self, idx) -> np.ndarray:
        """Signal grid for the given rows, always an in-memory float32 copy."""
        return np.array(self.values[np.asarray(idx)], dtype=np.float32)

    def patients(self) -> np.ndarray:
        return np.unique(self.patient_id)

    def where_patients(self, patient_ids) -> "EpochSet":
        return self[np.isin(self.patient_id, np.asarray(list(patient_ids)))]


def _crop_recording(rec: NightRecording, first_slot: int, n_slots: int, keep_tail_s: float = 0.0) -> NightRecording:
    start_s = first_slot * EPOCH_SECONDS
    new_dur = n_slots * EPOCH_SECONDS + keep_tail_s
    chans = []
    for i, x in enumerate(rec.channels):
        if rec.channel_available[i]:
            r = rec.rates[i]
            a = int(round(start_s * r))
            chans.append(np.asarray(x[a: a + int(round(new_dur * r))]).copy())
        else:
            chans.append(np.zeros(0, dtype=np.float32))
    events = {}
    for ev, ivs in rec.event_intervals.items():
        kept = []
        for s, e in ivs:
            s2, e2 = max(s - start_s, 0.0), min(e - start_s, new_dur)
            if e2 > s2:
                kept.append((s2, e2))
        events[ev] = kept
    return replace(
        rec,
        duration_s=float(new_dur),
        channels=chans,
        stage_labels=rec.stage_labels[first_slot: first_slot + n_slots].copy(),
        hr_per_epoch=rec.hr_per_epoch[first_slot: first_slot + n_slots].copy(),
        event_intervals=events,
        warnings=list(rec.warnings),
    )


def trim_wake_edges(rec: NightRecording, max_run: int = TRIM_MAX_RUN, buffer: int = TRIM_BUFFER) -> NightRecording:
    """Drop prolonged Wake at both ends of the night.

    A leading or trailing Wake run longer than ``max_run`` slots is cut down
    to ``buffer`` slots.  A night that is Wake throughout becomes a
    ``buffer``-slot stub flagged ``"all_wake"`` in ``warnings``.
    """
    stages = np.asarray(rec.stage_labels)
    n = len(stages)
    non_wake = np.flatnonzero(stages != WAKE)
    if non_wake.size == 0:
        logger.warning("patient %s: night is entirely Wake; keeping a %d-slot stub", rec.patient_id, buffer)
        out = _crop_recording(rec, 0, min(buffer, n))
        out.warnings.append("all_wake")
        return out
    lead = int(non_wake[0])
    trail = int(n - 1 - non_wake[-1])
    cut_lead = lead - buffer if lead > max_run else 0
    cut_trail = trail - buffer if trail > max_run else 0
    if cut_lead == 0 and cut_trail == 0:
        return rec
    remainder = rec.duration_s - n * EPOCH_SECONDS
    return _crop_recording(rec, cut_lead, n - cut_lead - cut_trail, keep_tail_s=0.0 if cut_trail else remainder)


def zscore(x: np.ndarray) -> np.ndarray:
    """Whole-signal z-score with population std; zero-variance input maps to zeros."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x
    sd = x.std()
    if sd <= 1e-12:
        return np.zeros_like(x)
    return (x - x.mean()) / sd


def local_zscore(x: np.ndarray, rate: float, window_s: float = RESP_WINDOW_S, hop_s: float = RESP_HOP_S) -> np.ndarray:
    """Sliding-window z-score.

    Mean and population std are computed over a centered ``window_s`` window
    once per ``hop_s``, then linearly interpolated to every sample (held
    constant beyond the first/last hop centre).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n == 0:
        return x
    c1 = np.concatenate([[0.0], np.cumsum(x)])
    c2 = np.concatenate([[0.0], np.cumsum(x * x)])
    n_hops = max(1, math.ceil(n / (hop_s * rate)))
    centers = (np.arange(n_hops) + 0.5) * hop_s
    lo = np.clip(np.round((centers - window_s / 2) * rate).astype(int), 0, n)
    hi = np.clip(np.round((centers + window_s / 2) * rate).astype(int), 0, n)
    cnt = np.maximum(hi - lo, 1)
    mean = (c1[hi] - c1[lo]) / cnt
    var = np.maximum((c2[hi] - c2[lo]) / cnt - mean**2, 0.0)
    sd = np.sqrt(var)
    t = np.arange(n) / rate
    m = np.interp(t, centers, mean)
    s = np.interp(t, centers, sd)
    out = np.zeros(n)
    ok = s > 1e-12
    out[ok] = (x[ok] - m[ok]) / s[ok]
    return out


def normalize_night(rec: NightRecording, montage: ChannelMontage = MONTAGE, clip: float | None = CLIP) -> NightRecording:
    """Per-night z-score (local z-score for respiratory channels), then clip.

    ``clip=None`` skips clipping, which is only useful for checking the
    normalization statistics.
    """
    chans = []
    for i, x in enumerate(rec.channels):
        if not rec.channel_available[i]:
            chans.append(np.zeros(0, dtype=np.float32))
            continue
        if montage[i].group == "respiration":
            z = local_zscore(x, montage[i].rate)
        else:
            z = zscore(x)
        if clip is not None:
            z = np.clip(z, -clip, clip)
        chans.append(z.astype(np.float32))
    return replace(rec, channels=chans, warnings=list(rec.warnings))


def resample_linear(x: np.ndarray, rate: float, n_out: int, out_rate: float = TARGET_RATE) -> np.ndarray:
    t_out = np.arange(n_out) / out_rate
    t_in = np.arange(len(x)) / rate
    return np.interp(t_out, t_in, x)


def segment_epochs(rec: NightRecording, montage: ChannelMontage = MONTAGE) -> EpochSet:
    """Cut a normalized night into 30-s epochs at 64 Hz.

    Missing channels are zero rows with ``channel_valid`` false.  An event
    flag is set when an interval of that type overlaps the epoch by at least
    one second.  A trailing partial epoch is dropped.
    """
    n_ep = int(rec.duration_s // EPOCH_SECONDS)
    if n_ep == 0:
        return EpochSet.empty()
    values = np.zeros((n_ep, len(montage), EPOCH_SAMPLES), dtype=np.float32)
    valid = np.zeros(len(montage), dtype=bool)
    for i, x in enumerate(rec.channels):
        if not rec.channel_available[i] or len(x) == 0:
            continue
        y = resample_linear(x, montage[i].rate, n_ep * EPOCH_SAMPLES)
        values[:, i, :] = y.reshape(n_ep, EPOCH_SAMPLES)
        valid[i] = True
    flags = np.stack([slot_event_flags(rec.event_intervals.get(ev, []), n_ep) for ev in EVENTS], axis=1)
    hr = np.asarray(rec.hr_per_epoch, dtype=np.float32)[:n_ep]
    if hr.size < n_ep:
        hr = np.concatenate([hr, np.full(n_ep - hr.size, np.nan, np.float32)])
    return EpochSet(
        values,
        np.repeat(valid[None], n_ep, axis=0),
        np.asarray(rec.stage_labels[:n_ep]),
        flags,
        hr,
        np.full(n_ep, rec.patient_id),
        np.arange(n_ep),
        np.full(n_ep, rec.cohort_id, dtype=object),
    )


def preprocess_night(rec: NightRecording, montage: ChannelMontage = MONTAGE) -> EpochSet:
    return segment_epochs(normalize_night(trim_wake_edges(rec), montage), montage)


def split_patients(
    patient_cohorts: Mapping[int, str],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[set[int], set[int], set[int]]:
    """Patient-level train/valid/test partition, drawn per cohort.

    Valid and test sizes are ``ratio * n`` rounded half up; train takes the
    rest.  Cohorts with fewer than three patients go entirely to train.
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
    by_cohort: dict[str, list[int]] = {}
    for pid, cohort in patient_cohorts.items():
        by_cohort.setdefault(cohort, []).append(int(pid))
    train, valid, test = set(), set(), set()
    for cohort in sorted(by_cohort):
        pids = sorted(by_cohort[cohort])
        if len(pids) < 3:
            logger.warning("cohort %s has %d patients; assigning all to train", cohort, len(pids))
            train.update(pids)
            continue
        rng = np.random.default_rng([seed, zlib.crc32(cohort.encode())])
        order = [pids[i] for i in rng.permutation(len(pids))]
        n_valid = int(math.floor(ratios[1] * len(pids) + 0.5))
        n_test = int(math.floor(ratios[2] * len(pids) + 0.5))
        test.update(order[:n_test])
        valid.update(order[n_test: n_test + n_valid])
        train.update(order[n_test + n_valid:])
    return train, valid, test
