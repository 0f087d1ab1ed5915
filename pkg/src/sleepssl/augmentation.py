"""View generation: block time masking, channel masking, temporal crop.

Every function takes either an :class:`Epoch` or an array whose last two
axes are (channels, time), and returns a new object of the same kind; inputs
are never modified.  Leading array axes are treated as a batch and receive
independent draws.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .preprocess import Epoch


@dataclass
class TimeMaskSpec:
    enabled: bool = True
    ratio_range: tuple[float, float] = (0.3, 0.6)


@dataclass
class ChannelMaskSpec:
    enabled: bool = True
    drop_fraction: float = 0.5


@dataclass
class CropSpec:
    enabled: bool = False
    ratio_range: tuple[float, float] = (0.25, 0.75)


@dataclass
class AugmentationSpec:
    time_mask: TimeMaskSpec = field(default_factory=TimeMaskSpec)
    channel_mask: ChannelMaskSpec = field(default_factory=ChannelMaskSpec)
    crop: CropSpec = field(default_factory=CropSpec)

    def validate(self) -> "AugmentationSpec":
        for name, rr in (("time_mask", self.time_mask.ratio_range), ("crop", self.crop.ratio_range)):
            lo, hi = rr
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"{name}.ratio_range must satisfy 0 <= lo <= hi <= 1, got {rr}")
        if not 0.0 <= self.channel_mask.drop_fraction < 1.0:
            raise ValueError(f"channel_mask.drop_fraction must lie in [0, 1), got {self.channel_mask.drop_fraction}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationSpec":
        d = d or {}
        tm = dict(d.get("time_mask", {}))
        cr = dict(d.get("crop", {}))
        for sub in (tm, cr):
            if "ratio_range" in sub:
                sub["ratio_range"] = tuple(sub["ratio_range"])
        return cls(
            time_mask=TimeMaskSpec(**tm),
            channel_mask=ChannelMaskSpec(**d.get("channel_mask", {})),
            crop=CropSpec(**cr),
        ).validate()

    @classmethod
    def preset(cls, name: str) -> "AugmentationSpec":
        """Named configurations: ``osf`` (time + channel), ``time_only``,
        ``channel_only``, ``crop_only``, ``crop_time_channel``, ``none``."""
        t, c, k = {
            "osf": (True, True, False),
            "time_only": (True, False, False),
            "channel_only": (False, True, False),
            "crop_only": (False, False, True),
            "crop_time_channel": (True, True, True),
            "none": (False, False, False),
        }[name]
        return cls(TimeMaskSpec(enabled=t), ChannelMaskSpec(enabled=c), CropSpec(enabled=k))


def _values(x):
    if isinstance(x, Epoch):
        return x.values
    return np.asarray(x)


def _wrap(x, values):
    if isinstance(x, Epoch):
        return replace(x, values=values, channel_valid=x.channel_valid.copy(), event_flags=x.event_flags.copy())
    return values


def sample_time_blocks(shape, ratio_range, rng: np.random.Generator):
    """Per-row block starts and lengths for ``shape = (..., C, T)``."""
    *lead, T = shape
    lo, hi = ratio_range
    r = rng.uniform(lo, hi, size=tuple(lead))
    length = np.floor(r * T).astype(np.int64)
    max_start = np.floor((1.0 - r) * T).astype(np.int64)
    start = rng.integers(0, max_start + 1)
    return start, length


def apply_time_blocks(values: np.ndarray, start, length) -> np.ndarray:
    """Zero ``[start, start + length)`` along the last axis, per row."""
    values = np.asarray(values)
    t = np.arange(values.shape[-1])
    start = np.asarray(start)[..., None]
    length = np.asarray(length)[..., None]
    keep = (t < start) | (t >= start + length)
    return np.where(keep, values, np.zeros((), values.dtype))


def block_time_mask(epoch, ratio_range=(0.3, 0.6), rng: np.random.Generator | None = None):
    """Zero one contiguous block per channel, its length a uniform fraction of T."""
    rng = rng if rng is not None else np.random.default_rng()
    v = _values(epoch)
    start, length = sample_time_blocks(v.shape, ratio_range, rng)
    return _wrap(epoch, apply_time_blocks(v, start, length))


def sample_channel_drop(shape, drop_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean (..., C) mask with exactly floor(C * drop_fraction) true per row."""
    *lead, C = shape
    n_drop = int(np.floor(C * drop_fraction))
    keys = rng.random(tuple(lead) + (C,))
    ranks = np.argsort(np.argsort(keys, axis=-1), axis=-1)
    return ranks < n_drop


def channel_mask(epoch, drop_fraction: float = 0.5, rng: np.random.Generator | None = None):
    """Zero whole channels chosen uniformly without replacement.

    ``channel_valid`` is left alone: this is an augmentation, not missingness.
    """
    rng = rng if rng is not None else np.random.default_rng()
    v = _values(epoch)
    drop = sample_channel_drop(v.shape[:-1], drop_fraction, rng)
    return _wrap(epoch, np.where(drop[..., None], np.zeros((), v.dtype), v))


def crop_resample(values: np.ndarray, start, length) -> np.ndarray:
    """Stretch ``[start, start + length)`` of every channel back to the full length.

    ``start``/``length`` are per leading-batch row (shape ``values.shape[:-2]``)
    so all channels of one example share the segment.
    """
    values = np.asarray(values)
    T = values.shape[-1]
    start = np.asarray(start, dtype=np.float64)[..., None]
    length = np.asarray(length, dtype=np.float64)[..., None]
    pos = start + np.arange(T) * (length - 1.0) / (T - 1.0)
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, T - 1)
    i1 = np.minimum(i0 + 1, T - 1)
    w = (pos - i0)[..., None, :]
    idx0 = np.broadcast_to(i0[..., None, :], values.shape)
    idx1 = np.broadcast_to(i1[..., None, :], values.shape)
    a = np.take_along_axis(values, idx0, axis=-1)
    b = np.take_along_axis(values, idx1, axis=-1)
    return (a * (1.0 - w) + b * w).astype(values.dtype)


def temporal_crop(epoch, ratio_range=(0.25, 0.75), rng: np.random.Generator | None = None):
    """Keep a random contiguous segment (same for all channels) and resample it to full length."""
    rng = rng if rng is not None else np.random.default_rng()
    v = _values(epoch)
    T = v.shape[-1]
    lead = v.shape[:-2]
    r = rng.uniform(*ratio_range, size=lead)
    length = np.maximum(np.floor(r * T).astype(np.int64), 2)
    start = rng.integers(0, T - length + 1)
    return _wrap(epoch, crop_resample(v, start, length))


def augment(epoch, spec: AugmentationSpec, rng: np.random.Generator):
    """One view: crop, then channel mask, then time mask (each if enabled)."""
    out = epoch
    if spec.crop.enabled:
        out = temporal_crop(out, spec.crop.ratio_range, rng)
    if spec.channel_mask.enabled:
        out = channel_mask(out, spec.channel_mask.drop_fraction, rng)
    if spec.time_mask.enabled:
        out = block_time_mask(out, spec.time_mask.ratio_range, rng)
    if out is epoch:
        out = _wrap(epoch, np.array(_values(epoch), copy=True))
    return out


def make_views(epoch, spec: AugmentationSpec, rng: np.random.Generator):
    """Two independently augmented views of the same input."""
    return augment(epoch, spec, rng), augment(epoch, spec, rng)
