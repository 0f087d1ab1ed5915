"""The fixed 12-channel PSG montage and its modality groups."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPOCH_SECONDS = 30
TARGET_RATE = 64
EPOCH_SAMPLES = EPOCH_SECONDS * TARGET_RATE  # 1920

GROUPS = ("brain", "respiration", "cardiac", "somatic")
STAGES = ("Wake", "Light", "Deep", "REM")
EVENTS = ("arousal", "hypopnea", "ox_desat", "central_apnea")
DISEASES = ("coronary", "diabetes", "hypertension")


@dataclass(frozen=True)
class Channel:
    name: str
    group: str
    rate: int


@dataclass(frozen=True)
class ChannelMontage:
    channels: tuple[Channel, ...]

    def __post_init__(self):
        if len(self.channels) != 12:
            raise ValueError(f"montage needs exactly 12 channels, got {len(self.channels)}")
        for ch in self.channels:
            if ch.group not in GROUPS:
                raise ValueError(f"channel {ch.name!r} has unknown group {ch.group!r}")

    def __len__(self) -> int:
        return len(self.channels)

    def __iter__(self):
        return iter(self.channels)

    def __getitem__(self, i: int) -> Channel:
        return self.channels[i]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.channels]

    @property
    def rates(self) -> list[int]:
        return [c.rate for c in self.channels]

    def group_indices(self, group: str) -> list[int]:
        if group not in GROUPS:
            raise ValueError(f"unknown group {group!r}")
        return [i for i, c in enumerate(self.channels) if c.group == group]

    def group_mask(self, groups) -> np.ndarray:
        """Boolean 12-vector, true for channels whose group is in ``groups``."""
        groups = set(groups)
        unknown = groups - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown groups {sorted(unknown)}")
        return np.array([c.group in groups for c in self.channels])

    def index(self, name: str) -> int:
        return self.names.index(name)


MONTAGE = ChannelMontage(
    (
        Channel("C3-A2", "brain", 64),
        Channel("C4-A1", "brain", 64),
        Channel("E1-A2", "brain", 64),
        Channel("E2-A1", "brain", 64),
        Channel("Abdominal", "respiration", 8),
        Channel("Thorax", "respiration", 8),
        Channel("Nasal Pressure", "respiration", 8),
        Channel("Snore", "respiration", 32),
        Channel("ECG", "cardiac", 128),
        Channel("EMG-Chin", "somatic", 64),
        Channel("EMG-LLeg", "somatic", 64),
        Channel("EMG-RLeg", "somatic", 64),
    )
)
