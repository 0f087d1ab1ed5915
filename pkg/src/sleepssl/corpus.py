"""Synthetic multi-cohort PSG corpora.

Each night is generated from two independent random streams keyed on
``(seed, patient_id)``: one for labels (stages, events, heart rate, disease)
and one for waveforms.  Labels are cheap, so a corpus manifest can be built
without synthesizing any signal; waveforms are produced on demand.

Signal model, per montage group:

* brain: a stage-dependent dominant oscillation (redundant across all four
  channels) plus pink noise
* respiration: breathing waveform whose amplitude dips during hypopnea,
  desaturation and central apnea intervals, with slow amplitude drift
* cardiac: beat train at the per-epoch heart rate
* somatic: broadband EMG whose amplitude follows stage and bursts on arousal
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .montage import DISEASES, EPOCH_SECONDS, EVENTS, MONTAGE, STAGES

logger = logging.getLogger(__name__)

DEFAULT_TRANSITIONS = (
    (0.85, 0.13, 0.00, 0.02),
    (0.04, 0.86, 0.06, 0.04),
    (0.02, 0.10, 0.88, 0.00),
    (0.03, 0.07, 0.00, 0.90),
)
DEFAULT_EVENT_RATES = {"arousal": 0.18, "hypopnea": 0.20, "ox_desat": 0.25, "central_apnea": 0.03}
DEFAULT_DISEASE_LINK = {
    "coronary": {"intercept": -2.4, "arousal": 2.0, "hypopnea": 3.0, "ox_desat": 2.0, "central_apnea": 4.0},
    "diabetes": {"intercept": -3.35, "arousal": 0.5, "hypopnea": 2.0, "ox_desat": 3.0, "central_apnea": 2.0},
    "hypertension": {"intercept": -1.5, "arousal": 1.0, "hypopnea": 4.0, "ox_desat": 2.0, "central_apnea": 2.0},
}

# Generator constants, indexed by stage (Wake, Light, Deep, REM).
# Brain channels carry a stage-dependent dominant rhythm (Wake, Light, Deep, REM)
# plus weaker distractor rhythms at the other stage frequencies.  Per-epoch
# log-normal amplitude jitter lets distractors win now and then, so staging
# from the brain group alone is good but not perfect.
BRAIN_FREQ_HZ = (10.0, 6.0, 2.0, 8.0)
BRAIN_DOMINANT_AMP = 1.0
BRAIN_DISTRACTOR_AMP = 0.5
BRAIN_JITTER = 0.5  # log-normal sigma of per-epoch rhythm amplitude
EYE_MOVEMENT_RATE = (0.3, 0.02, 0.0, 0.5)  # per second, EOG channels only
EMG_AMP = (1.0, 0.6, 0.4, 0.15)
RESP_FREQ_HZ = (0.30, 0.25, 0.22, 0.28)
SNORE_LEVEL = (0.2, 0.6, 0.8, 0.4)
HR_STAGE_OFFSET = (6.0, 0.0, -5.0, 3.0)

EVENT_DURATION_S = (10.0, 25.0)
EVENT_DIPS = {
    # event -> (channel names, amplitude multiplier inside the interval)
    "hypopnea": (("Abdominal", "Thorax"), 0.35),
    "ox_desat": (("Nasal Pressure", "Snore"), 0.25),
    "central_apnea": (("Abdominal", "Thorax", "Nasal Pressure"), 0.05),
}


class CorpusSpecError(ValueError):
    """Raised for an invalid :class:`CorpusSpec`; message names the field."""


@dataclass
class CohortSpec:
    cohort_id: str
    n_patients: int
    noise_scale: float = 1.0
    gain: float = 1.0
    freq_shift: float = 0.0
    channel_available: list[bool] | None = None  # None -> all 12 present


@dataclass
class CorpusSpec:
    cohorts: list[CohortSpec]
    night_duration_range: tuple[float, float] = (360.0, 600.0)  # minutes
    stage_transition_matrix: Sequence[Sequence[float]] = DEFAULT_TRANSITIONS
    event_rates: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_EVENT_RATES))
    disease_link: dict[str, dict[str, float]] = field(
        default_factory=lambda: {k: dict(v) for k, v in DEFAULT_DISEASE_LINK.items()}
    )
    hr_base_range: tuple[float, float] = (55.0, 75.0)
    seed: int = 0
    initial_stage: str = "Wake"

    def validate(self) -> "CorpusSpec":
        if not self.cohorts:
            raise CorpusSpecError("cohorts: at least one cohort is required")
        seen = set()
        for c in self.cohorts:
            if c.cohort_id in seen:
                raise CorpusSpecError(f"cohorts: duplicate cohort_id {c.cohort_id!r}")
            seen.add(c.cohort_id)
            if int(c.n_patients) < 1:
                raise CorpusSpecError(f"cohorts[{c.cohort_id}].n_patients: must be >= 1, got {c.n_patients}")
            if c.noise_scale < 0 or c.gain <= 0:
                raise CorpusSpecError(f"cohorts[{c.cohort_id}]: noise_scale must be >= 0 and gain > 0")
            if c.channel_available is not None and len(c.channel_available) != len(MONTAGE):
                raise CorpusSpecError(f"cohorts[{c.cohort_id}].channel_available: need 12 booleans")
        lo, hi = self.night_duration_range
        if not 1 <= lo <= hi:
            raise CorpusSpecError(f"night_duration_range: need 1 <= lo <= hi minutes, got {self.night_duration_range}")
        P = np.asarray(self.stage_transition_matrix, dtype=float)
        if P.shape != (4, 4):
            raise CorpusSpecError(f"stage_transition_matrix: must be 4x4, got shape {P.shape}")
        if (P < 0).any():
            raise CorpusSpecError("stage_transition_matrix: entries must be >= 0")
        bad = np.flatnonzero(np.abs(P.sum(axis=1) - 1.0) > 1e-9)
        if bad.size:
            raise CorpusSpecError(f"stage_transition_matrix: rows {bad.tolist()} do not sum to 1")
        if set(self.event_rates) != set(EVENTS):
            raise CorpusSpecError(f"event_rates: keys must be {list(EVENTS)}")
        for name, rate in self.event_rates.items():
            if not 0.0 <= rate <= 0.6:
                raise CorpusSpecError(f"event_rates.{name}: must lie in [0, 0.6], got {rate}")
        if set(self.disease_link) != set(DISEASES):
            raise CorpusSpecError(f"disease_link: keys must be {list(DISEASES)}")
        for d, coefs in self.disease_link.items():
            extra = set(coefs) - set(EVENTS) - {"intercept"}
            if extra:
                raise CorpusSpecError(f"disease_link.{d}: unknown terms {sorted(extra)}")
        hlo, hhi = self.hr_base_range
        if not 20 <= hlo <= hhi <= 200:
            raise CorpusSpecError(f"hr_base_range: implausible {self.hr_base_range}")
        if self.initial_stage not in STAGES:
            raise CorpusSpecError(f"initial_stage: must be one of {STAGES}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_transition_matrix"] = [list(map(float, r)) for r in self.stage_transition_matrix]
        d["night_duration_range"] = list(self.night_duration_range)
        d["hr_base_range"] = list(self.hr_base_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        d["cohorts"] = [c if isinstance(c, CohortSpec) else CohortSpec(**c) for c in d["cohorts"]]
        for key in ("night_duration_range", "hr_base_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class NightRecording:
    patient_id: int
    cohort_id: str
    duration_s: float
    channels: list[np.ndarray]  # empty array where unavailable
    channel_available: np.ndarray  # (12,) bool
    stage_labels: np.ndarray  # (n_slots,) int8
    event_intervals: dict[str, list[tuple[float, float]]]
    disease_labels: np.ndarray  # (3,) bool
    hr_per_epoch: np.ndarray  # (n_slots,) float32
    rates: list[float] = field(default_factory=lambda: [float(r) for r in MONTAGE.rates])
    warnings: list[str] = field(default_factory=list)

    @property
    def n_slots(self) -> int:
        return int(self.duration_s // EPOCH_SECONDS)

    def check(self) -> None:
        """Assert the recording's structural invariants."""
        assert len(self.stage_labels) == self.n_slots
        assert len(self.hr_per_epoch) == self.n_slots
        for i, x in enumerate(self.channels):
            if self.channel_available[i]:
                expected = int(round(self.duration_s * self.rates[i]))
                assert len(x) == expected, (i, len(x), expected)
            else:
                assert len(x) == 0
        for ivs in self.event_intervals.values():
            for s, e in ivs:
                assert 0.0 <= s <= e <= self.duration_s


def slot_event_flags(intervals: Sequence[tuple[float, float]], n_slots: int, min_overlap_s: float = 1.0) -> np.ndarray:
    """Per-slot flag: true iff some interval overlaps the 30-s slot by >= ``min_overlap_s``."""
    flags = np.zeros(n_slots, dtype=bool)
    for start, end in intervals:
        first = max(0, int(start // EPOCH_SECONDS))
        last = min(n_slots - 1, int(end // EPOCH_SECONDS))
        for k in range(first, last + 1):
            lo, hi = k * EPOCH_SECONDS, (k + 1) * EPOCH_SECONDS
            if min(end, hi) - max(start, lo) >= min_overlap_s:
                flags[k] = True
    return flags


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def _stage_chain(P: np.ndarray, n: int, start: int, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(P, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(n)
    out = np.empty(n, dtype=np.int8)
    s = start
    for i in range(n):
        if i > 0:
            s = int(np.searchsorted(cdf[s], u[i], side="right"))
        out[i] = s
    return out


def synth_labels(spec: CorpusSpec, cohort: CohortSpec, patient_id: int) -> dict:
    """Label-level description of one night (no waveforms)."""
    rng = np.random.default_rng([spec.seed, patient_id, 0])
    lo, hi = spec.night_duration_range
    minutes = int(rng.integers(int(math.ceil(lo)), int(math.floor(hi)) + 1))
    duration_s = float(minutes * 60)
    n_slots = int(duration_s // EPOCH_SECONDS)

    P = np.asarray(spec.stage_transition_matrix, dtype=float)
    stages = _stage_chain(P, n_slots, STAGES.index(spec.initial_stage), rng)

    intervals: dict[str, list[tuple[float, float]]] = {}
    fractions = {}
    for ev in EVENTS:
        rate = spec.event_rates[ev]
        night_rate = min(0.6, rate * rng.gamma(4.0, 0.25)) if rate > 0 else 0.0
        hits = rng.random(n_slots) < night_rate
        durs = rng.uniform(*EVENT_DURATION_S, size=n_slots)
        offs = rng.random(n_slots)
        ivs = []
        for k in np.flatnonzero(hits):
            d = float(durs[k])
            s = k * EPOCH_SECONDS + float(offs[k]) * (EPOCH_SECONDS - d)
            ivs.append((round(s, 3), min(duration_s, round(s + d, 3))))
        intervals[ev] = ivs
        fractions[ev] = float(hits.mean()) if n_slots else 0.0

    diseases = []
    u = rng.random(len(DISEASES))
    for j, d in enumerate(DISEASES):
        coefs = spec.disease_link[d]
        logit = coefs.get("intercept", 0.0) + sum(coefs.get(ev, 0.0) * fractions[ev] for ev in EVENTS)
        diseases.append(bool(u[j] < _sigmoid(logit)))

    base = rng.uniform(*spec.hr_base_range)
    drift = np.zeros(n_slots)
    eps = rng.normal(0.0, 1.0, size=n_slots)
    for i in range(1, n_slots):
        drift[i] = 0.9 * drift[i - 1] + eps[i]
    hr = base + np.asarray(HR_STAGE_OFFSET)[stages] + drift
    avail = cohort.channel_available or [True] * len(MONTAGE)
    return {
        "patient_id": int(patient_id),
        "cohort_id": cohort.cohort_id,
        "duration_s": duration_s,
        "channel_available": [bool(a) for a in avail],
        "stage_labels": stages.tolist(),
        "event_intervals": intervals,
        "event_fractions": fractions,
        "disease_labels": diseases,
        "hr_per_epoch": [round(float(h), 4) for h in hr],
    }


def _pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    if n == 0:
        return np.zeros(0)
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=float)
    f[0] = 1.0
    spec /= np.sqrt(f)
    x = np.fft.irfft(spec, n)
    return x / (x.std() + 1e-12)


def _per_sample(values: np.ndarray, rate: float, n: int) -> np.ndarray:
    idx = np.minimum((np.arange(n) / rate // EPOCH_SECONDS).astype(int), len(values) - 1)
    return np.asarray(values)[idx]


def _envelope_from(x: np.ndarray, rate: float, smooth_s: float) -> np.ndarray:
    w = max(1, int(smooth_s * rate))
    return np.convolve(x, np.ones(w) / w, mode="same") if w > 1 else x


def _envelope(n: int, rate: float, dips: list[tuple[float, float, float]], smooth_s: float = 2.0) -> np.ndarray:
    env = np.ones(n)
    for s, e, mult in dips:
        env[int(s * rate): int(e * rate)] *= mult
    w = max(1, int(smooth_s * rate))
    if w > 1:
        env = np.convolve(env, np.ones(w) / w, mode="same")
    return env


def synth_waveforms(spec: CorpusSpec, cohort: CohortSpec, labels: dict) -> list[np.ndarray]:
    """Generate the 12 raw channels for one night at the montage rates."""
    rng = np.random.default_rng([spec.seed, labels["patient_id"], 1])
    dur = labels["duration_s"]
    stages = np.asarray(labels["stage_labels"], dtype=int)
    n_slots = len(stages)
    ns = cohort.noise_scale
    out: list[np.ndarray] = []
    ivs = labels["event_intervals"]

    # brain
    fs = 64
    n = int(round(dur * fs))
    t = np.arange(n) / fs
    knots = np.arange(0, dur + 10, 10)
    rhythms = []
    for k, f0 in enumerate(BRAIN_FREQ_HZ):
        base = np.where(stages == k, BRAIN_DOMINANT_AMP, BRAIN_DISTRACTOR_AMP)
        amp = base * np.exp(rng.normal(0.0, BRAIN_JITTER, n_slots))
        amp = _envelope_from(_per_sample(amp, fs, n), fs, 3.0)
        wander = np.interp(t, knots, rng.uniform(-0.4, 0.4, len(knots)))
        phase = 2 * np.pi * np.cumsum(f0 + cohort.freq_shift + wander) / fs
        rhythms.append((amp, phase))
    eye = np.zeros(n)
    rate = np.asarray(EYE_MOVEMENT_RATE)[stages]
    for slot in np.flatnonzero(rate > 0):
        for s0 in rng.uniform(0, EPOCH_SECONDS, rng.poisson(rate[slot] * EPOCH_SECONDS)):
            a0 = int((slot * EPOCH_SECONDS + s0) * fs)
            eye[a0: a0 + int(0.4 * fs)] += rng.choice([-1.5, 1.5])
    eye = _envelope_from(eye, fs, 0.15)
    for c in range(4):
        gain = rng.uniform(0.8, 1.2) * (0.7 if c >= 2 else 1.0)
        x = sum(a * np.sin(p + rng.uniform(-0.3, 0.3)) for a, p in rhythms)
        x = gain * x + 0.8 * ns * _pink_noise(n, rng)
        if c >= 2:
            x = x + (eye if c == 2 else -eye)
        out.append(x)

    # respiration
    drift_phase = rng.uniform(0, 2 * np.pi)
    for name in ("Abdominal", "Thorax", "Nasal Pressure", "Snore"):
        fs = MONTAGE[MONTAGE.index(name)].rate
        n = int(round(dur * fs))
        t = np.arange(n) / fs
        dips = []
        for ev, (chans, mult) in EVENT_DIPS.items():
            if name in chans:
                dips.extend((s, e, mult) for s, e in ivs[ev])
        env = _envelope(n, fs, dips) * (1.0 + 0.4 * np.sin(2 * np.pi * t / 3600.0 + drift_phase))
        rf = _per_sample(np.asarray(RESP_FREQ_HZ)[stages], fs, n)
        phase = 2 * np.pi * np.cumsum(rf) / fs
        if name == "Snore":
            level = _per_sample(np.asarray(SNORE_LEVEL)[stages], fs, n)
            x = env * level * np.maximum(np.sin(phase), 0.0) * rng.standard_normal(n) + 0.05 * ns * rng.standard_normal(n)
        else:
            shift = {"Abdominal": 0.0, "Thorax": 0.6, "Nasal Pressure": 1.2}[name]
            x = env * np.sin(phase + shift) + 0.1 * ns * rng.standard_normal(n)
        out.append(x)

    # cardiac
    fs = 128
    n = int(round(dur * fs))
    hr = _per_sample(np.asarray(labels["hr_per_epoch"]), fs, n)
    beat_phase = np.cumsum(hr / 60.0) / fs + rng.uniform()
    frac = beat_phase % 1.0
    beat_s = 60.0 / hr
    qrs = np.exp(-0.5 * ((frac - 0.3) * beat_s / 0.012) ** 2)
    twave = 0.3 * np.exp(-0.5 * ((frac - 0.6) * beat_s / 0.05) ** 2)
    out.append(qrs + twave + 0.05 * ns * rng.standard_normal(n))

    # somatic
    fs = 64
    n = int(round(dur * fs))
    emg_amp = _per_sample(np.asarray(EMG_AMP)[stages], fs, n)
    burst = _envelope(n, fs, [(s, e, 3.0) for s, e in ivs["arousal"]], smooth_s=0.5)
    for c in range(3):
        scale = 1.0 if c == 0 else 0.5
        out.append(scale * emg_amp * burst * rng.standard_normal(n) + 0.05 * ns * rng.standard_normal(n))

    avail = labels["channel_available"]
    return [
        (cohort.gain * x).astype(np.float32) if avail[i] else np.zeros(0, dtype=np.float32)
        for i, x in enumerate(out)
    ]


def recording_from_labels(labels: dict, channels: list[np.ndarray]) -> NightRecording:
    return NightRecording(
        patient_id=int(labels["patient_id"]),
        cohort_id=labels["cohort_id"],
        duration_s=float(labels["duration_s"]),
        channels=channels,
        channel_available=np.asarray(labels["channel_available"], dtype=bool),
        stage_labels=np.asarray(labels["stage_labels"], dtype=np.int8),
        event_intervals={k: [tuple(iv) for iv in v] for k, v in labels["event_intervals"].items()},
        disease_labels=np.asarray(labels["disease_labels"], dtype=bool),
        hr_per_epoch=np.asarray(labels["hr_per_epoch"], dtype=np.float32),
    )


class Corpus:
    """Manifest plus lazily materialized nights.

    ``entries`` holds label-level records; ``night(i)`` returns a full
    :class:`NightRecording` with waveforms.
    """

    def __init__(self, manifest: dict, loader: Callable[[int], list[np.ndarray]]):
        self.manifest = manifest
        self._loader = loader

    @property
    def entries(self) -> list[dict]:
        return self.manifest["nights"]

    @property
    def corpus_hash(self) -> str:
        return self.manifest["corpus_hash"]

    def __len__(self) -> int:
        return len(self.entries)

    def night(self, i: int) -> NightRecording:
        return recording_from_labels(self.entries[i], self._loader(i))

    def __iter__(self) -> Iterator[NightRecording]:
        for i in range(len(self)):
            yield self.night(i)

    def cohorts(self) -> list[str]:
        return list(dict.fromkeys(e["cohort_id"] for e in self.entries))

    def patient_ids(self, cohort: str | None = None) -> list[int]:
        return [e["patient_id"] for e in self.entries if cohort is None or e["cohort_id"] == cohort]


def synth_corpus(spec: CorpusSpec) -> Corpus:
    """Build a corpus; waveforms are generated on first access of each night."""
    spec.validate()
    cohorts = {c.cohort_id: c for c in spec.cohorts}
    nights = []
    pid = 0
    for c in spec.cohorts:
        for _ in range(int(c.n_patients)):
            nights.append(synth_labels(spec, c, pid))
            pid += 1
    manifest = {
        "format_version": 1,
        "spec": spec.to_dict(),
        "montage": [{"name": ch.name, "group": ch.group, "rate": ch.rate} for ch in MONTAGE],
        "nights": nights,
    }
    manifest["corpus_hash"] = hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()[:16]

    def loader(i: int) -> list[np.ndarray]:
        lab = nights[i]
        return synth_waveforms(spec, cohorts[lab["cohort_id"]], lab)

    return Corpus(manifest, loader)


def write_corpus(corpus: Corpus, root: str | Path) -> Path:
    """Write ``manifest.json`` and one ``.bin`` + ``.json`` sidecar per night.

    Waveform files hold the available channels back to back, little-endian
    float32, channel-major; the sidecar gives each channel's rate and length.
    """
    root = Path(root)
    (root / "nights").mkdir(parents=True, exist_ok=True)
    manifest = json.loads(json.dumps(corpus.manifest))
    for i, entry in enumerate(manifest["nights"]):
        stem = f"nights/p{entry['patient_id']:06d}"
        chans = corpus._loader(i)
        with open(root / f"{stem}.bin", "wb") as fh:
            for x in chans:
                fh.write(np.asarray(x, dtype="<f4").tobytes())
        sidecar = {
            "patient_id": entry["patient_id"],
            "channels": [
                {"name": ch.name, "rate": ch.rate, "length": int(len(x))} for ch, x in zip(MONTAGE, chans)
            ],
            "dtype": "<f4",
            "layout": "channel-major",
        }
        (root / f"{stem}.json").write_text(json.dumps(sidecar, indent=1))
        entry["waveform_file"] = f"{stem}.bin"
        entry["sidecar_file"] = f"{stem}.json"
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def load_corpus(root: str | Path) -> Corpus:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())

    def loader(i: int) -> list[np.ndarray]:
        entry = manifest["nights"][i]
        side = json.loads((root / entry["sidecar_file"]).read_text())
        raw = np.fromfile(root / entry["waveform_file"], dtype="<f4")
        total = sum(c["length"] for c in side["channels"])
        if raw.size != total:
            raise ValueError(f"{entry['waveform_file']}: expected {total} samples, found {raw.size}")
        out, off = [], 0
        for c in side["channels"]:
            out.append(raw[off: off + c["length"]].astype(np.float32))
            off += c["length"]
        return out

    return Corpus(manifest, loader)


def corpus_stats(corpus: Corpus, splits: dict[int, str] | None = None, cohorts: Sequence[str] | None = None) -> list[dict]:
    """Per (cohort, split) counts and label prevalences.

    ``splits`` maps patient_id -> split name; without it every night counts
    as split ``"all"``.  Event prevalence is the fraction of 30-s epochs
    flagged by the >= 1 s overlap rule.
    """
    groups: dict[tuple[str, str], list[dict]] = {}
    for e in corpus.entries:
        if cohorts is not None and e["cohort_id"] not in cohorts:
            continue
        split = splits.get(e["patient_id"], "unassigned") if splits is not None else "all"
        groups.setdefault((e["cohort_id"], split), []).append(e)
    rows = []
    for (cohort, split), entries in sorted(groups.items()):
        n_epochs = 0
        ev_counts = {ev: 0 for ev in EVENTS}
        dz_counts = {d: 0 for d in DISEASES}
        for e in entries:
            n_slots = len(e["stage_labels"])
            n_epochs += n_slots
            for ev in EVENTS:
                ev_counts[ev] += int(slot_event_flags(e["event_intervals"][ev], n_slots).sum())
            for j, d in enumerate(DISEASES):
                dz_counts[d] += int(e["disease_labels"][j])
        row = {"cohort": cohort, "split": split, "nights": len(entries), "epochs": n_epochs}
        for ev in EVENTS:
            row[f"{ev}_prevalence"] = ev_counts[ev] / n_epochs if n_epochs else 0.0
        for d in DISEASES:
            row[f"{d}_prevalence"] = dz_counts[d] / len(entries)
        rows.append(row)
    return rows
