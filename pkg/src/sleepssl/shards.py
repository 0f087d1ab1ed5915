"""Epoch shard files.

Layout (all little-endian)::

    b"OSFS" | version u16 | count u32 | manifest_len u32 | manifest JSON
    count x record

    record = values f32[12][1920] | valid mask u16 (bit i = channel i)
             | stage u8 | event flags u8 (bit j = event j) | hr f32
             | patient id u32 | night index u16
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Corpus
from .montage import EPOCH_SAMPLES, EVENTS
from .preprocess import EpochSet, preprocess_night, split_patients

logger = logging.getLogger(__name__)

MAGIC = b"OSFS"
VERSION = 1
HEADER = struct.Struct("<4sHII")
RECORD_DTYPE = np.dtype(
    [
        ("values", "<f4", (12, EPOCH_SAMPLES)),
        ("mask", "<u2"),
        ("stage", "u1"),
        ("events", "u1"),
        ("hr", "<f4"),
        ("patient_id", "<u4"),
        ("night_index", "<u2"),
    ]
)
SPLITS = ("train", "valid", "test")


class ShardCorruptionError(ValueError):
    """The shard file is truncated, mislabelled or internally inconsistent."""


@dataclass
class EpochShard:
    manifest: dict
    epochs: EpochSet

    def __len__(self) -> int:
        return len(self.epochs)


def _pack_bits(flags: np.ndarray) -> np.ndarray:
    weights = 1 << np.arange(flags.shape[1], dtype=np.uint32)
    return (flags.astype(np.uint32) * weights).sum(axis=1)


def _unpack_bits(packed: np.ndarray, n: int) -> np.ndarray:
    return ((np.asarray(packed, dtype=np.uint32)[:, None] >> np.arange(n, dtype=np.uint32)) & 1).astype(bool)


def to_records(epochs: EpochSet) -> np.ndarray:
    rec = np.zeros(len(epochs), dtype=RECORD_DTYPE)
    rec["values"] = epochs.values
    rec["mask"] = _pack_bits(epochs.channel_valid)
    rec["stage"] = epochs.stage
    rec["events"] = _pack_bits(epochs.event_flags)
    rec["hr"] = epochs.hr
    rec["patient_id"] = epochs.patient_id
    rec["night_index"] = epochs.night_index
    return rec


def _manifest_for(epochs: EpochSet, split: str | None, extra: dict | None) -> dict:
    cohorts = {}
    for pid, c in zip(epochs.patient_id.tolist(), epochs.cohort_id.tolist()):
        cohorts.setdefault(str(pid), c)
    m = {
        "count": len(epochs),
        "split": split,
        "record_dtype": RECORD_DTYPE.descr.__repr__(),
        "record_size": RECORD_DTYPE.itemsize,
        "shape": [12, EPOCH_SAMPLES],
        "events": list(EVENTS),
        "labels": {
            "stage": epochs.stage.tolist(),
            "event_flags": _pack_bits(epochs.event_flags).tolist() if len(epochs) else [],
        },
        "patient_cohorts": cohorts,
    }
    if extra:
        m.update(extra)
    return m


def write_shard(epochs: EpochSet, path: str | Path, split: str | None = None, extra: dict | None = None) -> Path:
    return write_shard_parts([epochs], path, split=split, extra=extra)


def write_shard_parts(parts: Iterable[EpochSet], path: str | Path, split: str | None = None, extra: dict | None = None) -> Path:
    """Write several epoch sets as one shard without holding them all in memory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    summaries = []
    with tempfile.NamedTemporaryFile(dir=path.parent, delete=False) as payload:
        for part in parts:
            if len(part) == 0:
                continue
            if part.values.shape[1:] != (12, EPOCH_SAMPLES):
                raise ValueError(f"epoch shape {part.values.shape[1:]} is not (12, {EPOCH_SAMPLES})")
            payload.write(to_records(part).tobytes())
            summaries.append(EpochSet(
                np.zeros((len(part), 0, 0), np.float32), part.channel_valid, part.stage, part.event_flags,
                part.hr, part.patient_id, part.night_index, part.cohort_id,
            ))
        payload_name = payload.name
    labels = EpochSet.concat(summaries) if summaries else EpochSet.empty()
    manifest = json.dumps(_manifest_for(labels, split, extra), sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(HEADER.pack(MAGIC, VERSION, len(labels), len(manifest)))
            fh.write(manifest)
            with open(payload_name, "rb") as src:
                shutil.copyfileobj(src, fh, 1 << 22)
    finally:
        os.unlink(payload_name)
    return path


def read_shard(path: str | Path, mmap: bool = True) -> EpochShard:
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
        if len(head) < HEADER.size:
            raise ShardCorruptionError(f"{path}: truncated header")
        magic, version, count, mlen = HEADER.unpack(head)
        if magic != MAGIC:
            raise ShardCorruptionError(f"{path}: bad magic bytes {magic!r}")
        if version != VERSION:
            raise ShardCorruptionError(f"{path}: unsupported version {version}")
        raw = fh.read(mlen)
        if len(raw) < mlen:
            raise ShardCorruptionError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ShardCorruptionError(f"{path}: manifest is not valid JSON ({exc})") from None
    offset = HEADER.size + mlen
    payload = size - offset
    if manifest.get("count") != count:
        raise ShardCorruptionError(f"{path}: header count {count} != manifest count {manifest.get('count')}")
    if payload != count * RECORD_DTYPE.itemsize:
        raise ShardCorruptionError(
            f"{path}: payload is {payload} bytes, expected {count} x {RECORD_DTYPE.itemsize}"
        )
    if count == 0:
        rec = np.zeros(0, dtype=RECORD_DTYPE)
    elif mmap:
        rec = np.memmap(path, dtype=RECORD_DTYPE, mode="r", offset=offset, shape=(count,))
    else:
        rec = np.fromfile(path, dtype=RECORD_DTYPE, count=count, offset=offset)
    cohorts = manifest.get("patient_cohorts", {})
    pids = np.asarray(rec["patient_id"], dtype=np.int64)
    epochs = EpochSet(
        rec["values"],
        _unpack_bits(rec["mask"], 12),
        np.asarray(rec["stage"]),
        _unpack_bits(rec["events"], len(EVENTS)),
        np.asarray(rec["hr"]),
        pids,
        np.asarray(rec["night_index"]),
        np.array([cohorts.get(str(p), "") for p in pids.tolist()], dtype=object),
    )
    return EpochShard(manifest, epochs)


def shard_path(root: str | Path, cohort: str, split: str) -> Path:
    return Path(root) / f"{cohort}_{split}.osfs"


def build_shards(corpus: Corpus, out_dir: str | Path, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> dict:
    """Preprocess every night and write one shard per (cohort, split).

    Returns the index that is also written to ``out_dir/index.json``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    patient_cohorts = {e["patient_id"]: e["cohort_id"] for e in corpus.entries}
    train, valid, test = split_patients(patient_cohorts, ratios, seed)
    assignment = {**{p: "train" for p in train}, **{p: "valid" for p in valid}, **{p: "test" for p in test}}
    index = {"corpus_hash": corpus.corpus_hash, "split_seed": seed, "ratios": list(ratios), "shards": [], "splits": {}}
    for cohort in corpus.cohorts():
        for split in SPLITS:
            idx = [i for i, e in enumerate(corpus.entries)
                   if e["cohort_id"] == cohort and assignment[e["patient_id"]] == split]
            if not idx:
                continue
            path = shard_path(out_dir, cohort, split)
            parts = (preprocess_night(corpus.night(i)) for i in idx)
            write_shard_parts(parts, path, split=split, extra={"cohort": cohort, "corpus_hash": corpus.corpus_hash})
            shard = read_shard(path)
            index["shards"].append({
                "cohort": cohort, "split": split, "file": path.name, "count": len(shard),
                "patients": sorted(int(corpus.entries[i]["patient_id"]) for i in idx),
            })
    index["splits"] = {str(p): s for p, s in sorted(assignment.items())}
    index["diseases"] = {str(e["patient_id"]): [bool(v) for v in e["disease_labels"]] for e in corpus.entries}
    (out_dir / "index.json").write_text(json.dumps(index, indent=1))
    return index


def load_split(shard_dir: str | Path, cohorts: Sequence[str] | None, split: str, mmap: bool = True) -> EpochSet:
    """Concatenate the shards of ``split`` for the given cohorts (None = all)."""
    shard_dir = Path(shard_dir)
    index = json.loads((shard_dir / "index.json").read_text())
    parts = []
    for entry in index["shards"]:
        if entry["split"] != split or (cohorts is not None and entry["cohort"] not in cohorts):
            continue
        parts.append(read_shard(shard_dir / entry["file"], mmap=mmap).epochs)
    if len(parts) == 1:
        return parts[0]
    return EpochSet.concat(parts)
