"""Config-driven studies with a content-addressed stage cache.

Stages: synth -> preprocess -> pretrain (per seed) -> eval / disease.
Each stage's cache key hashes exactly the config fields it reads plus the
key of the stage it consumes, so editing a field invalidates that stage and
everything downstream of it, and nothing upstream.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import shutil
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .aggregation import DiseaseHeadConfig, embed_nights, train_disease_head
from .corpus import CorpusSpec, corpus_stats, synth_corpus
from .encoder import EncoderConfig, load_checkpoint
from .evaluation import (
    EvalReport,
    HeadConfig,
    MISSING_SETTINGS,
    extract_embeddings,
    fewshot,
    finetune,
    get_task,
    hr_probe,
    linear_probe,
)
from .montage import DISEASES
from .preprocess import EpochSet
from .pretrain import PretrainConfig, pretrain
from .shards import build_shards, load_split

logger = logging.getLogger(__name__)

RUN_ROOT_ENV = "SLEEPSSL_RUN_ROOT"
FRACTIONS = (0.01, 0.1, 1.0)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    pass


# --- config ------------------------------------------------------------------

_head_schema = {
    "type": "object",
    "properties": {
        "base_lr": {"type": "number", "exclusiveMinimum": 0},
        "max_steps": {"type": "integer", "minimum": 0},
        "max_epochs": {"type": ["integer", "null"], "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "weight_decay": {"type": "number", "minimum": 0},
        "warmup_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "standardize": {"type": "boolean"},
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["synth"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "data_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "source_mode": {"type": "string", "pattern": "^(multi|single:.+)$"},
        "subsample_seed": {"type": "integer", "minimum": 0},
        "encoder": {
            "type": "object",
            "properties": {"preset": {"type": "string"}, "overrides": {"type": "object"}},
            "additionalProperties": False,
        },
        "synth": {"type": "object"},
        "preprocess": {
            "type": "object",
            "properties": {
                "ratios": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3},
                "split_seed": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "pretrain": {
            "type": "object",
            "properties": {
                "cohorts": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "objective": {"type": "string"},
                "augmentation": {"type": ["string", "object"]},
                "batch_size": {"type": "integer", "minimum": 1},
                "base_lr": {"type": "number", "exclusiveMinimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "total_steps": {"type": ["integer", "null"], "minimum": 1},
                "max_epochs": {"type": "integer", "minimum": 1},
                "grad_clip": {"type": ["number", "null"]},
                "warmup_fraction": {"type": "number"},
                "early_stop_patience": {"type": ["integer", "null"]},
                "objective_params": {"type": "object"},
                "scale_steps_with_data": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "eval": {
            "type": "object",
            "properties": {
                "cohorts": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "train_splits": {"type": "array", "items": {"enum": ["train", "valid", "test"]}},
                "test_splits": {"type": "array", "items": {"enum": ["train", "valid", "test"]}},
                "tasks": {"type": "array", "items": {"type": "string"}},
                "protocols": {"type": "array", "items": {"enum": ["linear_probe", "finetune", "fewshot"]}},
                "settings": {"type": "array", "items": {"enum": sorted(MISSING_SETTINGS)}},
                "fewshot_k": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "fewshot_seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "probe": _head_schema,
                "finetune": _head_schema,
                "export_embeddings": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "disease": {
            "type": "object",
            "properties": {
                "aggregators": {"type": "array", "items": {"enum": ["mean", "recurrent", "mil", "topk"]}},
                "diseases": {"type": "array", "items": {"enum": list(DISEASES)}},
                "head": {"type": "object"},
            },
            "additionalProperties": False,
        },
        "scale": {
            "type": "object",
            "properties": {
                "fractions": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}, "minItems": 1},
                "presets": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "task": {"type": "string"},
                "setting": {"type": "string"},
            },
            "additionalProperties": False,
        },
        "mix": {
            "type": "object",
            "properties": {
                "single_cohort": {"type": "string"},
                "task": {"type": "string"},
            },
            "additionalProperties": False,
        },
    },
}

DEFAULTS = {
    "name": "experiment",
    "seeds": [0],
    "data_fraction": 1.0,
    "source_mode": "multi",
    "subsample_seed": 0,
    "encoder": {"preset": "tiny", "overrides": {}},
    "preprocess": {"ratios": [0.8, 0.1, 0.1], "split_seed": 0},
    "pretrain": {"objective": "dino", "augmentation": "osf", "scale_steps_with_data": False},
    "eval": {
        "train_splits": ["train"],
        "test_splits": ["test"],
        "tasks": ["staging-4class"],
        "protocols": ["linear_probe"],
        "settings": ["full"],
        "fewshot_k": [1, 5, 50],
        "fewshot_seeds": None,
        "probe": {},
        "finetune": {},
        "export_embeddings": True,
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


@dataclass
class ExperimentConfig:
    raw: dict

    @property
    def name(self) -> str:
        return self.raw["name"]

    @property
    def seeds(self) -> list[int]:
        return list(self.raw["seeds"])

    @property
    def config_hash(self) -> str:
        return canonical_hash(self.raw)

    def section(self, name: str) -> dict:
        return copy.deepcopy(self.raw.get(name) or {})

    def corpus_spec(self) -> CorpusSpec:
        return CorpusSpec.from_dict(self.raw["synth"])

    def cohorts(self) -> list[str]:
        return [c["cohort_id"] for c in self.raw["synth"]["cohorts"]]

    def pretrain_cohorts(self) -> list[str]:
        cohorts = self.raw["pretrain"].get("cohorts") or self.cohorts()
        mode = self.raw["source_mode"]
        if mode.startswith("single:"):
            return [mode.split(":", 1)[1]]
        return list(cohorts)

    def encoder_config(self, preset: str | None = None) -> EncoderConfig:
        enc = self.raw["encoder"]
        return EncoderConfig.from_preset(preset or enc["preset"], **enc.get("overrides", {}))

    def with_overrides(self, **fields) -> "ExperimentConfig":
        return ExperimentConfig(_merge(self.raw, fields))

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def validate_config(raw: dict) -> ExperimentConfig:
    """Apply defaults, check the schema and cross-field constraints."""
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    cfg = _merge(DEFAULTS, raw)
    try:
        spec = CorpusSpec.from_dict(cfg["synth"]).validate()
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"synth: {exc}") from None
    cohorts = [c.cohort_id for c in spec.cohorts]
    referenced = list(cfg["pretrain"].get("cohorts") or []) + list(cfg["eval"].get("cohorts") or [])
    mode = cfg["source_mode"]
    if mode.startswith("single:"):
        referenced.append(mode.split(":", 1)[1])
    if "mix" in cfg and cfg["mix"].get("single_cohort"):
        referenced.append(cfg["mix"]["single_cohort"])
    missing = sorted(set(referenced) - set(cohorts))
    if missing:
        raise ConfigError(f"unknown cohorts {missing}; corpus defines {cohorts}")
    if abs(sum(cfg["preprocess"]["ratios"]) - 1.0) > 1e-9:
        raise ConfigError("preprocess/ratios must sum to 1")
    for t in cfg["eval"]["tasks"]:
        try:
            get_task(t)
        except ValueError as exc:
            raise ConfigError(f"eval/tasks: {exc}") from None
    try:
        EncoderConfig.from_preset(cfg["encoder"]["preset"], **cfg["encoder"].get("overrides", {}))
        _pretrain_config(cfg["pretrain"], 0, 1.0)
        HeadConfig(**cfg["eval"]["probe"])
        HeadConfig(**cfg["eval"]["finetune"])
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(cfg)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return validate_config(raw)


def _pretrain_config(section: dict, seed: int, step_scale: float) -> PretrainConfig:
    section = {k: v for k, v in section.items() if k not in ("cohorts", "scale_steps_with_data")}
    objective = section.pop("objective", "dino")
    if section.get("total_steps") and step_scale != 1.0:
        section["total_steps"] = max(1, math.ceil(section["total_steps"] * step_scale))
    return PretrainConfig.for_objective(objective, seed=seed, **section)


# --- cache -------------------------------------------------------------------


def run_root(root=None) -> Path:
    return Path(root or os.environ.get(RUN_ROOT_ENV) or "runs").resolve()


class StageCache:
    """``<root>/cache/<stage>/<key>/`` with a ``_done.json`` marker written last."""

    def __init__(self, root: Path):
        self.root = Path(root) / "cache"
        self.events: list[tuple[str, str, str]] = []  # (stage, key, "hit" | "miss")

    def path(self, stage: str, key: str) -> Path:
        return self.root / stage / key

    def hit(self, stage: str, key: str) -> bool:
        ok = (self.path(stage, key) / "_done.json").exists()
        self.events.append((stage, key, "hit" if ok else "miss"))
        logger.info("cache %s: %s/%s", "hit" if ok else "miss", stage, key)
        return ok

    def begin(self, stage: str, key: str) -> Path:
        p = self.path(stage, key)
        if p.exists():
            shutil.rmtree(p)  # partial output of an earlier failed attempt
        p.mkdir(parents=True)
        return p

    def finish(self, stage: str, key: str, info: dict) -> None:
        (self.path(stage, key) / "_done.json").write_text(json.dumps(info, indent=1, sort_keys=True))

    def recomputed(self) -> list[tuple[str, str]]:
        return [(s, k) for s, k, e in self.events if e == "miss"]


# --- stages ------------------------------------------------------------------


def synth_key(cfg: ExperimentConfig) -> str:
    return canonical_hash({"stage": "synth", "synth": cfg.raw["synth"]})


def preprocess_key(cfg: ExperimentConfig) -> str:
    return canonical_hash({"stage": "preprocess", "up": synth_key(cfg), "preprocess": cfg.raw["preprocess"]})


def pretrain_key(cfg: ExperimentConfig, seed: int, fraction: float | None = None, preset: str | None = None,
                 cohorts: list[str] | None = None) -> str:
    return canonical_hash({
        "stage": "pretrain", "up": preprocess_key(cfg), "pretrain": cfg.raw["pretrain"],
        "encoder": {**cfg.raw["encoder"], "preset": preset or cfg.raw["encoder"]["preset"]},
        "fraction": cfg.raw["data_fraction"] if fraction is None else fraction,
        "cohorts": cohorts or cfg.pretrain_cohorts(), "subsample_seed": cfg.raw["subsample_seed"], "seed": seed,
    })


def eval_key(cfg: ExperimentConfig, up: str) -> str:
    return canonical_hash({"stage": "eval", "up": up, "eval": cfg.raw["eval"]})


def disease_key(cfg: ExperimentConfig, up: str) -> str:
    return canonical_hash({"stage": "disease", "up": up, "eval": cfg.raw["eval"], "disease": cfg.raw.get("disease")})


def stage_synth(cfg: ExperimentConfig, cache: StageCache) -> Path:
    key = synth_key(cfg)
    out = cache.path("synth", key)
    if cache.hit("synth", key):
        return out
    out = cache.begin("synth", key)
    corpus = synth_corpus(cfg.corpus_spec())
    (out / "manifest.json").write_text(json.dumps(corpus.manifest))
    _write_csv(out / "corpus_stats.csv", corpus_stats(corpus))
    cache.finish("synth", key, {"corpus_hash": corpus.corpus_hash, "nights": len(corpus)})
    return out


def stage_preprocess(cfg: ExperimentConfig, cache: StageCache) -> Path:
    stage_synth(cfg, cache)
    key = preprocess_key(cfg)
    out = cache.path("preprocess", key)
    if cache.hit("preprocess", key):
        return out
    out = cache.begin("preprocess", key)
    corpus = synth_corpus(cfg.corpus_spec())
    p = cfg.raw["preprocess"]
    index = build_shards(corpus, out, tuple(p["ratios"]), p["split_seed"])
    splits = {int(k): v for k, v in index["splits"].items()}
    _write_csv(out / "corpus_stats.csv", corpus_stats(corpus, splits=splits))
    cache.finish("preprocess", key, {"corpus_hash": corpus.corpus_hash, "shards": len(index["shards"])})
    return out


def shard_index(shard_dir: Path) -> dict:
    return json.loads((Path(shard_dir) / "index.json").read_text())


def subsample_recordings(patients, fraction: float, seed: int) -> list[int]:
    """Nested recording subsets: a seeded permutation truncated to floor(fraction * N).

    For a fixed seed the subset at a smaller fraction is always a prefix of
    (hence contained in) the subset at a larger one.
    """
    patients = sorted(int(p) for p in patients)
    n = int(math.floor(fraction * len(patients) + 1e-9))
    if n < 1:
        raise ConfigError(f"fraction {fraction} of {len(patients)} recordings selects none")
    order = np.random.default_rng(seed).permutation(len(patients))
    return sorted(patients[i] for i in order[:n])


def pretrain_patients(cfg: ExperimentConfig, shard_dir: Path, fraction: float, cohorts: list[str]) -> list[int]:
    index = shard_index(shard_dir)
    pool = [p for e in index["shards"] if e["split"] == "train" and e["cohort"] in cohorts for p in e["patients"]]
    return subsample_recordings(pool, fraction, cfg.raw["subsample_seed"])


def stage_pretrain(cfg: ExperimentConfig, cache: StageCache, seed: int, fraction: float | None = None,
                   preset: str | None = None, cohorts: list[str] | None = None,
                   patients: list[int] | None = None) -> Path:
    shard_dir = stage_preprocess(cfg, cache)
    fraction = cfg.raw["data_fraction"] if fraction is None else fraction
    cohorts = cohorts or cfg.pretrain_cohorts()
    key = pretrain_key(cfg, seed, fraction, preset, cohorts)
    if patients is not None:
        key = canonical_hash({"base": key, "patients": sorted(patients)})
    out = cache.path("pretrain", key)
    if cache.hit("pretrain", key):
        return out
    out = cache.begin("pretrain", key)
    full = load_split(shard_dir, cohorts, "train")
    chosen = patients if patients is not None else pretrain_patients(cfg, shard_dir, fraction, cohorts)
    data = full.where_patients(chosen)
    scale = 1.0
    if cfg.raw["pretrain"].get("scale_steps_with_data"):
        scale = len(data) / len(full)
    pcfg = _pretrain_config(cfg.raw["pretrain"], seed, scale)
    meta = {"run_config_hash": cfg.config_hash, "stage_key": key, "fraction": fraction, "cohorts": cohorts,
            "patients": sorted(int(p) for p in chosen), "corpus_hash": shard_index(shard_dir)["corpus_hash"]}
    try:
        pretrain(data, cfg.encoder_config(preset), pcfg, out_dir=out, metadata=meta)
    except Exception as exc:
        raise StageError(f"pretrain stage {key} failed: {exc}") from exc
    cache.finish("pretrain", key, {"steps": pcfg.total_steps, "n_epochs": len(data), "recordings": len(chosen),
                                   "samples_seen": None})
    return out


def _eval_data(cfg: ExperimentConfig, shard_dir: Path) -> tuple[EpochSet, EpochSet]:
    ev = cfg.raw["eval"]
    cohorts = ev.get("cohorts") or cfg.cohorts()
    train = EpochSet.concat([load_split(shard_dir, cohorts, s) for s in ev["train_splits"]])
    test = EpochSet.concat([load_split(shard_dir, cohorts, s) for s in ev["test_splits"]])
    return train, test


def evaluate_checkpoint(cfg: ExperimentConfig, ckpt_dir: Path, shard_dir: Path, seed: int,
                        out_dir: Path | None = None) -> list[EvalReport]:
    """Every (task, protocol, setting) in the eval section for one checkpoint."""
    ev = cfg.raw["eval"]
    ckpt = load_checkpoint(Path(ckpt_dir) / "checkpoint")
    model = ckpt.build()
    train, test = _eval_data(cfg, shard_dir)
    probe_cfg = HeadConfig(**{**ev["probe"], "seed": seed})
    ft_cfg = HeadConfig(**{**{"base_lr": 1e-4, "max_epochs": 5, "standardize": False}, **ev["finetune"], "seed": seed})
    stamp = {"run_config_hash": cfg.config_hash, "checkpoint_key": Path(ckpt_dir).name}
    reports = []
    for setting in ev["settings"]:
        X_tr = extract_embeddings(model, train, setting)
        X_te = extract_embeddings(model, test, setting)
        if out_dir is not None and ev["export_embeddings"] and setting == "full":
            export_embeddings(X_te, test, out_dir / "embeddings")
        for t in ev["tasks"]:
            task = get_task(t)
            if "linear_probe" in ev["protocols"]:
                if task.is_regression:
                    reports.append(hr_probe(ckpt, train, test, setting, probe_cfg,
                                            train_embeddings=X_tr, test_embeddings=X_te))
                else:
                    reports.append(linear_probe(ckpt, train, test, task, setting, probe_cfg,
                                                train_embeddings=X_tr, test_embeddings=X_te))
            if "fewshot" in ev["protocols"] and not task.is_regression:
                for k in ev["fewshot_k"]:
                    for fs_seed in ev["fewshot_seeds"] or [seed]:
                        reports.append(fewshot(ckpt, train, test, task, k, fs_seed, setting, probe_cfg,
                                               train_embeddings=X_tr, test_embeddings=X_te))
            if "finetune" in ev["protocols"]:
                reports.append(finetune(load_checkpoint(Path(ckpt_dir) / "checkpoint"), train, test, task,
                                        setting, ft_cfg))
    for r in reports:
        r.seed = seed
        r.extra.update(stamp)
        r.extra.pop("subset_index", None)
    if out_dir is not None:
        for i, r in enumerate(reports):
            r.write(out_dir / "reports" / f"{i:03d}_{r.task}_{r.protocol}_{r.setting}.json")
    return reports


def stage_eval(cfg: ExperimentConfig, cache: StageCache, seed: int, **pretrain_kwargs) -> list[EvalReport]:
    ckpt_dir = stage_pretrain(cfg, cache, seed, **pretrain_kwargs)
    key = eval_key(cfg, ckpt_dir.name)
    out = cache.path("eval", key)
    if not cache.hit("eval", key):
        out = cache.begin("eval", key)
        try:
            evaluate_checkpoint(cfg, ckpt_dir, stage_preprocess(cfg, cache), seed, out)
        except Exception as exc:
            raise StageError(f"eval stage {key} failed: {exc}") from exc
        cache.finish("eval", key, {"checkpoint": ckpt_dir.name})
    return read_reports(out / "reports")


def stage_disease(cfg: ExperimentConfig, cache: StageCache, seed: int) -> list[EvalReport]:
    ckpt_dir = stage_pretrain(cfg, cache, seed)
    key = disease_key(cfg, ckpt_dir.name)
    out = cache.path("disease", key)
    if not cache.hit("disease", key):
        out = cache.begin("disease", key)
        shard_dir = stage_preprocess(cfg, cache)
        labels = {int(p): np.asarray(v) for p, v in shard_index(shard_dir)["diseases"].items()}
        model = load_checkpoint(ckpt_dir / "checkpoint").build()
        train, test = _eval_data(cfg, shard_dir)
        seq_tr, seq_te = embed_nights(model, train, labels), embed_nights(model, test, labels)
        section = cfg.raw.get("disease") or {}
        head = DiseaseHeadConfig(**{**section.get("head", {}), "seed": seed})
        reports = []
        for d in section.get("diseases", list(DISEASES)):
            for kind in section.get("aggregators", ["mean", "topk"]):
                try:
                    r = train_disease_head(kind, seq_tr, seq_te, d, head)
                except ValueError as exc:  # single-class split on a tiny corpus
                    logger.warning("disease %s / %s skipped: %s", d, kind, exc)
                    continue
                r.extra.update({"run_config_hash": cfg.config_hash})
                reports.append(r)
        for i, r in enumerate(reports):
            r.write(out / "reports" / f"{i:03d}_{r.task.replace(':', '-')}_{r.protocol}.json")
        cache.finish("disease", key, {"checkpoint": ckpt_dir.name})
    return read_reports(out / "reports")


# --- reports -----------------------------------------------------------------

METRIC_COLUMNS = ("auroc", "auprc", "mae_bpm", "rmse_bpm")
ROW_COLUMNS = ("task", "protocol", "setting", "seed") + METRIC_COLUMNS + ("n_train", "n_test", "config_hash")


def read_reports(directory: Path) -> list[EvalReport]:
    directory = Path(directory)
    if not directory.exists():
        return []
    return [EvalReport.read(p) for p in sorted(directory.glob("*.json"))]


def report_rows(reports: list[EvalReport], **extra) -> list[dict]:
    rows = []
    for r in reports:
        row = {"task": r.task, "protocol": r.protocol, "setting": r.setting, "seed": r.seed}
        for m in METRIC_COLUMNS:
            row[m] = r.metrics.get(m, "")
        row.update(n_train=r.split_sizes.get("train"), n_test=r.split_sizes.get("test"), config_hash=r.config_hash)
        row.update(extra)
        rows.append(row)
    return rows


def _fmt(v):
    if isinstance(v, float):
        return repr(v)  # shortest round-tripping form
    return v


def _write_csv(path: Path, rows: list[dict], columns=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def export_embeddings(X: np.ndarray, epochs: EpochSet, directory: Path) -> Path:
    """``embeddings.f32`` (N x D little-endian), ``embeddings.json`` (shape) and ``labels.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.asarray(X, dtype="<f4").tofile(directory / "embeddings.f32")
    (directory / "embeddings.json").write_text(json.dumps({"rows": int(X.shape[0]), "dim": int(X.shape[1])}))
    rows = [{"patient_id": int(p), "night_index": int(n), "cohort": str(c), "stage": int(s),
             **{ev: int(f) for ev, f in zip(("arousal", "hypopnea", "ox_desat", "central_apnea"), fl)}}
            for p, n, c, s, fl in zip(epochs.patient_id, epochs.night_index, epochs.cohort_id, epochs.stage,
                                      epochs.event_flags)]
    _write_csv(directory / "labels.csv", rows)
    return directory


def load_embeddings(directory) -> np.ndarray:
    directory = Path(directory)
    shape = json.loads((directory / "embeddings.json").read_text())
    return np.fromfile(directory / "embeddings.f32", dtype="<f4").reshape(shape["rows"], shape["dim"])


# --- entry points ------------------------------------------------------------


def _run_dir(cfg: ExperimentConfig, root: Path, kind: str = "run") -> Path:
    d = root / "runs" / f"{cfg.name}-{kind}-{cfg.config_hash}"
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    return d


def _link_stage(run_dir: Path, name: str, target: Path) -> None:
    manifest = run_dir / "stages.json"
    stages = json.loads(manifest.read_text()) if manifest.exists() else {}
    stages[name] = str(target)
    manifest.write_text(json.dumps(stages, indent=1, sort_keys=True))


def run(config, root=None, stages=("synth", "preprocess", "pretrain", "eval")) -> Path:
    """Execute the requested stages for every seed; returns the run directory."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    root = run_root(root)
    cache = StageCache(root)
    run_dir = _run_dir(cfg, root)
    synth_dir = stage_synth(cfg, cache)
    _link_stage(run_dir, "synth", synth_dir)
    shutil.copyfile(synth_dir / "corpus_stats.csv", run_dir / "corpus_stats.csv")
    if "preprocess" in stages or "pretrain" in stages or "eval" in stages or "disease" in stages:
        shard_dir = stage_preprocess(cfg, cache)
        _link_stage(run_dir, "preprocess", shard_dir)
        shutil.copyfile(shard_dir / "corpus_stats.csv", run_dir / "corpus_stats.csv")
    rows = []
    for seed in cfg.seeds:
        if "pretrain" in stages or "eval" in stages or "disease" in stages:
            ckpt = stage_pretrain(cfg, cache, seed)
            _link_stage(run_dir, f"pretrain_seed{seed}", ckpt)
        if "eval" in stages:
            reports = stage_eval(cfg, cache, seed)
            _link_stage(run_dir, f"eval_seed{seed}", cache.path("eval", eval_key(cfg, ckpt.name)))
            for i, r in enumerate(reports):
                r.write(run_dir / "reports" / f"seed{seed}_{i:03d}.json")
            rows += report_rows(reports)
        if "disease" in stages:
            reports = stage_disease(cfg, cache, seed)
            for i, r in enumerate(reports):
                r.write(run_dir / "reports" / f"seed{seed}_disease_{i:03d}.json")
            rows += report_rows(reports)
    if rows:
        _write_csv(run_dir / "metrics.csv", rows, ROW_COLUMNS)
    (run_dir / "cache_log.json").write_text(json.dumps(cache.events, indent=1))
    return run_dir


def scale_study(config, root=None, seeds=None) -> Path:
    """Pretrain + linear probe for every (fraction, preset) cell; CSVs and a line plot."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    sc = cfg.section("scale")
    fractions = sc.get("fractions") or list(FRACTIONS)
    presets = sc.get("presets") or [cfg.raw["encoder"]["preset"]]
    task = get_task(sc.get("task", "staging-4class")).kind
    setting = sc.get("setting", "full")
    if not fractions or not presets:
        raise ConfigError("scale study grid is empty")
    root = run_root(root)
    cache = StageCache(root)
    run_dir = _run_dir(cfg, root, "scale")
    scfg = cfg.with_overrides(eval={**cfg.raw["eval"], "tasks": [task], "settings": [setting],
                                    "protocols": ["linear_probe"]})
    shard_dir = stage_preprocess(scfg, cache)
    subsets = {}
    for f in sorted(fractions):
        subsets[f] = pretrain_patients(scfg, shard_dir, f, scfg.pretrain_cohorts())
    ordered = sorted(fractions)
    for a, b in zip(ordered, ordered[1:]):
        assert set(subsets[a]) <= set(subsets[b]), "recording subsets are not nested"
    (run_dir / "subsets.json").write_text(json.dumps({str(f): p for f, p in subsets.items()}, indent=1))
    long_rows = []
    for seed in seeds if seeds is not None else scfg.seeds:
        for preset in presets:
            for f in fractions:
                reports = stage_eval(scfg, cache, seed, fraction=f, preset=preset)
                r = next(r for r in reports if r.task == task and r.protocol == "linear_probe" and r.setting == setting)
                long_rows.append({"seed": seed, "preset": preset, "fraction": f, "recordings": len(subsets[f]),
                                  "auroc": r.metrics.get("auroc", ""), "auprc": r.metrics.get("auprc", ""),
                                  "mae_bpm": r.metrics.get("mae_bpm", ""), "rmse_bpm": r.metrics.get("rmse_bpm", "")})
    _write_csv(run_dir / "scale_long.csv", long_rows)
    grid = []
    for preset in presets:
        for f in fractions:
            cell = [r for r in long_rows if r["preset"] == preset and r["fraction"] == f]
            grid.append({"preset": preset, "fraction": f, "recordings": cell[0]["recordings"], "n_seeds": len(cell),
                         **{m: _mean(c[m] for c in cell) for m in ("auroc", "auprc", "mae_bpm", "rmse_bpm")}})
    _write_csv(run_dir / "scale_grid.csv", grid)
    _plot_scale(grid, run_dir / "scale.png", "auroc" if grid and grid[0]["auroc"] != "" else "mae_bpm")
    (run_dir / "cache_log.json").write_text(json.dumps(cache.events, indent=1))
    return run_dir


def _mean(values):
    vals = [v for v in values if v != ""]
    return float(np.mean(vals)) if vals else ""


def _plot_scale(grid: list[dict], path: Path, metric: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for preset in dict.fromkeys(r["preset"] for r in grid):
        rows = sorted((r for r in grid if r["preset"] == preset), key=lambda r: r["fraction"])
        ax.plot([r["fraction"] for r in rows], [r[metric] for r in rows], marker="o", label=preset)
    ax.set_xscale("log")
    ax.set_xlabel("pre-training fraction")
    ax.set_ylabel(metric)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def mix_study(config, root=None, seeds=None) -> Path:
    """Single-cohort vs uniform multi-cohort pretraining at matched budgets.

    Both arms use the same number of recordings, optimizer steps and batch
    size; the multi arm draws its recordings evenly across the pretraining
    cohorts.
    """
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    cohorts = list(cfg.raw["pretrain"].get("cohorts") or [])
    if len(cohorts) < 2:
        raise ConfigError("mix study needs at least two pretraining cohorts")
    single = cfg.section("mix").get("single_cohort", cohorts[0])
    task = get_task(cfg.section("mix").get("task", "staging-4class")).kind
    root = run_root(root)
    cache = StageCache(root)
    run_dir = _run_dir(cfg, root, "mix")
    mcfg = cfg.with_overrides(eval={**cfg.raw["eval"], "tasks": [task], "protocols": ["linear_probe"]},
                              pretrain={**cfg.raw["pretrain"], "scale_steps_with_data": False})
    shard_dir = stage_preprocess(mcfg, cache)
    index = shard_index(shard_dir)
    by_cohort = {c: sorted(p for e in index["shards"] if e["split"] == "train" and e["cohort"] == c
                           for p in e["patients"]) for c in cohorts}
    n = len(by_cohort[single])
    rng = np.random.default_rng(cfg.raw["subsample_seed"])
    share = [n // len(cohorts) + (i < n % len(cohorts)) for i in range(len(cohorts))]
    multi = []
    for c, m in zip(cohorts, share):
        if m > len(by_cohort[c]):
            raise ConfigError(f"cohort {c} has {len(by_cohort[c])} training recordings, mix needs {m}")
        multi += sorted(rng.choice(by_cohort[c], size=m, replace=False).tolist())
    assert len(multi) == len(by_cohort[single]), "arms differ in recording count"
    corpus_hash = index["corpus_hash"]
    rows = []
    for seed in seeds if seeds is not None else mcfg.seeds:
        for arm, arm_cohorts, patients in (("single", [single], by_cohort[single]), ("multi", cohorts, multi)):
            reports = stage_eval(mcfg, cache, seed, cohorts=arm_cohorts, patients=patients)
            ck = stage_pretrain(mcfg, cache, seed, cohorts=arm_cohorts, patients=patients)
            done = json.loads((ck / "_done.json").read_text())
            for r in reports:
                if r.task == task and r.protocol == "linear_probe":
                    rows.append({"seed": seed, "arm": arm, "cohorts": "+".join(arm_cohorts), "setting": r.setting,
                                 "recordings": len(patients), "pretrain_epochs": done["n_epochs"],
                                 "steps": done["steps"], "corpus_hash": corpus_hash,
                                 "auroc": r.metrics.get("auroc"), "auprc": r.metrics.get("auprc")})
    _write_csv(run_dir / "mix.csv", rows)
    (run_dir / "cache_log.json").write_text(json.dumps(cache.events, indent=1))
    return run_dir


# --- consolidated tables -----------------------------------------------------

GAP = "MISSING"


def pivot(rows: list[dict], row_key: str, col_keys: list[str], metric: str, rows_order=None, cols_order=None) -> list[dict]:
    """Mean of ``metric`` over seeds; absent cells are marked explicitly."""
    cells: dict = {}
    for r in rows:
        if r.get(metric, "") in ("", None):
            continue
        col = "/".join(str(r[k]) for k in col_keys)
        cells.setdefault((r[row_key], col), []).append(float(r[metric]))
    rows_order = rows_order or sorted({r[row_key] for r in rows})
    cols_order = cols_order or sorted({"/".join(str(r[k]) for k in col_keys) for r in rows})
    out = []
    for rk in rows_order:
        line = {row_key: rk}
        for c in cols_order:
            v = cells.get((rk, c))
            line[c] = float(np.mean(v)) if v else GAP
        out.append(line)
    return out


def report(run_dir, tasks=None, protocols=None, settings=None) -> Path:
    """Consolidated CSV tables (+ plots) from the EvalReports of a run directory."""
    run_dir = Path(run_dir)
    reports = read_reports(run_dir / "reports")
    if not reports:
        raise StageError(f"{run_dir} contains no reports")
    rows = report_rows(reports)
    out = run_dir / "tables"
    out.mkdir(exist_ok=True)
    epoch_rows = [r for r in rows if not r["task"].startswith("disease:")]
    tasks = tasks or list(dict.fromkeys(r["task"] for r in epoch_rows))
    protocols = protocols or list(dict.fromkeys(r["protocol"] for r in epoch_rows))
    settings = settings or list(dict.fromkeys(r["setting"] for r in epoch_rows))
    written = {}
    for metric in ("auroc", "auprc"):
        full = [r for r in epoch_rows if r["setting"] == "full"] or epoch_rows
        written[f"protocols_{metric}"] = _write_csv(
            out / f"protocols_{metric}.csv", pivot(full, "task", ["protocol"], metric, tasks, protocols))
        lp = [r for r in epoch_rows if r["protocol"] == "linear_probe"]
        if lp:
            written[f"settings_{metric}"] = _write_csv(
                out / f"settings_{metric}.csv", pivot(lp, "setting", ["task"], metric, settings, tasks))
        dz = [r for r in rows if r["task"].startswith("disease:")]
        if dz:
            written[f"disease_{metric}"] = _write_csv(out / f"disease_{metric}.csv", pivot(dz, "protocol", ["task"], metric))
    hr = [r for r in epoch_rows if r["mae_bpm"] != ""]
    if hr:
        _write_csv(out / "hr.csv", hr, ROW_COLUMNS)
    _plot_settings(epoch_rows, out / "settings.png")
    exports = sorted(Path(p) for p in json.loads((run_dir / "stages.json").read_text()).values()) \
        if (run_dir / "stages.json").exists() else []
    for p in exports:
        if (p / "embeddings").exists():
            dest = run_dir / "export" / p.name
            if dest.exists():
                shutil.rmtree(dest)
            shutil.copytree(p / "embeddings", dest)
    return out


def _plot_settings(rows: list[dict], path: Path) -> None:
    lp = [r for r in rows if r["protocol"] == "linear_probe" and r["auroc"] != ""]
    if not lp:
        return
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    table = pivot(lp, "setting", ["task"], "auroc")
    tasks = [k for k in table[0] if k != "setting"]
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(tasks), 3.2))
    width = 0.8 / max(1, len(table))
    for i, line in enumerate(table):
        vals = [line[t] if line[t] != GAP else np.nan for t in tasks]
        ax.bar(np.arange(len(tasks)) + i * width, vals, width, label=line["setting"])
    ax.set_xticks(np.arange(len(tasks)) + 0.4 - width / 2, tasks, rotation=20, fontsize=8)
    ax.set_ylim(0.4, 1.0)
    ax.set_ylabel("AUROC")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
