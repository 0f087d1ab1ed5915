"""Transfer protocols on frozen or fine-tuned encoders.

Linear probe, full fine-tuning, K-shot probing and the heart-rate regression
probe share one head trainer (AdamW, warmup + cosine).  Missing-channel
settings zero the dropped groups before embedding extraction, on the train
side as well as the test side.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import Checkpoint, EpochEncoder, NonFiniteActivationError
from .metrics import UndefinedMetricError, auprc, auroc, staging_metrics
from .montage import EVENTS, GROUPS, MONTAGE, STAGES
from .preprocess import Epoch, EpochSet
from .pretrain import lr_at

logger = logging.getLogger(__name__)

PROTOCOLS = ("linear_probe", "finetune", "fewshot", "supervised")


class ProtocolIsolationError(AssertionError):
    pass


class EmptySplitError(ValueError):
    pass


# --- tasks -----------------------------------------------------------------


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    n_classes: int  # 0 for regression
    labels: Callable[[EpochSet], np.ndarray]

    @property
    def is_regression(self) -> bool:
        return self.n_classes == 0

    def valid_rows(self, epochs: EpochSet) -> np.ndarray:
        if self.is_regression:
            return np.isfinite(epochs.hr)
        return np.ones(len(epochs), dtype=bool)


def _event_task(name: str) -> TaskSpec:
    j = EVENTS.index(name)
    return TaskSpec(name, 2, lambda e: e.event_flags[:, j].astype(np.int64))


TASKS: dict[str, TaskSpec] = {
    "staging-4class": TaskSpec("staging-4class", len(STAGES), lambda e: np.asarray(e.stage, dtype=np.int64)),
    **{name: _event_task(name) for name in EVENTS},
    "hr_regression": TaskSpec("hr_regression", 0, lambda e: np.asarray(e.hr, dtype=np.float64)),
}
TASK_ALIASES = {"staging": "staging-4class", "hr": "hr_regression"}


def get_task(task: str | TaskSpec) -> TaskSpec:
    if isinstance(task, TaskSpec):
        return task
    key = TASK_ALIASES.get(task, task)
    if key not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {sorted(TASKS)}")
    return TASKS[key]


# --- missing-channel settings ---------------------------------------------


@dataclass(frozen=True)
class MissingChannelSetting:
    name: str
    kept_groups: frozenset

    def __post_init__(self):
        bad = set(self.kept_groups) - set(GROUPS)
        if bad:
            raise ValueError(f"unknown channel groups {sorted(bad)}")

    @property
    def kept_channels(self) -> np.ndarray:
        return MONTAGE.group_mask(self.kept_groups)


MISSING_SETTINGS = {
    "full": MissingChannelSetting("full", frozenset(GROUPS)),
    "head_band": MissingChannelSetting("head_band", frozenset({"brain"})),
    "disorder_study": MissingChannelSetting("disorder_study", frozenset({"respiration", "cardiac", "somatic"})),
    "micro_arch": MissingChannelSetting("micro_arch", frozenset({"brain", "cardiac", "somatic"})),
    "in_home": MissingChannelSetting("in_home", frozenset({"respiration"})),
}


def get_setting(setting: str | MissingChannelSetting | None) -> MissingChannelSetting:
    if setting is None:
        return MISSING_SETTINGS["full"]
    if isinstance(setting, MissingChannelSetting):
        return setting
    if setting not in MISSING_SETTINGS:
        raise ValueError(f"unknown missing-channel setting {setting!r}; choose from {sorted(MISSING_SETTINGS)}")
    return MISSING_SETTINGS[setting]


def apply_missing_setting(x, setting):
    """Zero channels outside the kept groups and mark them invalid.

    Accepts an :class:`Epoch`, an :class:`EpochSet` or an array (..., 12, T).
    Kept channels are returned unchanged.
    """
    keep = get_setting(setting).kept_channels
    if isinstance(x, Epoch):
        values = np.where(keep[:, None], x.values, np.zeros((), x.values.dtype))
        return replace(x, values=values, channel_valid=x.channel_valid & keep, event_flags=x.event_flags.copy())
    if isinstance(x, EpochSet):
        values = np.asarray(x.values)
        values = np.where(keep[None, :, None], values, np.zeros((), values.dtype))
        return EpochSet(values, x.channel_valid & keep[None, :], x.stage, x.event_flags, x.hr,
                        x.patient_id, x.night_index, x.cohort_id)
    arr = np.asarray(x)
    return np.where(keep[:, None], arr, np.zeros((), arr.dtype))


# --- configs and reports ---------------------------------------------------


@dataclass
class HeadConfig:
    """Head-training hyperparameters.  Defaults are the full-scale values;
    desk-scale runs override them explicitly."""

    base_lr: float = 0.1
    max_steps: int = 500
    max_epochs: int | None = None
    batch_size: int = 800
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    standardize: bool = True
    seed: int = 0

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


PROBE_DEFAULTS = HeadConfig()
FINETUNE_DEFAULTS = HeadConfig(base_lr=1e-4, max_steps=500, max_epochs=5, standardize=False)
SUPERVISED_DEFAULTS = HeadConfig(base_lr=1e-3, max_steps=10**9, max_epochs=5, standardize=False)


@dataclass
class EvalReport:
    task: str
    protocol: str
    setting: str
    metrics: dict
    seed: int
    config_hash: str
    split_sizes: dict
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in ("auroc", "auprc"):
            v = self.metrics.get(k)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{k} out of [0, 1]: {v}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def read(cls, path: str | Path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def check_isolation(train: EpochSet, test: EpochSet) -> None:
    overlap = np.intersect1d(train.patients(), test.patients())
    if overlap.size:
        raise ProtocolIsolationError(f"test patients present in training data: {overlap[:10].tolist()}")


# --- embeddings ------------------------------------------------------------


def _as_encoder(model) -> EpochEncoder:
    if isinstance(model, Checkpoint):
        return model.build()
    if isinstance(model, EpochEncoder):
        return model
    raise TypeError(f"expected Checkpoint or EpochEncoder, got {type(model).__name__}")


@torch.no_grad()
def extract_embeddings(model, epochs: EpochSet, setting=None, batch_size: int = 256) -> np.ndarray:
    """(N, D) float32 CLS embeddings; ``setting`` is applied to the inputs first."""
    encoder = _as_encoder(model)
    was_training = encoder.training
    encoder.eval()
    keep = get_setting(setting).kept_channels
    out = np.zeros((len(epochs), encoder.width), dtype=np.float32)
    for a in range(0, len(epochs), batch_size):
        x = epochs.batch_values(np.arange(a, min(a + batch_size, len(epochs))))
        x[:, ~keep] = 0.0
        out[a: a + len(x)] = encoder(torch.from_numpy(x)).numpy()
    encoder.train(was_training)
    return out


# --- head training ---------------------------------------------------------


class LinearHead(nn.Module):
    """Affine head with optional frozen standardization of its input."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.register_buffer("mean", torch.zeros(in_dim))
        self.register_buffer("scale", torch.ones(in_dim))
        self.linear = nn.Linear(in_dim, out_dim)

    def fit_standardizer(self, X: torch.Tensor) -> None:
        self.mean.copy_(X.mean(0))
        std = X.std(0, unbiased=False)
        self.scale.copy_(torch.where(std > 1e-8, std, torch.ones_like(std)))

    def forward(self, x):
        return self.linear((x - self.mean) / self.scale)


def _head_loss(task: TaskSpec, out: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if task.is_regression:
        return F.mse_loss(out[:, 0], y)
    return F.cross_entropy(out, y)


def _schedule_length(n: int, cfg: HeadConfig) -> tuple[int, int]:
    batch = min(cfg.batch_size, n)
    steps = cfg.max_steps
    if cfg.max_epochs is not None:
        steps = min(steps, cfg.max_epochs * max(1, math.ceil(n / batch)))
    return batch, max(0, steps)


def train_head(X: np.ndarray, y: np.ndarray, task: TaskSpec, config: HeadConfig = PROBE_DEFAULTS) -> tuple[LinearHead, list[float]]:
    """Fit a linear head on fixed features.  Deterministic for a given seed."""
    task = get_task(task)
    if len(X) == 0:
        raise EmptySplitError("cannot train a head on an empty split")
    Xt = torch.as_tensor(np.asarray(X, dtype=np.float32))
    yt = torch.as_tensor(np.asarray(y), dtype=torch.float32 if task.is_regression else torch.long)
    gen = torch.Generator().manual_seed(config.seed)
    head = LinearHead(Xt.shape[1], 1 if task.is_regression else task.n_classes)
    with torch.no_grad():
        nn.init.normal_(head.linear.weight, std=0.01, generator=gen)
        nn.init.zeros_(head.linear.bias)
        if config.standardize:
            head.fit_standardizer(Xt)
        if task.is_regression:
            # start at the mean predictor so early steps only fit residual structure
            head.linear.bias.fill_(float(yt.mean()))
    opt = torch.optim.AdamW(head.linear.parameters(), lr=0.0, weight_decay=config.weight_decay)
    batch, total = _schedule_length(len(Xt), config)
    rng = np.random.default_rng(config.seed)
    losses = []
    order, cursor = rng.permutation(len(Xt)), 0
    for step in range(1, total + 1):
        if cursor + batch > len(Xt):
            order, cursor = rng.permutation(len(Xt)), 0
        idx = torch.from_numpy(order[cursor: cursor + batch])
        cursor += batch
        for g in opt.param_groups:
            g["lr"] = lr_at(step, total, config.base_lr, config.warmup_fraction)
        loss = _head_loss(task, head(Xt[idx]), yt[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    head.eval()
    return head, losses


@torch.no_grad()
def predict(head: nn.Module, X, task: TaskSpec) -> np.ndarray:
    out = head(torch.as_tensor(np.asarray(X, dtype=np.float32)))
    if task.is_regression:
        return out[:, 0].double().numpy()
    return torch.softmax(out.double(), dim=1).numpy()


def score(task: TaskSpec, pred: np.ndarray, y: np.ndarray) -> dict:
    task = get_task(task)
    if task.is_regression:
        err = pred - y
        return {"mae_bpm": float(np.mean(np.abs(err))), "rmse_bpm": float(np.sqrt(np.mean(err ** 2)))}
    if task.n_classes == 2:
        return {"auroc": auroc(pred[:, 1], y), "auprc": auprc(pred[:, 1], y)}
    m = staging_metrics(pred, y, task.n_classes)
    return {"auroc": m["auroc"], "auprc": m["auprc"]}


def _labelled(epochs: EpochSet, task: TaskSpec, name: str) -> tuple[EpochSet, np.ndarray]:
    if len(epochs) == 0:
        raise EmptySplitError(f"{name} split is empty")
    rows = task.valid_rows(epochs)
    if not rows.any():
        raise EmptySplitError(f"{name} split has no {task.kind} labels")
    if not rows.all():
        epochs = epochs[rows]
    return epochs, task.labels(epochs)


def _stamp(model) -> dict:
    if isinstance(model, Checkpoint):
        return {"objective": model.objective, "checkpoint_steps": model.metadata.get("steps")}
    return {}


def probe_features(X_train, y_train, X_test, y_test, task, config: HeadConfig = PROBE_DEFAULTS) -> dict:
    """Train a head on fixed train features and score it on test features."""
    task = get_task(task)
    head, losses = train_head(X_train, y_train, task, config)
    metrics = score(task, predict(head, X_test, task), y_test)
    metrics["final_train_loss"] = losses[-1] if losses else None
    return metrics


def linear_probe(model, train: EpochSet, test: EpochSet, task, setting=None,
                 config: HeadConfig = PROBE_DEFAULTS, embed_batch: int = 256,
                 train_embeddings: np.ndarray | None = None, test_embeddings: np.ndarray | None = None) -> EvalReport:
    """Frozen-encoder linear head.  Precomputed embeddings (rows aligned with
    ``train``/``test`` and extracted under ``setting``) skip the encoder pass."""
    task, setting = get_task(task), get_setting(setting)
    rows_tr, rows_te = task.valid_rows(train), task.valid_rows(test)
    train, y_tr = _labelled(train, task, "train")
    test, y_te = _labelled(test, task, "test")
    check_isolation(train, test)
    X_tr = train_embeddings[rows_tr] if train_embeddings is not None else extract_embeddings(model, train, setting, embed_batch)
    X_te = test_embeddings[rows_te] if test_embeddings is not None else extract_embeddings(model, test, setting, embed_batch)
    metrics = probe_features(X_tr, y_tr, X_te, y_te, task, config)
    return EvalReport(task.kind, "linear_probe", setting.name, metrics, config.seed, config.config_hash(),
                      {"train": len(train), "test": len(test)}, _stamp(model))


def hr_probe(model, train: EpochSet, test: EpochSet, setting=None,
             config: HeadConfig = PROBE_DEFAULTS, embed_batch: int = 256, **embeddings) -> EvalReport:
    """Linear regression of heart rate; the report carries the mean-predictor row too."""
    task = TASKS["hr_regression"]
    rep = linear_probe(model, train, test, task, setting, config, embed_batch, **embeddings)
    _, y_tr = _labelled(train, task, "train")
    _, y_te = _labelled(test, task, "test")
    rep.metrics["mean_baseline"] = mean_baseline(y_tr, y_te)
    return rep


def mean_baseline(y_train, y_test) -> dict:
    """Predict the train-set mean everywhere."""
    pred = np.full(len(y_test), float(np.mean(y_train)))
    return score(TASKS["hr_regression"], pred, np.asarray(y_test, dtype=np.float64))


# --- few-shot --------------------------------------------------------------


def sample_kshot(labels: np.ndarray, k: int, seed: int, n_classes: int | None = None) -> np.ndarray:
    """Indices of exactly ``k`` examples per class, drawn uniformly without replacement."""
    labels = np.asarray(labels)
    classes = range(n_classes) if n_classes is not None else np.unique(labels)
    rng = np.random.default_rng([seed, k])
    picked = []
    for c in classes:
        pool = np.flatnonzero(labels == c)
        if len(pool) < k:
            raise ValueError(f"class {c} has {len(pool)} training examples, fewer than K={k}")
        picked.append(np.sort(rng.choice(pool, size=k, replace=False)))
    return np.concatenate(picked)


def fewshot(model, train: EpochSet, test: EpochSet, task, k: int, seed: int = 0, setting=None,
            config: HeadConfig = PROBE_DEFAULTS, embed_batch: int = 256,
            train_embeddings: np.ndarray | None = None, test_embeddings: np.ndarray | None = None) -> EvalReport:
    """K-shot linear probe.  Precomputed embeddings (aligned with ``train``/``test``) may be passed in."""
    task, setting = get_task(task), get_setting(setting)
    if task.is_regression:
        raise ValueError("few-shot sampling needs a classification task")
    if len(train) == 0 or len(test) == 0:
        raise EmptySplitError("few-shot needs non-empty train and test splits")
    check_isolation(train, test)
    y_all = task.labels(train)
    idx = sample_kshot(y_all, k, seed, task.n_classes)
    sub = train[idx]
    check_isolation(sub, test)
    X_tr = train_embeddings[idx] if train_embeddings is not None else extract_embeddings(model, sub, setting, embed_batch)
    X_te = test_embeddings if test_embeddings is not None else extract_embeddings(model, test, setting, embed_batch)
    cfg = replace(config, seed=seed)
    metrics = probe_features(X_tr, y_all[idx], X_te, task.labels(test), task, cfg)
    return EvalReport(task.kind, f"fewshot-{k}", setting.name, metrics, seed, cfg.config_hash(),
                      {"train": len(idx), "test": len(test)},
                      {**_stamp(model), "subset_index": idx.tolist()})


# --- fine-tuning -----------------------------------------------------------


class FinetuneModel(nn.Module):
    def __init__(self, encoder: EpochEncoder, out_dim: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.width, out_dim)

    def forward(self, x):
        return self.head(self.encoder(x))


def _train_end_to_end(encoder: EpochEncoder, train: EpochSet, y: np.ndarray, task: TaskSpec,
                      setting: MissingChannelSetting, config: HeadConfig, grad_clip: float | None = 3.0):
    torch.manual_seed(config.seed)
    model = FinetuneModel(encoder, 1 if task.is_regression else task.n_classes)
    if task.is_regression:
        with torch.no_grad():
            model.head.bias.fill_(float(np.mean(y)))
    opt = torch.optim.AdamW(model.parameters(), lr=0.0, weight_decay=config.weight_decay)
    batch, total = _schedule_length(len(train), config)
    yt = torch.as_tensor(y, dtype=torch.float32 if task.is_regression else torch.long)
    keep = setting.kept_channels
    rng = np.random.default_rng(config.seed)
    order, cursor = rng.permutation(len(train)), 0
    losses = []
    model.train()
    for step in range(1, total + 1):
        if cursor + batch > len(train):
            order, cursor = rng.permutation(len(train)), 0
        idx = np.sort(order[cursor: cursor + batch])
        cursor += batch
        x = train.batch_values(idx)
        x[:, ~keep] = 0.0
        for g in opt.param_groups:
            g["lr"] = lr_at(step, total, config.base_lr, config.warmup_fraction)
        try:
            loss = _head_loss(task, model(torch.from_numpy(x)), yt[torch.from_numpy(idx)])
        except NonFiniteActivationError as exc:
            raise FloatingPointError(f"fine-tuning diverged at step {step}: {exc}") from exc
        if not torch.isfinite(loss):
            raise FloatingPointError(f"fine-tuning diverged at step {step}: loss {float(loss)}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
        opt.step()
        losses.append(float(loss.detach()))
    model.eval()
    return model, losses


@torch.no_grad()
def _predict_model(model: FinetuneModel, epochs: EpochSet, task: TaskSpec, setting, batch_size: int = 256) -> np.ndarray:
    X = extract_embeddings(model.encoder, epochs, setting, batch_size)
    return predict(model.head, X, task)


def finetune(model, train: EpochSet, test: EpochSet, task, setting=None,
             config: HeadConfig = FINETUNE_DEFAULTS, protocol: str = "finetune") -> EvalReport:
    """Jointly optimize encoder and linear head."""
    task, setting = get_task(task), get_setting(setting)
    train, y_tr = _labelled(train, task, "train")
    test, y_te = _labelled(test, task, "test")
    check_isolation(train, test)
    # a Checkpoint builds a fresh encoder; a live encoder is copied so the caller's weights stay put
    encoder = copy.deepcopy(model) if isinstance(model, EpochEncoder) else _as_encoder(model)
    ft, losses = _train_end_to_end(encoder, train, y_tr, task, setting, config)
    metrics = score(task, _predict_model(ft, test, task, setting), y_te)
    metrics["final_train_loss"] = losses[-1] if losses else None
    return EvalReport(task.kind, protocol, setting.name, metrics, config.seed, config.config_hash(),
                      {"train": len(train), "test": len(test)}, {**_stamp(model), "steps": len(losses)})


def supervised(encoder_config, train: EpochSet, test: EpochSet, task, setting=None,
               config: HeadConfig = SUPERVISED_DEFAULTS) -> EvalReport:
    """Randomly initialised encoder trained end to end on the labels."""
    torch.manual_seed(config.seed)
    return finetune(EpochEncoder(encoder_config), train, test, task, setting, config, protocol="supervised")


__all__ = [
    "TaskSpec", "TASKS", "get_task", "MissingChannelSetting", "MISSING_SETTINGS", "get_setting",
    "apply_missing_setting", "HeadConfig", "EvalReport", "extract_embeddings", "train_head", "probe_features",
    "linear_probe", "hr_probe", "mean_baseline", "sample_kshot", "fewshot", "finetune", "supervised",
    "check_isolation", "ProtocolIsolationError", "EmptySplitError", "UndefinedMetricError",
]
