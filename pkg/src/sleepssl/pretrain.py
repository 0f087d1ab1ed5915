"""Shared pre-training loop: AdamW, linear warmup + cosine decay, early stopping."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augmentation import AugmentationSpec
from .encoder import Checkpoint, EncoderConfig, EpochEncoder, save_checkpoint
from .objectives import OBJECTIVES, build_objective
from .preprocess import EpochSet

logger = logging.getLogger(__name__)

# Per-objective defaults at full scale: (batch size, base lr, weight decay, grad clip).
OBJECTIVE_DEFAULTS = {
    "modality_contrastive": (2560, 1e-4, 0.2, None),
    "simclr": (3200, 1e-4, 0.2, None),
    "dino": (1024, 5e-5, 0.2, 3.0),
    "mae": (9600, 3e-4, 0.2, None),
    "vqvae": (3200, 1e-4, 0.2, 3.0),
    "ar": (3200, 1e-4, 0.05, None),
}
MAX_EPOCHS = 30


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, last_good: Checkpoint | None = None):
        super().__init__(message)
        self.last_good = last_good


def lr_at(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.1) -> float:
    """Learning rate for 1-based optimizer step ``step``.

    Linear from 0 to ``base_lr`` over ``ceil(warmup_fraction * total)`` steps,
    then cosine to 0 at ``step == total_steps``.
    """
    warmup = max(1, math.ceil(warmup_fraction * total_steps))
    if step <= warmup:
        return base_lr * step / warmup
    if total_steps <= warmup:
        return base_lr
    progress = min(1.0, (step - warmup) / (total_steps - warmup))
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class PretrainConfig:
    objective: str = "dino"
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    batch_size: int = 1024
    base_lr: float = 5e-5
    weight_decay: float = 0.2
    betas: tuple[float, float] = (0.9, 0.95)
    warmup_fraction: float = 0.1
    total_steps: int | None = None  # None -> max_epochs passes over the data
    max_epochs: int = MAX_EPOCHS
    grad_clip: float | None = 3.0
    seed: int = 0
    early_stop_patience: int | None = None
    early_stop_min_delta: float = 1e-4
    objective_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.augmentation, str):
            self.augmentation = AugmentationSpec.preset(self.augmentation)
        elif isinstance(self.augmentation, dict):
            self.augmentation = AugmentationSpec.from_dict(self.augmentation)
        self.betas = tuple(self.betas)

    def validate(self) -> "PretrainConfig":
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.objective in ("simclr", "dino", "modality_contrastive") and self.batch_size < 2:
            raise ValueError(f"{self.objective} needs batch_size >= 2")
        if self.batch_size < 1 or self.base_lr <= 0:
            raise ValueError("batch_size and base_lr must be positive")
        if not 1 <= self.max_epochs <= MAX_EPOCHS:
            raise ValueError(f"max_epochs must lie in [1, {MAX_EPOCHS}]")
        self.augmentation.validate()
        return self

    @classmethod
    def for_objective(cls, objective: str, **overrides) -> "PretrainConfig":
        """Reference hyperparameters for ``objective``; OSF is ``dino`` with the default augmentation."""
        if objective not in OBJECTIVE_DEFAULTS:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
        batch, lr, wd, clip = OBJECTIVE_DEFAULTS[objective]
        aug = AugmentationSpec() if objective in ("simclr", "dino") else AugmentationSpec.preset("none")
        base = dict(objective=objective, augmentation=aug, batch_size=batch, base_lr=lr, weight_decay=wd, grad_clip=clip)
        base.update(overrides)
        return cls(**base).validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        return cls(**d).validate()


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    stopped_early: bool


def _param_groups(module: torch.nn.Module, weight_decay: float):
    decay, no_decay = [], []
    for name, p in module.named_parameters():
        if not p.requires_grad:
            continue
        if p.ndim >= 2 and not name.endswith(("embed", "cls_token", "codebook")):
            decay.append(p)
        else:
            no_decay.append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def write_log(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "lr", "loss", "wall_ms"])
        w.writeheader()
        w.writerows(rows)


def pretrain(
    epochs: EpochSet,
    encoder_config: EncoderConfig,
    config: PretrainConfig,
    out_dir: str | Path | None = None,
    metadata: dict | None = None,
) -> PretrainResult:
    """Train ``encoder_config`` with ``config.objective`` on ``epochs``.

    Batches are drawn from a seeded per-pass permutation.  When ``out_dir``
    is given the checkpoint and ``train_log.csv`` are written there.
    """
    config.validate()
    if len(epochs) == 0:
        raise ValueError("pretrain needs at least one epoch")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    encoder = EpochEncoder(encoder_config)
    objective = build_objective(config.objective, encoder, config.augmentation, seed=config.seed, **config.objective_params)
    params_owner = objective.student if hasattr(objective, "student") else objective
    groups = _param_groups(params_owner, config.weight_decay)
    # modules outside the student (e.g. decoders) are already in `objective`; DINO's teacher is excluded
    if hasattr(objective, "student"):
        owned = {id(p) for g in groups for p in g["params"]}
        extra = [p for p in objective.parameters() if p.requires_grad and id(p) not in owned]
        if extra:
            groups[1]["params"].extend(extra)
    optimizer = torch.optim.AdamW(groups, lr=0.0, betas=tuple(config.betas))

    n = len(epochs)
    batch = min(config.batch_size, n)
    steps_per_pass = max(1, n // batch)
    total = config.total_steps or steps_per_pass * config.max_epochs

    log: list[dict] = []
    order = rng.permutation(n)
    cursor = 0
    smoothed = None
    best = math.inf
    best_step = 0
    last_good = Checkpoint.from_encoder(encoder, config.objective, {"steps": 0})
    stopped_early = False
    objective.train()
    t0 = time.perf_counter()
    for step in range(1, total + 1):
        if cursor + batch > n:
            order = rng.permutation(n)
            cursor = 0
        idx = np.sort(order[cursor: cursor + batch])
        cursor += batch
        x = epochs.batch_values(idx)
        lr = lr_at(step, total, config.base_lr, config.warmup_fraction)
        for g in optimizer.param_groups:
            g["lr"] = lr
        loss = objective.loss(x, rng)
        if not torch.isfinite(loss):
            if out_dir is not None:
                save_checkpoint(last_good, Path(out_dir) / "last_good")
            raise TrainingDivergedError(f"non-finite loss at step {step} (lr={lr:.3g})", last_good)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_([p for g in groups for p in g["params"]], config.grad_clip)
        optimizer.step()
        objective.after_step()
        value = float(loss.detach())
        log.append({"step": step, "lr": lr, "loss": value, "wall_ms": round((time.perf_counter() - t0) * 1000, 1)})
        if step % 100 == 0:
            last_good = Checkpoint.from_encoder(encoder, config.objective, {"steps": step})
            logger.info("step %d/%d loss %.4f lr %.3g", step, total, value, lr)
        smoothed = value if smoothed is None else 0.98 * smoothed + 0.02 * value
        if config.early_stop_patience:
            if smoothed < best - config.early_stop_min_delta:
                best, best_step = smoothed, step
            elif step - best_step >= config.early_stop_patience and step > math.ceil(config.warmup_fraction * total):
                logger.info("early stop at step %d (smoothed loss %.4f)", step, smoothed)
                stopped_early = True
                break

    meta = {
        "steps": len(log),
        "seed": config.seed,
        "objective": config.objective,
        "pretrain_config": config.to_dict(),
        "final_loss": log[-1]["loss"],
        "n_train_epochs": n,
    }
    meta.update(metadata or {})
    ckpt = Checkpoint.from_encoder(encoder, config.objective, meta)
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(ckpt, out_dir / "checkpoint")
        write_log(log, out_dir / "train_log.csv")
    return PretrainResult(ckpt, log, stopped_early)
