"""Transformer epoch encoder over 64-sample windows of a 12 x 1920 epoch."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .montage import EPOCH_SAMPLES

N_CHANNELS = 12
TOKEN_WINDOW = 64
CHECKPOINT_VERSION = 1

PRESETS = {
    "tiny": dict(width=64, depth=2, heads=4, mlp_dim=256),
    "vit-1m": dict(width=128, depth=6, heads=4, mlp_dim=512),
    "vit-5m": dict(width=192, depth=12, heads=3, mlp_dim=768),
    "vit-85m": dict(width=768, depth=12, heads=12, mlp_dim=3072),
}


class NonFiniteActivationError(FloatingPointError):
    pass


@dataclass
class EncoderConfig:
    width: int = 64
    depth: int = 2
    heads: int = 4
    mlp_dim: int = 256
    token_window: int = TOKEN_WINDOW
    n_channels: int = N_CHANNELS
    n_samples: int = EPOCH_SAMPLES
    projection_dim: int = 128
    preset: str | None = "tiny"

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.n_samples % self.token_window:
            raise ValueError(f"token_window {self.token_window} does not divide {self.n_samples}")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "EncoderConfig":
        key = name.lower()
        if key not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[key], "preset": key, **overrides})

    @property
    def n_windows(self) -> int:
        return self.n_samples // self.token_window

    @property
    def n_tokens(self) -> int:
        return self.n_channels * self.n_windows + 1

    def to_dict(self) -> dict:
        return asdict(self)


class Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_dim: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, mlp_dim), nn.GELU(), nn.Linear(mlp_dim, width))

    def forward(self, x: torch.Tensor, causal: bool = False) -> torch.Tensor:
        B, N, W = x.shape
        q, k, v = self.qkv(self.norm1(x)).view(B, N, 3, self.heads, W // self.heads).permute(2, 0, 3, 1, 4)
        a = F.scaled_dot_product_attention(q, k, v, is_causal=causal)
        x = x + self.proj(a.transpose(1, 2).reshape(B, N, W))
        return x + self.mlp(self.norm2(x))


class EpochEncoder(nn.Module):
    """Conv tokenizer + learned channel/time embeddings + CLS + pre-norm blocks.

    Token order is CLS first, then channel-major: channel 0 windows 0..29,
    channel 1 windows 0..29, and so on.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        W = config.width
        self.tokenizer = nn.Conv1d(1, W, kernel_size=config.token_window, stride=config.token_window)
        self.channel_embed = nn.Parameter(torch.zeros(config.n_channels, W))
        self.time_embed = nn.Parameter(torch.zeros(config.n_windows, W))
        self.cls_token = nn.Parameter(torch.zeros(1, 1, W))
        self.blocks = nn.ModuleList(Block(W, config.heads, config.mlp_dim) for _ in range(config.depth))
        self.norm = nn.LayerNorm(W)
        nn.init.trunc_normal_(self.channel_embed, std=0.02)
        nn.init.trunc_normal_(self.time_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.apply(_init_linear)

    @property
    def width(self) -> int:
        return self.config.width

    def position_embedding(self) -> torch.Tensor:
        """(C * n_windows, W) additive embedding in channel-major token order."""
        return (self.channel_embed[:, None, :] + self.time_embed[None, :, :]).reshape(-1, self.config.width)

    def signal_tokens(self, x: torch.Tensor, add_position: bool = True) -> torch.Tensor:
        """(B, C, T) -> (B, C * n_windows, W), without CLS."""
        cfg = self.config
        if x.dim() != 3 or x.shape[1] != cfg.n_channels or x.shape[2] != cfg.n_samples:
            raise ValueError(f"expected input (B, {cfg.n_channels}, {cfg.n_samples}), got {tuple(x.shape)}")
        B = x.shape[0]
        tok = self.tokenizer(x.reshape(B * cfg.n_channels, 1, cfg.n_samples))  # (B*C, W, n_windows)
        tok = tok.transpose(1, 2).reshape(B, cfg.n_channels * cfg.n_windows, cfg.width)
        if add_position:
            tok = tok + self.position_embedding()
        return tok

    def tokenize(self, x: torch.Tensor, add_position: bool = True) -> torch.Tensor:
        """(B, C, T) -> (B, 1 + C * n_windows, W) with CLS prepended."""
        tok = self.signal_tokens(x, add_position)
        return torch.cat([self.cls_token.expand(tok.shape[0], -1, -1), tok], dim=1)

    def run_blocks(self, tokens: torch.Tensor, causal: bool = False) -> torch.Tensor:
        h = tokens
        for blk in self.blocks:
            h = blk(h, causal=causal)
        out = self.norm(h)
        if not torch.isfinite(out).all():
            raise NonFiniteActivationError(self._diagnose(tokens, causal))
        return out

    @torch.no_grad()
    def _diagnose(self, tokens: torch.Tensor, causal: bool) -> str:
        if not torch.isfinite(tokens).all():
            return f"non-finite token embeddings ({(~torch.isfinite(tokens)).sum().item()} entries)"
        h = tokens
        for i, blk in enumerate(self.blocks):
            h = blk(h, causal=causal)
            if not torch.isfinite(h).all():
                return (f"block {i}: {(~torch.isfinite(h)).sum().item()} non-finite activations "
                        f"(input max |x| = {tokens.abs().max().item():.3g})")
        return "non-finite output after final norm"

    def encode_tokens(self, x: torch.Tensor, causal: bool = False) -> torch.Tensor:
        return self.run_blocks(self.tokenize(x), causal=causal)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.encode_tokens(x)[:, 0]


def _init_linear(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.xavier_uniform_(m.weight)
        if m.bias is not None:
            nn.init.zeros_(m.bias)


def token_positions(config: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Channel and window index of every token; CLS gets -1 for both."""
    ch = np.concatenate([[-1], np.repeat(np.arange(config.n_channels), config.n_windows)])
    tw = np.concatenate([[-1], np.tile(np.arange(config.n_windows), config.n_channels)])
    return ch, tw


def tokenize(encoder: EpochEncoder, epochs) -> tuple[torch.Tensor, dict]:
    x = torch.as_tensor(np.asarray(epochs), dtype=torch.float32) if not torch.is_tensor(epochs) else epochs
    ch, tw = token_positions(encoder.config)
    return encoder.tokenize(x), {"channel": ch, "window": tw}


def encode(encoder: EpochEncoder, epochs) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(epochs), dtype=torch.float32) if not torch.is_tensor(epochs) else epochs
    return encoder(x)


def encode_tokens(encoder: EpochEncoder, epochs, causal: bool = False) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(epochs), dtype=torch.float32) if not torch.is_tensor(epochs) else epochs
    return encoder.encode_tokens(x, causal=causal)


def param_count(config: EncoderConfig) -> int:
    """Exact trainable parameter count of :class:`EpochEncoder` for ``config``."""
    W, M = config.width, config.mlp_dim
    tokenizer = config.token_window * W + W
    embeddings = config.n_channels * W + config.n_windows * W + W
    block = (3 * W * W + 3 * W) + (W * W + W) + (W * M + M) + (M * W + W) + 4 * W
    return tokenizer + embeddings + config.depth * block + 2 * W


# --- checkpoints -----------------------------------------------------------


@dataclass
class Checkpoint:
    config: EncoderConfig
    state: dict[str, torch.Tensor]
    objective: str
    metadata: dict

    def build(self) -> EpochEncoder:
        enc = EpochEncoder(self.config)
        enc.load_state_dict(self.state)
        enc.eval()
        return enc

    @classmethod
    def from_encoder(cls, encoder: EpochEncoder, objective: str, metadata: dict | None = None) -> "Checkpoint":
        state = {k: v.detach().to(torch.float32).cpu().clone() for k, v in encoder.state_dict().items()}
        return cls(encoder.config, state, objective, dict(metadata or {}))


def save_checkpoint(ckpt: Checkpoint, directory: str | Path) -> Path:
    """``config.json`` (config, metadata, tensor index) + ``weights.bin`` (little-endian f32)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    with open(directory / "weights.bin", "wb") as fh:
        for name in sorted(ckpt.state):
            arr = ckpt.state[name].detach().cpu().numpy().astype("<f4")
            fh.write(arr.tobytes())
            index.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "encoder": ckpt.config.to_dict(),
        "objective": ckpt.objective,
        "metadata": ckpt.metadata,
        "index": index,
    }
    (directory / "config.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return directory


def load_checkpoint(directory: str | Path) -> Checkpoint:
    directory = Path(directory)
    doc = json.loads((directory / "config.json").read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{directory}: unsupported checkpoint version {doc.get('format_version')}")
    config = EncoderConfig(**doc["encoder"])
    raw = np.fromfile(directory / "weights.bin", dtype="<f4")
    expected = {k: tuple(v.shape) for k, v in EpochEncoder(config).state_dict().items()}
    state = {}
    for item in doc["index"]:
        shape = tuple(item["shape"])
        if expected.get(item["name"]) != shape:
            raise ValueError(f"{directory}: tensor {item['name']} has shape {shape}, config implies {expected.get(item['name'])}")
        start = item["offset"] // 4
        n = int(np.prod(shape)) if shape else 1
        if start + n > raw.size:
            raise ValueError(f"{directory}: weights.bin truncated at {item['name']}")
        state[item["name"]] = torch.from_numpy(raw[start: start + n].reshape(shape).copy())
    missing = set(expected) - set(state)
    if missing:
        raise ValueError(f"{directory}: missing tensors {sorted(missing)}")
    return Checkpoint(config, state, doc["objective"], doc.get("metadata", {}))
