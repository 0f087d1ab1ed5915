"""Self-supervised objectives: SimCLR, DINO, MAE, VQ-VAE, autoregression and
modality-group contrast.

Each objective wraps a shared :class:`EpochEncoder` and exposes
``loss(x, rng)`` for one batch plus ``after_step()`` for post-optimizer
bookkeeping (the DINO teacher update).
"""

from __future__ import annotations

import copy
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augmentation import AugmentationSpec, augment, make_views
from .encoder import Block, EpochEncoder
from .montage import GROUPS, MONTAGE

OBJECTIVES = ("simclr", "dino", "mae", "vqvae", "ar", "modality_contrastive")

SIMCLR_TEMPERATURE = 0.1
DINO_PROTOTYPES = 1024
DINO_STUDENT_TEMP = 0.1
DINO_TEACHER_TEMP = 0.04
DINO_MOMENTUM = 0.996
DINO_CENTER_MOMENTUM = 0.9
MAE_MASK_RATIO = 0.5
VQ_CODEBOOK_SIZE = 512
VQ_CODE_DIM = 64
VQ_BETA = 0.25


def _tensor(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(np.ascontiguousarray(x), dtype=torch.float32)


def windows(x: torch.Tensor, window: int = 64) -> torch.Tensor:
    """(B, C, T) -> (B, C * T/window, window) in channel-major token order."""
    B, C, T = x.shape
    return x.reshape(B, C * (T // window), window)


# --- contrastive -----------------------------------------------------------


def ntxent_loss(z_a: torch.Tensor, z_b: torch.Tensor, temperature: float = SIMCLR_TEMPERATURE) -> torch.Tensor:
    """Normalized-temperature cross entropy over the 2B views of a batch.

    Each view's positive is its partner; the other 2B - 2 views are negatives.
    """
    B = z_a.shape[0]
    if B < 2:
        raise ValueError("ntxent_loss needs a batch of at least 2")
    z = F.normalize(torch.cat([z_a, z_b], dim=0), dim=1)
    sim = z @ z.T / temperature
    self_mask = torch.eye(2 * B, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(self_mask, float("-inf"))
    targets = torch.cat([torch.arange(B, 2 * B), torch.arange(0, B)]).to(z.device)
    return F.cross_entropy(sim, targets)


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, out_dim: int = 128, hidden: int = 512):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))

    def forward(self, x):
        return self.net(x)


class SimCLR(nn.Module):
    def __init__(self, encoder: EpochEncoder, augmentation: AugmentationSpec, temperature: float = SIMCLR_TEMPERATURE,
                 projection_dim: int | None = None):
        super().__init__()
        self.encoder = encoder
        self.head = ProjectionHead(encoder.width, projection_dim or encoder.config.projection_dim)
        self.augmentation = augmentation
        self.temperature = temperature

    def loss(self, x, rng: np.random.Generator) -> torch.Tensor:
        va, vb = make_views(np.asarray(x), self.augmentation, rng)
        za = self.head(self.encoder(_tensor(va)))
        zb = self.head(self.encoder(_tensor(vb)))
        return ntxent_loss(za, zb, self.temperature)

    def after_step(self):
        pass


def group_views(x: torch.Tensor) -> list[torch.Tensor]:
    """One copy of the batch per montage group, all other channels zeroed."""
    views = []
    for g in GROUPS:
        keep = torch.as_tensor(MONTAGE.group_mask([g]), dtype=x.dtype)
        views.append(x * keep[None, :, None])
    return views


def modality_contrastive_loss(group_embeddings: list[torch.Tensor], temperature: float = SIMCLR_TEMPERATURE) -> torch.Tensor:
    """Mean NT-Xent over all unordered pairs of group embeddings."""
    losses = []
    for i in range(len(group_embeddings)):
        for j in range(i + 1, len(group_embeddings)):
            losses.append(ntxent_loss(group_embeddings[i], group_embeddings[j], temperature))
    return torch.stack(losses).mean()


def modality_contrastive_step(encoder: EpochEncoder, head: nn.Module, x, temperature: float = SIMCLR_TEMPERATURE) -> torch.Tensor:
    x = _tensor(x)
    if x.shape[0] < 2:
        raise ValueError("modality contrastive loss needs a batch of at least 2")
    return modality_contrastive_loss([head(encoder(v)) for v in group_views(x)], temperature)


class ModalityContrastive(nn.Module):
    """Shared encoder; brain, respiration, cardiac and somatic views are contrasted pairwise."""

    def __init__(self, encoder: EpochEncoder, temperature: float = SIMCLR_TEMPERATURE, projection_dim: int | None = None):
        super().__init__()
        self.encoder = encoder
        self.head = ProjectionHead(encoder.width, projection_dim or encoder.config.projection_dim)
        self.temperature = temperature

    def loss(self, x, rng: np.random.Generator) -> torch.Tensor:
        return modality_contrastive_step(self.encoder, self.head, x, self.temperature)

    def after_step(self):
        pass


# --- self-distillation -----------------------------------------------------


class DINOHead(nn.Module):
    def __init__(self, in_dim: int, n_prototypes: int = DINO_PROTOTYPES, hidden: int = 256, bottleneck: int = 64):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, hidden), nn.GELU(), nn.Linear(hidden, bottleneck)
        )
        self.last = nn.Linear(bottleneck, n_prototypes, bias=False)

    def forward(self, x):
        return self.last(F.normalize(self.mlp(x), dim=-1))


def dino_loss(student_out: list[torch.Tensor], teacher_out: list[torch.Tensor], center: torch.Tensor,
              student_temp: float = DINO_STUDENT_TEMP, teacher_temp: float = DINO_TEACHER_TEMP) -> torch.Tensor:
    """Cross-entropy between centered/sharpened teacher and student, over cross-view pairs."""
    targets = [F.softmax((t.detach() - center) / teacher_temp, dim=-1) for t in teacher_out]
    terms = []
    for i, t in enumerate(targets):
        for j, s in enumerate(student_out):
            if i == j:
                continue
            terms.append(torch.sum(-t * F.log_softmax(s / student_temp, dim=-1), dim=-1).mean())
    return torch.stack(terms).mean()


@torch.no_grad()
def ema_update(student: nn.Module, teacher: nn.Module, momentum: float) -> nn.Module:
    """teacher <- momentum * teacher + (1 - momentum) * student, elementwise."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {momentum}")
    for ps, pt in zip(student.parameters(), teacher.parameters()):
        pt.mul_(momentum).add_(ps.detach(), alpha=1.0 - momentum)
    return teacher


@torch.no_grad()
def update_center(center: torch.Tensor, teacher_out: list[torch.Tensor], momentum: float = DINO_CENTER_MOMENTUM) -> torch.Tensor:
    batch_mean = torch.cat(teacher_out, dim=0).mean(dim=0)
    return center * momentum + batch_mean * (1.0 - momentum)


class DINONetwork(nn.Module):
    def __init__(self, encoder: EpochEncoder, head: DINOHead):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, x):
        return self.head(self.encoder(x))


def dino_step(student: nn.Module, teacher: nn.Module, center: torch.Tensor, views, temps=(DINO_STUDENT_TEMP, DINO_TEACHER_TEMP),
              momentum: float = DINO_MOMENTUM, center_momentum: float = DINO_CENTER_MOMENTUM,
              optimizer: torch.optim.Optimizer | None = None, grad_clip: float | None = None):
    """One DINO update.  Returns ``(loss, teacher, center)``.

    Without an optimizer only the loss is computed (teacher and center are
    returned unchanged), which is what gradient probes need.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {momentum}")
    tau_s, tau_t = temps
    if not 0.0 < tau_t < tau_s:
        raise ValueError("need 0 < teacher_temp < student_temp")
    views = [_tensor(v) for v in views]
    with torch.no_grad():
        t_out = [teacher(v) for v in views]
    s_out = [student(v) for v in views]
    loss = dino_loss(s_out, t_out, center, tau_s, tau_t)
    if optimizer is not None:
        optimizer.zero_grad()
        loss.backward()
        if grad_clip:
            torch.nn.utils.clip_grad_norm_(student.parameters(), grad_clip)
        optimizer.step()
        ema_update(student, teacher, momentum)
        center = update_center(center, t_out, center_momentum)
    return loss, teacher, center


class DINO(nn.Module):
    def __init__(self, encoder: EpochEncoder, augmentation: AugmentationSpec, n_prototypes: int = DINO_PROTOTYPES,
                 student_temp: float = DINO_STUDENT_TEMP, teacher_temp: float = DINO_TEACHER_TEMP,
                 momentum: float = DINO_MOMENTUM, center_momentum: float = DINO_CENTER_MOMENTUM):
        super().__init__()
        if not 0.0 < teacher_temp < student_temp:
            raise ValueError("need 0 < teacher_temp < student_temp")
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"EMA momentum must lie in [0, 1], got {momentum}")
        self.encoder = encoder
        self.student = DINONetwork(encoder, DINOHead(encoder.width, n_prototypes))
        self.teacher = copy.deepcopy(self.student)
        self.teacher.requires_grad_(False)
        self.register_buffer("center", torch.zeros(n_prototypes))
        self.augmentation = augmentation
        self.student_temp, self.teacher_temp = student_temp, teacher_temp
        self.momentum, self.center_momentum = momentum, center_momentum
        self._last_teacher_out: list[torch.Tensor] | None = None

    def trainable_parameters(self):
        return self.student.parameters()

    def loss(self, x, rng: np.random.Generator) -> torch.Tensor:
        views = [_tensor(v) for v in make_views(np.asarray(x), self.augmentation, rng)]
        with torch.no_grad():
            t_out = [self.teacher(v) for v in views]
        s_out = [self.student(v) for v in views]
        self._last_teacher_out = t_out
        return dino_loss(s_out, t_out, self.center, self.student_temp, self.teacher_temp)

    def after_step(self):
        ema_update(self.student, self.teacher, self.momentum)
        if self._last_teacher_out is not None:
            self.center.copy_(update_center(self.center, self._last_teacher_out, self.center_momentum))
            self._last_teacher_out = None


# --- reconstruction --------------------------------------------------------


class TokenDecoder(nn.Module):
    """Light transformer mapping per-token states back to raw 64-sample windows."""

    def __init__(self, in_dim: int, n_channels: int = 12, n_windows: int = 30, window: int = 64,
                 width: int | None = None, depth: int = 2, heads: int = 4):
        super().__init__()
        width = width or max(in_dim // 2, 8)
        if width % heads:
            heads = 1
        self.embed = nn.Linear(in_dim, width)
        self.mask_token = nn.Parameter(torch.zeros(width))
        self.channel_embed = nn.Parameter(torch.randn(n_channels, width) * 0.02)
        self.time_embed = nn.Parameter(torch.randn(n_windows, width) * 0.02)
        self.blocks = nn.ModuleList(Block(width, heads, 4 * width) for _ in range(depth))
        self.norm = nn.LayerNorm(width)
        self.out = nn.Linear(width, window)
        nn.init.normal_(self.mask_token, std=0.02)

    def forward(self, states: torch.Tensor, visible_idx: torch.Tensor | None = None, n_tokens: int = 360) -> torch.Tensor:
        """``states``: (B, 1 + n_visible, in_dim) with CLS first.  Returns (B, n_tokens, window)."""
        B = states.shape[0]
        h = self.embed(states)
        cls, vis = h[:, :1], h[:, 1:]
        if visible_idx is None:
            full = vis
        else:
            full = self.mask_token.expand(B, n_tokens, -1).clone()
            full.scatter_(1, visible_idx[..., None].expand(-1, -1, h.shape[-1]), vis)
        pos = (self.channel_embed[:, None] + self.time_embed[None]).reshape(-1, h.shape[-1])
        x = torch.cat([cls, full + pos], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return self.out(self.norm(x))[:, 1:]


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the tokens where ``mask`` is true."""
    per_token = ((pred - target) ** 2).mean(dim=-1)
    return (per_token * mask).sum() / mask.sum()


def sample_token_mask(batch: int, n_tokens: int, ratio: float, generator: torch.Generator | None = None):
    """Uniform per-example mask of floor(n_tokens * ratio) tokens.

    Returns ``(mask (B, n) bool, visible_idx (B, n_visible) sorted)``.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"token mask ratio must lie in (0, 1), got {ratio}")
    n_mask = int(math.floor(n_tokens * ratio))
    if n_mask == 0:
        raise ValueError(f"mask ratio {ratio} masks no tokens out of {n_tokens}")
    noise = torch.rand(batch, n_tokens, generator=generator)
    order = noise.argsort(dim=1)
    visible = order[:, n_mask:].sort(dim=1).values
    mask = torch.ones(batch, n_tokens, dtype=torch.bool)
    mask.scatter_(1, visible, False)
    return mask, visible


def mae_forward(encoder: EpochEncoder, decoder: TokenDecoder, x, ratio: float = MAE_MASK_RATIO,
                generator: torch.Generator | None = None):
    """Returns ``(pred, target, mask)``, each over the 360 signal tokens."""
    x = _tensor(x)
    tokens = encoder.signal_tokens(x)
    B, N, W = tokens.shape
    mask, visible = sample_token_mask(B, N, ratio, generator)
    vis_tokens = torch.gather(tokens, 1, visible[..., None].expand(-1, -1, W))
    h = torch.cat([encoder.cls_token.expand(B, -1, -1), vis_tokens], dim=1)
    states = encoder.run_blocks(h)
    pred = decoder(states, visible, n_tokens=N)
    return pred, windows(x, encoder.config.token_window), mask


def mae_step(encoder: EpochEncoder, decoder: TokenDecoder, x, ratio: float = MAE_MASK_RATIO,
             generator: torch.Generator | None = None) -> torch.Tensor:
    pred, target, mask = mae_forward(encoder, decoder, x, ratio, generator)
    return masked_mse(pred, target, mask)


class MAE(nn.Module):
    def __init__(self, encoder: EpochEncoder, augmentation: AugmentationSpec | None = None,
                 mask_ratio: float = MAE_MASK_RATIO, seed: int = 0):
        super().__init__()
        self.encoder = encoder
        self.decoder = TokenDecoder(encoder.width, heads=encoder.config.heads)
        self.mask_ratio = mask_ratio
        self.augmentation = augmentation
        self.generator = torch.Generator().manual_seed(seed)

    def loss(self, x, rng: np.random.Generator) -> torch.Tensor:
        if self.augmentation is not None:
            x = augment(np.asarray(x), self.augmentation, rng)
        return mae_step(self.encoder, self.decoder, x, self.mask_ratio, self.generator)

    def after_step(self):
        pass


def vq_quantize(z: torch.Tensor, codebook: torch.Tensor):
    """Nearest-entry quantization with a straight-through gradient.

    Returns ``(indices, z_q, codebook_loss, commitment_loss)``; ties go to the
    lowest index.  ``z_q`` has the selected entries' values in the forward
    pass and passes gradients to ``z`` unchanged.
    """
    if codebook.shape[0] == 0:
        raise ValueError("codebook is empty")
    flat = z.reshape(-1, z.shape[-1])
    d2 = (flat.pow(2).sum(1, keepdim=True) - 2 * flat @ codebook.T + codebook.pow(2).sum(1)[None, :])
    idx = torch.argmin(d2, dim=1)
    e = codebook[idx].reshape(z.shape)
    codebook_loss = F.mse_loss(e, z.detach())
    commitment_loss = F.mse_loss(z, e.detach())
    z_q = z + (e - z).detach()
    return idx.reshape(z.shape[:-1]), z_q, codebook_loss, commitment_loss


class VQVAE(nn.Module):
    def __init__(self, encoder: EpochEncoder, augmentation: AugmentationSpec | None = None,
                 codebook_size: int = VQ_CODEBOOK_SIZE, code_dim: int = VQ_CODE_DIM, beta: float = VQ_BETA):
        super().__init__()
        self.encoder = encoder
        self.pre = nn.Linear(encoder.width, code_dim)
        self.codebook = nn.Parameter(torch.randn(codebook_size, code_dim) / math.sqrt(code_dim))
        self.decoder = TokenDecoder(code_dim, width=max(encoder.width // 2, 8), heads=encoder.config.heads)
        self.beta = beta
        self.augmentation = augmentation

    def loss(self, x, rng: np.random.Generator) -> torch.Tensor:
        if self.augmentation is not None:
            x = augment(np.asarray(x), self.augmentation, rng)
        x = _tensor(x)
        states = self.encoder.encode_tokens(x)
        z = self.pre(states)
        _, z_q, cb, commit = vq_quantize(z[:, 1:], self.codebook)
        pred = self.decoder(torch.cat([z[:, :1], z_q], dim=1))
        recon = F.mse_loss(pred, windows(x, self.encoder.config.token_window))
        return recon + cb + self.beta * commit

    def after_step(self):
        pass


# --- autoregression --------------------------------------------------------


def ar_forward(encoder: EpochEncoder, head: nn.Module, x):
    """Next-window predictions under causal attention.

    Returns ``(pred, target)`` of shape (B, 359, 64): state t predicts the raw
    samples of signal token t + 1 in channel-major order.
    """
    x = _tensor(x)
    states = encoder.encode_tokens(x, causal=True)[:, 1:]
    target = windows(x, encoder.config.token_window)
    return head(states[:, :-1]), target[:, 1:]


def ar_step(encoder: EpochEncoder, head: nn.Module, x) -> torch.Tensor:
    pred, target = ar_forward(encoder, head, x)
    return ((pred - target) ** 2).mean()


class Autoregressive(nn.Module):
    def __init__(self, encoder: EpochEncoder, augmentation: AugmentationSpec | None = None):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.width, encoder.config.token_window)
        self.augmentation = augmentation

    def loss(self, x, rng: np.random.Generator) -> torch.Tensor:
        if self.augmentation is not None:
            x = augment(np.asarray(x), self.augmentation, rng)
        return ar_step(self.encoder, self.head, x)

    def after_step(self):
        pass


def build_objective(name: str, encoder: EpochEncoder, augmentation: AugmentationSpec | None, seed: int = 0,
                    **params) -> nn.Module:
    """Instantiate objective ``name`` around ``encoder``.

    ``augmentation`` is required for simclr/dino; for the reconstruction and
    autoregressive objectives it is optional and applied as a single view.
    """
    if name == "simclr":
        return SimCLR(encoder, augmentation or AugmentationSpec(), **params)
    if name == "dino":
        return DINO(encoder, augmentation or AugmentationSpec(), **params)
    if name == "mae":
        return MAE(encoder, augmentation, seed=seed, **params)
    if name == "vqvae":
        return VQVAE(encoder, augmentation, **params)
    if name == "ar":
        return Autoregressive(encoder, augmentation)
    if name == "modality_contrastive":
        return ModalityContrastive(encoder, **params)
    raise ValueError(f"unknown objective {name!r}; choose from {OBJECTIVES}")
