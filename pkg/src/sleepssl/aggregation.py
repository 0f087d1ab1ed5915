"""Patient-level disease prediction from per-epoch embedding sequences.

A night becomes a fixed 1200 x D grid (10 hours of 30-s epochs) plus a
validity mask; four aggregators reduce it to one D-vector that a logistic
head scores.  Padding rows are zero and masked out everywhere.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .evaluation import EvalReport, ProtocolIsolationError, extract_embeddings
from .metrics import UndefinedMetricError, auprc, auroc
from .montage import DISEASES
from .preprocess import EpochSet
from .pretrain import lr_at

logger = logging.getLogger(__name__)

SEQ_LEN = 1200
AGGREGATORS = ("mean", "recurrent", "mil", "topk")
# base lr / batch size per aggregator at full scale
HEAD_DEFAULTS = {"mean": (1e-2, 256), "recurrent": (5e-3, 128), "mil": (5e-3, 128), "topk": (5e-3, 128)}
MAX_EPOCHS = 50


class EmptySequenceError(ValueError):
    pass


@dataclass
class EmbeddingSequence:
    patient_id: int
    embeddings: np.ndarray  # (SEQ_LEN, D) float32
    valid: np.ndarray  # (SEQ_LEN,) bool
    disease_labels: np.ndarray  # (3,) bool

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.disease_labels = np.asarray(self.disease_labels, dtype=bool)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.valid):
            raise ValueError(f"embeddings {self.embeddings.shape} do not match validity mask of length {len(self.valid)}")
        if np.any(self.embeddings[~self.valid]):
            raise ValueError("padding rows must be all-zero")

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def pad_sequence(embeddings: np.ndarray, seq_len: int = SEQ_LEN) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad (or truncate from the end) to ``seq_len`` rows."""
    embeddings = np.asarray(embeddings, dtype=np.float32)
    n = len(embeddings)
    if n > seq_len:
        logger.warning("sequence of %d epochs truncated to %d", n, seq_len)
        embeddings, n = embeddings[:seq_len], seq_len
    grid = np.zeros((seq_len, embeddings.shape[1]), dtype=np.float32)
    grid[:n] = embeddings
    valid = np.zeros(seq_len, dtype=bool)
    valid[:n] = True
    return grid, valid


def embed_night(model, night: EpochSet, disease_labels=(False, False, False), setting=None,
                seq_len: int = SEQ_LEN) -> EmbeddingSequence:
    """Encode every epoch of one night and pad the result to ``seq_len`` rows."""
    if len(night) == 0:
        raise EmptySequenceError("cannot embed an empty night")
    if len(night.patients()) != 1:
        raise ValueError(f"expected epochs of one patient, got {len(night.patients())}")
    if np.any(np.diff(night.night_index) < 0):
        raise ValueError("night epochs must be ordered by night_index")
    grid, valid = pad_sequence(extract_embeddings(model, night, setting), seq_len)
    return EmbeddingSequence(int(night.patient_id[0]), grid, valid, np.asarray(disease_labels, dtype=bool))


def embed_nights(model, epochs: EpochSet, disease_labels: dict[int, np.ndarray], setting=None) -> list[EmbeddingSequence]:
    """One sequence per patient in ``epochs``, in patient-id order."""
    return [embed_night(model, epochs.where_patients([p]), disease_labels[int(p)], setting) for p in epochs.patients()]


def stack(sequences: list[EmbeddingSequence]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    z = torch.from_numpy(np.stack([s.embeddings for s in sequences]))
    valid = torch.from_numpy(np.stack([s.valid for s in sequences]))
    labels = torch.from_numpy(np.stack([s.disease_labels for s in sequences]))
    return z, valid, labels


def _batched(z, valid):
    z = torch.as_tensor(z)
    valid = torch.as_tensor(valid, dtype=torch.bool)
    squeeze = z.dim() == 2
    if squeeze:
        z, valid = z[None], valid[None]
    counts = valid.sum(1)
    if (counts == 0).any():
        raise EmptySequenceError("sequence has no valid rows")
    return z, valid, counts, squeeze


def _unpack(seq):
    if isinstance(seq, EmbeddingSequence):
        return torch.from_numpy(seq.embeddings), torch.from_numpy(seq.valid)
    return seq


# --- aggregators -----------------------------------------------------------


def agg_mean(seq, valid=None) -> torch.Tensor:
    """Mean over valid rows.  Accepts a sequence or (z, valid) tensors, batched or not."""
    z, valid = _unpack(seq) if valid is None else (seq, valid)
    z, valid, counts, squeeze = _batched(z, valid)
    out = (z * valid[..., None].to(z.dtype)).sum(1) / counts[:, None].to(z.dtype)
    return out[0] if squeeze else out


class MeanPool(nn.Module):
    def forward(self, z, valid):
        return agg_mean(z, valid)


class RecurrentAggregator(nn.Module):
    """LSTM over the valid rows in temporal order; final hidden state projected to D."""

    def __init__(self, dim: int, hidden: int = 64):
        super().__init__()
        self.lstm = nn.LSTM(dim, hidden, batch_first=True)
        self.out = nn.Linear(hidden, dim)

    def forward(self, z, valid):
        z, valid, counts, squeeze = _batched(z, valid)
        # move valid rows to the front, keeping their order
        order = torch.argsort((~valid).to(torch.int8), dim=1, stable=True)
        packed_rows = torch.gather(z, 1, order[..., None].expand_as(z))
        packed = nn.utils.rnn.pack_padded_sequence(packed_rows, counts.cpu(), batch_first=True, enforce_sorted=False)
        _, (h, _) = self.lstm(packed)
        out = self.out(h[-1])
        return out[0] if squeeze else out


def agg_recurrent(seq, module: RecurrentAggregator, valid=None) -> torch.Tensor:
    z, valid = _unpack(seq) if valid is None else (seq, valid)
    return module(z, valid)


class GatedAttentionMIL(nn.Module):
    """a_i = softmax_i( w^T (tanh(V z_i) * sigmoid(U z_i)) ), output sum_i a_i z_i."""

    def __init__(self, dim: int, hidden: int = 64):
        super().__init__()
        self.V = nn.Linear(dim, hidden)
        self.U = nn.Linear(dim, hidden)
        self.w = nn.Linear(hidden, 1)

    def weights(self, z, valid):
        z, valid, _, squeeze = _batched(z, valid)
        logits = self.w(torch.tanh(self.V(z)) * torch.sigmoid(self.U(z)))[..., 0]
        a = torch.softmax(logits.masked_fill(~valid, float("-inf")), dim=1)
        return a[0] if squeeze else a

    def forward(self, z, valid):
        a = self.weights(z, valid)
        if a.dim() == 1:
            return (a[:, None] * torch.as_tensor(z)).sum(0)
        return (a[..., None] * z).sum(1)


def agg_mil(seq, module: GatedAttentionMIL, valid=None) -> torch.Tensor:
    z, valid = _unpack(seq) if valid is None else (seq, valid)
    return module(z, valid)


def topk_mask(scores: torch.Tensor, valid: torch.Tensor, k, clamp: bool = False) -> torch.Tensor:
    """Boolean mask of the k highest-scoring valid rows; ties go to the lower index.

    With ``clamp`` a row with fewer than k valid entries selects all of them;
    otherwise that is an error.
    """
    counts = valid.sum(-1)
    k = torch.as_tensor(k, dtype=counts.dtype).expand_as(counts)
    if (k < 1).any():
        raise ValueError("k must be at least 1")
    if clamp:
        k = torch.minimum(k, counts)
    elif (counts < k).any():
        raise ValueError(f"k={int(k.max())} exceeds the valid count {int(counts.min())}")
    masked = scores.masked_fill(~valid, float("-inf"))
    order = torch.sort(masked, dim=-1, descending=True, stable=True).indices
    ranks = torch.argsort(order, dim=-1)
    return (ranks < k[..., None]) & valid


def topk_select(z: torch.Tensor, scores: torch.Tensor, valid: torch.Tensor, k, temperature: float = 1.0,
                clamp: bool = False) -> torch.Tensor:
    """Straight-through top-k mean.

    The value is the plain mean of the k selected rows; gradients are those of
    the softmax(scores / temperature)-weighted mean over valid rows.
    """
    z, valid, _, squeeze = _batched(z, valid)
    if squeeze:
        scores = scores[None]
    sel = topk_mask(scores.detach(), valid, k, clamp)
    hard = (z * sel[..., None].to(z.dtype)).sum(1) / sel.sum(1, keepdim=True).to(z.dtype)
    alpha = torch.softmax((scores / temperature).masked_fill(~valid, float("-inf")), dim=1)
    soft = (alpha[..., None] * z).sum(1)
    out = hard.detach() + (soft - soft.detach())
    return out[0] if squeeze else out


class TopKAggregator(nn.Module):
    """Affine scorer s_i = w^T z_i + b, then straight-through top-k mean.

    Nights with fewer than k valid epochs use all of them.
    """

    def __init__(self, dim: int, k: int = 10, temperature: float = 1.0):
        super().__init__()
        self.scorer = nn.Linear(dim, 1)
        # a random scorer can start pointed away from the relevant direction and
        # the surrogate gradient is weak there; start neutral instead
        nn.init.zeros_(self.scorer.weight)
        nn.init.zeros_(self.scorer.bias)
        self.k = k
        self.temperature = temperature

    def forward(self, z, valid):
        return topk_select(z, self.scorer(z)[..., 0], valid, self.k, self.temperature, clamp=True)


def agg_topk(seq, module: TopKAggregator, k: int | None = None, st_temperature: float | None = None, valid=None):
    z, valid = _unpack(seq) if valid is None else (seq, valid)
    k = module.k if k is None else k
    t = module.temperature if st_temperature is None else st_temperature
    return topk_select(torch.as_tensor(z), module.scorer(torch.as_tensor(z))[..., 0], valid, k, t)


def build_aggregator(kind: str, dim: int, **params) -> nn.Module:
    if kind == "mean":
        return MeanPool()
    if kind == "recurrent":
        return RecurrentAggregator(dim, **params)
    if kind == "mil":
        return GatedAttentionMIL(dim, **params)
    if kind == "topk":
        return TopKAggregator(dim, **params)
    raise ValueError(f"unknown aggregator {kind!r}; choose from {AGGREGATORS}")


# --- disease heads ---------------------------------------------------------


class DiseaseModel(nn.Module):
    def __init__(self, aggregator: nn.Module, dim: int):
        super().__init__()
        self.register_buffer("mean", torch.zeros(dim))
        self.register_buffer("scale", torch.ones(dim))
        self.aggregator = aggregator
        self.head = nn.Linear(dim, 1)
        # logistic head starts at zero: the aggregator only receives gradient once
        # the head has picked a sign, which keeps top-k scorers out of the
        # "select the irrelevant rows" basin
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def fit_standardizer(self, z: torch.Tensor, valid: torch.Tensor) -> None:
        rows = z[valid]
        self.mean.copy_(rows.mean(0))
        std = rows.std(0, unbiased=False)
        self.scale.copy_(torch.where(std > 1e-8, std, torch.ones_like(std)))

    def forward(self, z, valid):
        zs = ((z - self.mean) / self.scale) * valid[..., None].to(z.dtype)
        return self.head(self.aggregator(zs, valid))[..., 0]


@dataclass
class DiseaseHeadConfig:
    base_lr: float | None = None  # None -> per-aggregator default
    batch_size: int | None = None
    max_epochs: int = MAX_EPOCHS
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    seed: int = 0
    aggregator_params: dict | None = None

    def resolved(self, kind: str) -> "DiseaseHeadConfig":
        lr, batch = HEAD_DEFAULTS[kind]
        return replace(self, base_lr=self.base_lr or lr, batch_size=self.batch_size or batch,
                       aggregator_params=dict(self.aggregator_params or {}))


def _disease_index(disease) -> int:
    if isinstance(disease, int):
        return disease
    if disease not in DISEASES:
        raise ValueError(f"unknown disease {disease!r}; choose from {DISEASES}")
    return DISEASES.index(disease)


def fit_disease_model(kind: str, sequences: list[EmbeddingSequence], disease, config: DiseaseHeadConfig | None = None):
    """Jointly train aggregator parameters and the logistic head."""
    cfg = (config or DiseaseHeadConfig()).resolved(kind)
    j = _disease_index(disease)
    z, valid, labels = stack(sequences)
    y = labels[:, j].float()
    if y.min() == y.max():
        raise UndefinedMetricError(f"training labels for {DISEASES[j]} contain a single class")
    torch.manual_seed(cfg.seed)
    model = DiseaseModel(build_aggregator(kind, z.shape[-1], **cfg.aggregator_params), z.shape[-1])
    model.fit_standardizer(z, valid)
    opt = torch.optim.AdamW(model.parameters(), lr=0.0, weight_decay=cfg.weight_decay)
    n = len(sequences)
    batch = min(cfg.batch_size, n)
    per_epoch = -(-n // batch)
    total = per_epoch * cfg.max_epochs
    rng = np.random.default_rng(cfg.seed)
    losses = []
    model.train()
    step = 0
    for _ in range(cfg.max_epochs):
        order = rng.permutation(n)
        for a in range(0, n, batch):
            step += 1
            idx = torch.from_numpy(np.sort(order[a: a + batch]))
            for g in opt.param_groups:
                g["lr"] = lr_at(step, total, cfg.base_lr, cfg.warmup_fraction)
            loss = F.binary_cross_entropy_with_logits(model(z[idx], valid[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
    model.eval()
    return model, losses, cfg


@torch.no_grad()
def predict_disease(model: DiseaseModel, sequences: list[EmbeddingSequence]) -> np.ndarray:
    z, valid, _ = stack(sequences)
    return torch.sigmoid(model(z, valid)).double().numpy()


def train_disease_head(kind: str, train: list[EmbeddingSequence], test: list[EmbeddingSequence], disease,
                       config: DiseaseHeadConfig | None = None) -> EvalReport:
    """Fit on ``train`` patients, report AUROC/AUPRC on ``test`` patients."""
    if not train or not test:
        raise ValueError("disease head needs non-empty train and test patient sets")
    overlap = {s.patient_id for s in train} & {s.patient_id for s in test}
    if overlap:
        raise ProtocolIsolationError(f"test patients present in training data: {sorted(overlap)[:10]}")
    j = _disease_index(disease)
    model, losses, cfg = fit_disease_model(kind, train, j, config)
    y = np.array([s.disease_labels[j] for s in test])
    p = predict_disease(model, test)
    metrics = {"auroc": auroc(p, y), "auprc": auprc(p, y), "final_train_loss": losses[-1]}
    cfg_dict = asdict(cfg)
    h = hashlib.sha256(json.dumps(cfg_dict, sort_keys=True).encode()).hexdigest()[:16]
    return EvalReport(f"disease:{DISEASES[j]}", f"aggregate-{kind}", "full", metrics, cfg.seed, h,
                      {"train": len(train), "test": len(test)}, {"aggregator": kind})


# --- constructed corpus ----------------------------------------------------


def synthetic_disease_sequences(n_patients: int, dim: int = 8, seed: int = 0, threshold: float = 0.15,
                                length_range=(300, 900)) -> list[EmbeddingSequence]:
    """Sequences whose first coordinate is a noisy event indicator.

    Each patient has an event fraction drawn from Beta(1.5, 8); every disease
    label is ``fraction > threshold``.  Useful as a separable sanity corpus.
    """
    rng = np.random.default_rng(seed)
    out = []
    for pid in range(n_patients):
        n = int(rng.integers(length_range[0], length_range[1] + 1))
        frac = rng.beta(1.5, 8.0)
        events = rng.random(n) < frac
        z = rng.normal(0.0, 1.0, (n, dim)).astype(np.float32)
        z[:, 0] = np.where(events, 3.0, 0.0) + 0.3 * rng.normal(size=n)
        grid, valid = pad_sequence(z)
        out.append(EmbeddingSequence(pid, grid, valid, np.full(len(DISEASES), events.mean() > threshold)))
    return out


# --- cache -----------------------------------------------------------------


def write_sequences(sequences: list[EmbeddingSequence], directory: str | Path) -> Path:
    """Per patient: ``{pid}.f32`` (SEQ_LEN x D little-endian) and ``{pid}.valid`` (packed bits); plus index.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for s in sequences:
        s.embeddings.astype("<f4").tofile(directory / f"{s.patient_id}.f32")
        np.packbits(s.valid).tofile(directory / f"{s.patient_id}.valid")
        index.append({"patient_id": s.patient_id, "rows": len(s.valid), "dim": s.dim,
                      "disease_labels": s.disease_labels.tolist()})
    (directory / "index.json").write_text(json.dumps({"format_version": 1, "sequences": index}, indent=1))
    return directory


def read_sequences(directory: str | Path) -> list[EmbeddingSequence]:
    directory = Path(directory)
    doc = json.loads((directory / "index.json").read_text())
    out = []
    for item in doc["sequences"]:
        pid, rows, dim = item["patient_id"], item["rows"], item["dim"]
        emb = np.fromfile(directory / f"{pid}.f32", dtype="<f4")
        if emb.size != rows * dim:
            raise ValueError(f"{directory}/{pid}.f32 holds {emb.size} values, expected {rows * dim}")
        valid = np.unpackbits(np.fromfile(directory / f"{pid}.valid", dtype=np.uint8))[:rows].astype(bool)
        out.append(EmbeddingSequence(pid, emb.reshape(rows, dim), valid, np.asarray(item["disease_labels"])))
    return out
