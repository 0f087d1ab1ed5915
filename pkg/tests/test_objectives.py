import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sleepssl.augmentation import AugmentationSpec
from sleepssl.encoder import EncoderConfig, EpochEncoder, load_checkpoint, save_checkpoint
from sleepssl.objectives import (
    DINO, OBJECTIVES, DINOHead, DINONetwork, ProjectionHead, TokenDecoder, ar_forward, ar_step, build_objective,
    dino_loss, dino_step, ema_update, group_views, mae_forward, masked_mse, modality_contrastive_loss,
    modality_contrastive_step, ntxent_loss, sample_token_mask, update_center, vq_quantize, windows,
)
from sleepssl.pretrain import PretrainConfig, TrainingDivergedError, lr_at, pretrain


def enc(seed=0):
    torch.manual_seed(seed)
    return EpochEncoder(EncoderConfig.from_preset("tiny"))


def signals(n=2, seed=0):
    return torch.randn(n, 12, 1920, generator=torch.Generator().manual_seed(seed)).clamp(-6, 6)


def ntxent_brute(za, zb, tau):
    z = np.concatenate([za, zb])
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    n, B = len(z), len(za)
    S = np.array([[z[i] @ z[j] / tau for j in range(n)] for i in range(n)])
    total = 0.0
    for i in range(n):
        pos = (i + B) % n
        denom = sum(math.exp(S[i, k]) for k in range(n) if k != i)
        total += -(S[i, pos] - math.log(denom))
    return total / n


# --- contrastive ---


def test_ntxent_identical_is_ln3():
    z = torch.ones(2, 8)
    for tau in (0.05, 0.1, 1.0, 7.0):
        assert ntxent_loss(z, z, tau).item() == pytest.approx(math.log(3), abs=1e-6)


def test_ntxent_orthogonal_cold_limit():
    e = torch.eye(4)
    assert ntxent_loss(e[:2], e[:2], 1e-3).item() < 1e-6


def test_ntxent_brute_force_b4():
    g = torch.Generator().manual_seed(0)
    za, zb = torch.randn(4, 16, generator=g, dtype=torch.float64), torch.randn(4, 16, generator=g, dtype=torch.float64)
    assert ntxent_loss(za, zb, 0.1).item() == pytest.approx(ntxent_brute(za.numpy(), zb.numpy(), 0.1), abs=1e-6)


def test_ntxent_needs_two():
    with pytest.raises(ValueError):
        ntxent_loss(torch.ones(1, 4), torch.ones(1, 4))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_ntxent_permutation_invariant(B, seed):
    g = torch.Generator().manual_seed(seed)
    za, zb = torch.randn(B, 8, generator=g, dtype=torch.float64), torch.randn(B, 8, generator=g, dtype=torch.float64)
    p = torch.randperm(B, generator=g)
    a, b = ntxent_loss(za, zb, 0.2), ntxent_loss(za[p], zb[p], 0.2)
    assert abs(a.item() - b.item()) <= 1e-6 and a.item() >= 0


def test_modality_six_pairs_and_ln3():
    z = [torch.ones(2, 8) for _ in range(4)]
    assert modality_contrastive_loss(z).item() == pytest.approx(math.log(3), abs=1e-6)
    calls = []
    import sleepssl.objectives as obj

    orig = obj.ntxent_loss
    obj.ntxent_loss = lambda a, b, t: calls.append(1) or orig(a, b, t)
    try:
        modality_contrastive_loss(z)
    finally:
        obj.ntxent_loss = orig
    assert len(calls) == math.comb(4, 2) == 6


def test_modality_brute_force_b3():
    e = enc().double()
    head = ProjectionHead(64, 16).double()
    x = signals(3).double()
    loss = modality_contrastive_step(e, head, x, 0.1).item()
    with torch.no_grad():
        groups = [[0, 1, 2, 3], [4, 5, 6, 7], [8], [9, 10, 11]]
        embs = []
        for g in groups:
            v = torch.zeros_like(x)
            v[:, g] = x[:, g]
            embs.append(head(e(v)).numpy())
    brute = np.mean([ntxent_brute(embs[i], embs[j], 0.1) for i in range(4) for j in range(i + 1, 4)])
    assert loss == pytest.approx(brute, abs=1e-6)


def test_group_views_zero_outside_group():
    x = signals(2)
    views = group_views(x)
    assert len(views) == 4
    assert (views[2][:, [i for i in range(12) if i != 8]] == 0).all()
    assert torch.equal(views[2][:, 8], x[:, 8])


# --- DINO ---


def dino_brute(s_out, t_out, center, ts, tt):
    terms = []
    for i, t in enumerate(t_out):
        p = np.exp((t - center) / tt)
        p /= p.sum(1, keepdims=True)
        for j, s in enumerate(s_out):
            if i == j:
                continue
            logq = s / ts - np.log(np.exp(s / ts).sum(1, keepdims=True))
            terms.append((-(p * logq).sum(1)).mean())
    return np.mean(terms)


def test_dino_loss_brute_force():
    g = torch.Generator().manual_seed(1)
    s = [torch.randn(3, 10, generator=g, dtype=torch.float64) for _ in range(2)]
    t = [torch.randn(3, 10, generator=g, dtype=torch.float64) for _ in range(2)]
    c = torch.randn(10, generator=g, dtype=torch.float64) * 0.1
    got = dino_loss(s, t, c, 0.1, 0.04).item()
    assert got == pytest.approx(dino_brute([a.numpy() for a in s], [a.numpy() for a in t], c.numpy(), 0.1, 0.04), abs=1e-9)
    perm = torch.randperm(3, generator=g)
    assert dino_loss([a[perm] for a in s], [a[perm] for a in t], c, 0.1, 0.04).item() == pytest.approx(got, abs=1e-6)


def small_dino():
    torch.manual_seed(0)
    student = DINONetwork(enc(), DINOHead(64, 32))
    return student, copy.deepcopy(student)


@pytest.mark.parametrize("m", [0.0, 1.0, 0.996])
def test_ema_update(m):
    student, teacher = small_dino()
    with torch.no_grad():
        for p in student.parameters():
            p.add_(torch.randn_like(p) * 0.1)
    old = [p.clone() for p in teacher.parameters()]
    ema_update(student, teacher, m)
    for o, s, t in zip(old, student.parameters(), teacher.parameters()):
        if m == 1.0:
            assert torch.equal(t, o)
        elif m == 0.0:
            assert torch.equal(t, s)
        else:
            assert (t - (0.996 * o + 0.004 * s)).abs().max() <= 1e-6


def test_dino_step_updates():
    student, teacher = small_dino()
    opt = torch.optim.AdamW(student.parameters(), lr=1e-3)
    center = torch.zeros(32)
    views = [signals(2, 1), signals(2, 2)]
    with torch.no_grad():
        t_out = [teacher(v) for v in views]
    before_t = [p.clone() for p in teacher.parameters()]
    loss, teacher, new_center = dino_step(student, teacher, center, views, optimizer=opt, momentum=0.996)
    assert loss.item() >= 0
    # teacher moved towards the updated student
    for o, s, t in zip(before_t, student.parameters(), teacher.parameters()):
        assert (t - (0.996 * o + 0.004 * s)).abs().max() <= 1e-6
    expected = 0.9 * center + 0.1 * torch.cat(t_out).mean(0)
    torch.testing.assert_close(new_center, expected)
    with pytest.raises(ValueError, match="momentum"):
        dino_step(student, teacher, center, views, momentum=1.5)
    with pytest.raises(ValueError, match="teacher_temp"):
        dino_step(student, teacher, center, views, temps=(0.04, 0.1))


def test_dino_teacher_gets_no_gradient():
    obj = DINO(enc(), AugmentationSpec.preset("osf"), n_prototypes=32)
    loss = obj.loss(signals(2).numpy(), np.random.default_rng(0))
    loss.backward()
    assert all(p.grad is None for p in obj.teacher.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in obj.student.parameters())
    # perturbing a teacher weight changes the loss value but never produces a gradient path
    student, teacher = small_dino()
    w = next(teacher.parameters())
    w.requires_grad_(True)
    l2, _, _ = dino_step(student, teacher, torch.zeros(32), [signals(2, 1), signals(2, 2)])
    grads = torch.autograd.grad(l2, [w], allow_unused=True)
    assert grads[0] is None


def test_update_center_formula():
    c = torch.ones(4)
    t = [torch.zeros(2, 4), torch.full((2, 4), 2.0)]
    torch.testing.assert_close(update_center(c, t, 0.9), torch.ones(4))


# --- MAE ---


def test_mask_sampling():
    mask, vis = sample_token_mask(3, 360, 0.5, torch.Generator().manual_seed(0))
    assert (mask.sum(1) == 180).all() and vis.shape == (3, 180)
    assert not mask.gather(1, vis).any()
    with pytest.raises(ValueError):
        sample_token_mask(1, 360, 0.001)
    with pytest.raises(ValueError):
        sample_token_mask(1, 360, 1.0)


def test_mae_loss_support_and_oracle():
    e = enc()
    dec = TokenDecoder(64, heads=4)
    x = signals(2)
    pred, target, mask = mae_forward(e, dec, x, 0.5, torch.Generator().manual_seed(0))
    assert pred.shape == target.shape == (2, 360, 64)
    base = masked_mse(pred, target, mask).item()
    bumped = pred.detach().clone()
    bumped[~mask] += 10.0
    assert masked_mse(bumped, target, mask).item() == pytest.approx(base, abs=1e-6)
    assert masked_mse(target, target, mask).item() == 0.0
    # hand sum over the masked index set
    p, t, m = pred.detach().numpy(), target.numpy(), mask.numpy()
    sq, n = 0.0, 0
    for b in range(2):
        for k in np.flatnonzero(m[b]):
            sq += ((p[b, k] - t[b, k]) ** 2).mean()
            n += 1
    assert base == pytest.approx(sq / n, rel=1e-5)


def test_windows_channel_major():
    x = torch.arange(12 * 1920, dtype=torch.float32).reshape(1, 12, 1920)
    w = windows(x)
    assert torch.equal(w[0, 31], x[0, 1, 64:128])


# --- VQ ---


def test_vq_exact_entry():
    cb = torch.randn(8, 4, generator=torch.Generator().manual_seed(0))
    idx, zq, cl, cm = vq_quantize(cb[3].reshape(1, 1, 4), cb)
    assert idx.item() == 3 and cl.item() == 0 and cm.item() == 0


def test_vq_tie_lowest_index():
    cb = torch.tensor([[5.0, 5.0], [1.0, 0.0], [9.0, 9.0], [7.0, 7.0], [-1.0, 0.0]])
    idx, *_ = vq_quantize(torch.zeros(1, 1, 2), cb)
    assert idx.item() == 1
    with pytest.raises(ValueError):
        vq_quantize(torch.zeros(1, 1, 2), torch.zeros(0, 2))


def test_vq_straight_through():
    cb = torch.randn(16, 4, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    z = torch.randn(2, 5, 4, generator=torch.Generator().manual_seed(2), dtype=torch.float64, requires_grad=True)
    idx, zq, _, _ = vq_quantize(z, cb)
    torch.testing.assert_close(zq.detach(), cb[idx])
    (g,) = torch.autograd.grad(zq.sum(), z)
    assert (g - 1).abs().max() <= 1e-6


# --- AR ---


def test_ar_zero_signal_zero_head():
    head = torch.nn.Linear(64, 64)
    torch.nn.init.zeros_(head.weight)
    torch.nn.init.zeros_(head.bias)
    assert ar_step(enc(), head, torch.zeros(1, 12, 1920)).item() == 0.0


def test_ar_per_position_oracle():
    e, head = enc(), torch.nn.Linear(64, 64)
    x = signals(1)
    loss = ar_step(e, head, x).item()
    with torch.no_grad():
        states = e.encode_tokens(x, causal=True)[0, 1:]
        w = x[0].reshape(360, 64)
        per_pos = [((head(states[t]) - w[t + 1]) ** 2).mean().item() for t in range(359)]
    assert loss == pytest.approx(float(np.mean(per_pos)), rel=1e-5)


def test_ar_future_shuffle():
    e, head = enc(), torch.nn.Linear(64, 64)
    x = signals(1)
    t = 200  # signal token index (0-based, channel-major)
    y = x.clone().reshape(1, 360, 64)
    perm = torch.randperm(360 - t - 1, generator=torch.Generator().manual_seed(0)) + t + 1
    y[0, t + 1:] = y[0, perm]
    y = y.reshape(1, 12, 1920)
    with torch.no_grad():
        pa, _ = ar_forward(e, head, x)
        pb, _ = ar_forward(e, head, y)
    assert (pa[0, :t + 1] - pb[0, :t + 1]).abs().max() <= 1e-5


# --- schedule and training loop ---


def test_lr_warmup_half_and_floor():
    assert lr_at(10, 200, 1e-3) == pytest.approx(0.5e-3, abs=0)
    assert lr_at(200, 200, 1e-3) <= 1e-6
    assert lr_at(20, 200, 1e-3) == 1e-3


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5000), st.data())
def test_lr_closed_form(total, data):
    step = data.draw(st.integers(1, total))
    w = math.ceil(0.1 * total)
    expected = step / w if step <= w else 0.5 * (1 + math.cos(math.pi * (step - w) / (total - w)))
    assert lr_at(step, total, 1.0) == pytest.approx(expected, abs=1e-12)


def test_config_validation():
    with pytest.raises(ValueError, match="batch_size"):
        PretrainConfig.for_objective("simclr", batch_size=1)
    with pytest.raises(ValueError, match="warmup"):
        PretrainConfig.for_objective("dino", warmup_fraction=0.0)
    with pytest.raises(ValueError, match="max_epochs"):
        PretrainConfig.for_objective("dino", max_epochs=31)
    cfg = PretrainConfig.for_objective("ar")
    assert cfg.weight_decay == 0.05 and cfg.betas == (0.9, 0.95)
    assert PretrainConfig.for_objective("dino").grad_clip == 3.0
    assert PretrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("objective", OBJECTIVES)
def test_pretrain_smoke(objective, epochs, tmp_path):
    params = {"n_prototypes": 64} if objective == "dino" else {}
    cfg = PretrainConfig.for_objective(objective, batch_size=2, total_steps=100, base_lr=1e-4, objective_params=params)
    res = pretrain(epochs[:40], EncoderConfig.from_preset("tiny"), cfg, out_dir=tmp_path)
    losses = [r["loss"] for r in res.log]
    assert len(losses) == 100 and all(math.isfinite(v) and v >= 0 for v in losses)
    back = load_checkpoint(tmp_path / "checkpoint")
    assert back.objective == objective and back.metadata["steps"] == 100
    for k, v in res.checkpoint.state.items():
        assert torch.equal(back.state[k], v)
    assert (tmp_path / "train_log.csv").read_text().startswith("step,lr,loss,wall_ms")


def test_pretrain_deterministic(epochs):
    cfg = PretrainConfig.for_objective("dino", batch_size=2, total_steps=5, objective_params={"n_prototypes": 16})
    a = pretrain(epochs[:20], EncoderConfig.from_preset("tiny"), cfg)
    b = pretrain(epochs[:20], EncoderConfig.from_preset("tiny"), cfg)
    assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]
    for k in a.checkpoint.state:
        assert torch.equal(a.checkpoint.state[k], b.checkpoint.state[k])


def test_pretrain_divergence_keeps_last_good(epochs, tmp_path, monkeypatch):
    import sleepssl.objectives as obj

    orig = obj.ntxent_loss
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        out = orig(*a, **k)
        return out * float("nan") if calls["n"] > 3 else out

    monkeypatch.setattr(obj, "ntxent_loss", flaky)
    cfg = PretrainConfig.for_objective("simclr", batch_size=2, total_steps=10)
    with pytest.raises(TrainingDivergedError, match="step 4") as info:
        pretrain(epochs[:20], EncoderConfig.from_preset("tiny"), cfg, out_dir=tmp_path)
    assert info.value.last_good is not None
    assert (tmp_path / "last_good" / "weights.bin").exists()


def test_pretrain_early_stop(epochs):
    cfg = PretrainConfig.for_objective("ar", batch_size=2, total_steps=400, base_lr=1e-12,
                                       early_stop_patience=20, early_stop_min_delta=1.0)
    res = pretrain(epochs[:20], EncoderConfig.from_preset("tiny"), cfg)
    assert res.stopped_early and len(res.log) < 400


def test_build_objective_rejects_unknown():
    with pytest.raises(ValueError, match="unknown objective"):
        build_objective("byol", enc(), None)
