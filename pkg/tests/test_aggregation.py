import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sleepssl.aggregation import (
    SEQ_LEN, DiseaseHeadConfig, EmbeddingSequence, EmptySequenceError, GatedAttentionMIL, RecurrentAggregator,
    TopKAggregator, agg_mean, agg_mil, agg_recurrent, agg_topk, build_aggregator, embed_night, embed_nights,
    fit_disease_model, pad_sequence, predict_disease, read_sequences, synthetic_disease_sequences, topk_mask,
    train_disease_head, write_sequences,
)
from sleepssl.encoder import EncoderConfig, EpochEncoder
from sleepssl.evaluation import ProtocolIsolationError, extract_embeddings
from sleepssl.metrics import UndefinedMetricError


def seq(n_valid=5, d=4, seed=0, length=12, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    z = torch.zeros(length, d, dtype=dtype)
    z[:n_valid] = torch.randn(n_valid, d, generator=g, dtype=dtype)
    valid = torch.zeros(length, dtype=torch.bool)
    valid[:n_valid] = True
    return z, valid


def modules(d=4, seed=0):
    torch.manual_seed(seed)
    return {
        "recurrent": RecurrentAggregator(d, hidden=6).double(),
        "mil": GatedAttentionMIL(d, hidden=6).double(),
        "topk": TopKAggregator(d, k=2).double(),
    }


# --- sequences ---


def test_pad_960():
    grid, valid = pad_sequence(np.ones((960, 3)))
    assert grid.shape == (SEQ_LEN, 3) and valid.sum() == 960
    assert (grid[960:] == 0).all()


def test_truncate_1300(caplog):
    x = np.arange(1300 * 2, dtype=np.float32).reshape(1300, 2)
    with caplog.at_level(logging.WARNING):
        grid, valid = pad_sequence(x)
    assert valid.all() and np.array_equal(grid, x[:1200])
    assert "truncated" in caplog.text


def test_sequence_rejects_nonzero_padding():
    grid, valid = pad_sequence(np.ones((3, 2)), 5)
    grid[4] = 1.0
    with pytest.raises(ValueError, match="padding"):
        EmbeddingSequence(0, grid, valid, [False] * 3)


def test_embed_night_rows_match_encoder(epochs):
    torch.manual_seed(0)
    enc = EpochEncoder(EncoderConfig.from_preset("tiny")).eval()
    pid = int(epochs.patient_id[0])
    night = epochs.where_patients([pid])
    s = embed_night(enc, night, [True, False, True])
    assert s.n_valid == len(night) and s.disease_labels.tolist() == [True, False, True]
    with torch.no_grad():
        for i in (0, len(night) // 2, len(night) - 1):
            row = enc(torch.from_numpy(np.asarray(night.values[i:i + 1]))).numpy()[0]
            assert np.abs(s.embeddings[i] - row).max() <= 1e-6
    with pytest.raises(EmptySequenceError):
        embed_night(enc, night[:0])
    with pytest.raises(ValueError, match="ordered"):
        embed_night(enc, night[np.arange(len(night))[::-1]])
    seqs = embed_nights(enc, epochs[:80], {p: [False] * 3 for p in epochs.patients().tolist()})
    assert [s.patient_id for s in seqs] == sorted(set(epochs.patient_id[:80].tolist()))


def test_cache_round_trip(tmp_path):
    seqs = synthetic_disease_sequences(4, dim=3, seed=1, length_range=(50, 80))
    back = read_sequences(write_sequences(seqs, tmp_path))
    for a, b in zip(seqs, back):
        assert a.patient_id == b.patient_id
        np.testing.assert_array_equal(a.embeddings, b.embeddings)
        np.testing.assert_array_equal(a.valid, b.valid)
        np.testing.assert_array_equal(a.disease_labels, b.disease_labels)


# --- mean ---


def test_mean_single_row_and_oracle():
    z, v = seq(1)
    assert torch.equal(agg_mean(z, v), z[0])
    z, v = seq(7, seed=2)
    manual = z.numpy()[:7].sum(0) / 7
    assert np.abs(agg_mean(z, v).numpy() - manual).max() <= 1e-7


def test_mean_rejects_empty():
    z, v = seq(0)
    with pytest.raises(EmptySequenceError):
        agg_mean(z, v)


# --- recurrent ---


def test_recurrent_empty_rejected():
    z, v = seq(0)
    with pytest.raises(EmptySequenceError):
        agg_recurrent(z, modules()["recurrent"], v)


def test_recurrent_saturated_gates_last_row():
    d, h = 4, 4
    m = RecurrentAggregator(d, hidden=h).double()
    with torch.no_grad():
        for p in m.lstm.parameters():
            p.zero_()
        # gate order in torch is (input, forget, cell, output)
        m.lstm.bias_ih_l0[:h] = 50.0       # input gate open
        m.lstm.bias_ih_l0[h:2 * h] = -50.0  # forget gate shut: nothing carried over
        m.lstm.weight_ih_l0[2 * h:3 * h] = torch.eye(h, d, dtype=torch.float64)
        m.lstm.bias_ih_l0[3 * h:] = 50.0   # output gate open
    z, v = seq(6, d=d, seed=3)
    out = agg_recurrent(z, m, v)
    with torch.no_grad():
        expected = m.out(torch.tanh(torch.tanh(z[5])))
    torch.testing.assert_close(out, expected, atol=1e-10, rtol=0)
    z2 = z.clone()
    z2[:5] = torch.randn(5, d, dtype=torch.float64)
    torch.testing.assert_close(agg_recurrent(z2, m, v), out, atol=1e-10, rtol=0)


def test_recurrent_order_sensitive():
    m = modules(seed=1)["recurrent"]
    z, v = seq(8, seed=4)
    rev = z.clone()
    rev[:8] = z[:8].flip(0)
    assert (agg_recurrent(z, m, v) - agg_recurrent(rev, m, v)).abs().max() > 1e-6


def test_recurrent_packs_valid_rows():
    m = modules()["recurrent"]
    z, v = seq(5, seed=5)
    scattered_z = torch.zeros_like(z)
    scattered_v = torch.zeros_like(v)
    pos = torch.tensor([1, 3, 4, 8, 11])
    scattered_z[pos] = z[:5]
    scattered_v[pos] = True
    torch.testing.assert_close(agg_recurrent(scattered_z, m, scattered_v), agg_recurrent(z, m, v))


# --- MIL ---


def test_mil_single_row():
    z, v = seq(1)
    m = modules()["mil"]
    assert m.weights(z, v)[0].item() == pytest.approx(1.0)
    torch.testing.assert_close(agg_mil(z, m, v), z[0])


def test_mil_weights_sum_to_one():
    z, v = seq(9, seed=1)
    a = modules()["mil"].weights(z, v)
    assert abs(a.sum().item() - 1) <= 1e-6 and (a[~v] == 0).all()


def test_mil_duplication_splits_weight():
    m = modules()["mil"]
    z, v = seq(4, seed=6)
    dup = z.clone()
    dup[4] = z[2]
    v2 = v.clone()
    v2[4] = True
    a, b = m.weights(z, v), m.weights(dup, v2)
    # the duplicated row's logit is unchanged, so its old weight is spread over both copies
    # and every ratio between rows is preserved
    assert (b[2] / b[0]).item() == pytest.approx((a[2] / a[0]).item())
    assert (b[2] + b[4]).item() > a[2].item()
    assert b[2].item() == pytest.approx(b[4].item())


# --- top-k ---


def test_topk_full_k_bit_matches_mean():
    for seed in range(5):
        z, v = seq(7, seed=seed, dtype=torch.float32)
        m = TopKAggregator(4, k=7)
        torch.nn.init.normal_(m.scorer.weight)
        assert torch.equal(agg_topk(z, m, valid=v), agg_mean(z, v))


def test_topk_one_is_argmax():
    z, v = seq(6, seed=1)
    m = modules()["topk"]
    torch.nn.init.normal_(m.scorer.weight)
    scores = m.scorer(z)[:, 0].detach()
    best = int(torch.argmax(scores.masked_fill(~v, -np.inf)))
    torch.testing.assert_close(agg_topk(z, m, k=1, valid=v), z[best])


def test_topk_ties_lower_index():
    scores = torch.tensor([1.0, 3.0, 3.0, 3.0, 0.0])
    mask = topk_mask(scores, torch.ones(5, dtype=torch.bool), 2)
    assert mask.tolist() == [False, True, True, False, False]


def test_topk_k_too_large():
    z, v = seq(3)
    with pytest.raises(ValueError, match="exceeds"):
        agg_topk(z, modules()["topk"], k=4, valid=v)


def test_topk_surrogate_gradient():
    z, v = seq(6, seed=7)
    m = modules()["topk"]
    with torch.no_grad():
        m.scorer.weight.normal_()
    probe = torch.randn(4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    zz = z.clone().requires_grad_(True)
    (g,) = torch.autograd.grad((agg_topk(zz, m, k=2, st_temperature=0.7, valid=v) * probe).sum(), zz)

    def surrogate(x):
        s = m.scorer(x)[:, 0] / 0.7
        a = torch.softmax(s.masked_fill(~v, -np.inf), 0)
        return ((a[:, None] * x).sum(0) * probe).sum()

    eps = 1e-6
    fd = torch.zeros_like(z)
    with torch.no_grad():
        for i in range(z.shape[0]):
            for j in range(z.shape[1]):
                up, dn = z.clone(), z.clone()
                up[i, j] += eps
                dn[i, j] -= eps
                fd[i, j] = (surrogate(up) - surrogate(dn)) / (2 * eps)
    assert (g - fd).abs().max() <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(0, 10_000))
def test_valid_row_permutation_invariance(n, seed):
    z, v = seq(n, seed=seed)
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    zp = z.clone()
    zp[:n] = z[:n][perm]
    mods = modules(seed=seed % 7)
    torch.nn.init.normal_(mods["topk"].scorer.weight)
    torch.testing.assert_close(agg_mean(zp, v), agg_mean(z, v))
    k = min(2, n)
    # continuous random scores are distinct, so the selected set does not depend on row order
    torch.testing.assert_close(agg_topk(zp, mods["topk"], k=k, valid=v), agg_topk(z, mods["topk"], k=k, valid=v))
    wa, wb = mods["mil"].weights(z, v), mods["mil"].weights(zp, v)
    torch.testing.assert_close(wb[:n], wa[:n][perm])
    torch.testing.assert_close(agg_mil(zp, mods["mil"], v), agg_mil(z, mods["mil"], v))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(0, 10_000), st.sampled_from(["mean", "recurrent", "mil", "topk"]))
def test_padding_rows_inert(n, seed, kind):
    z, v = seq(n, seed=seed)
    junk = z.clone()
    junk[n:] = torch.randn(z.shape[0] - n, z.shape[1], dtype=z.dtype) * 100
    m = modules(seed=seed % 5).get(kind)
    if kind == "mean":
        a, b = agg_mean(z, v), agg_mean(junk, v)
    else:
        if kind == "topk":
            torch.nn.init.normal_(m.scorer.weight)
        a, b = m(z, v), m(junk, v)
    torch.testing.assert_close(a, b, atol=1e-12, rtol=0)


def test_batched_matches_single():
    mods = modules(seed=2)
    zs, vs = zip(*[seq(n, seed=n) for n in (3, 7, 12)])
    Z, V = torch.stack(zs), torch.stack(vs)
    for m in mods.values():
        out = m(Z, V)
        for i in range(3):
            torch.testing.assert_close(out[i], m(zs[i], vs[i]))


def test_build_aggregator_unknown():
    with pytest.raises(ValueError, match="unknown aggregator"):
        build_aggregator("max", 4)


# --- disease heads ---


@pytest.fixture(scope="module")
def disease_corpus():
    seqs = synthetic_disease_sequences(120, dim=6, seed=3, length_range=(200, 200))
    return seqs[:90], seqs[90:]


def test_disease_head_topk_separable(disease_corpus):
    tr, te = disease_corpus
    rep = train_disease_head("topk", tr, te, "hypertension",
                             DiseaseHeadConfig(max_epochs=30, aggregator_params={"k": 30}))
    assert rep.metrics["auroc"] >= 0.9
    assert rep.task == "disease:hypertension" and rep.protocol == "aggregate-topk"


@pytest.mark.parametrize("kind", ["mean", "recurrent", "mil"])
def test_disease_head_other_aggregators_run(disease_corpus, kind):
    tr, te = disease_corpus
    rep = train_disease_head(kind, tr[:40], te[:20], "diabetes",
                             DiseaseHeadConfig(max_epochs=3, aggregator_params={} if kind == "mean" else {"hidden": 8}))
    assert 0 <= rep.metrics["auroc"] <= 1 and rep.split_sizes == {"train": 40, "test": 20}


def test_disease_head_defaults():
    from sleepssl.aggregation import HEAD_DEFAULTS

    assert DiseaseHeadConfig().resolved("mean").base_lr == 1e-2
    assert DiseaseHeadConfig().resolved("mean").batch_size == 256
    assert DiseaseHeadConfig().resolved("topk").base_lr == 5e-3
    assert DiseaseHeadConfig().resolved("mil").batch_size == 128
    assert DiseaseHeadConfig().max_epochs == 50 and set(HEAD_DEFAULTS) == {"mean", "recurrent", "mil", "topk"}


def test_disease_shuffled_null(disease_corpus):
    tr, te = disease_corpus

    def shuffle(seqs, rng):
        perm = rng.permutation(len(seqs))
        return [EmbeddingSequence(a.patient_id, a.embeddings, a.valid, seqs[p].disease_labels)
                for a, p in zip(seqs, perm)]

    # labels permuted independently on both sides, so no feature carries information about them
    scores = []
    for s in range(20):
        rng = np.random.default_rng(s)
        rep = train_disease_head("mean", shuffle(tr, rng), shuffle(te, rng), "hypertension",
                                 DiseaseHeadConfig(max_epochs=20, seed=s))
        scores.append(rep.metrics["auroc"])
    assert abs(np.mean(scores) - 0.5) <= 0.07


def test_disease_isolation_and_degenerate(disease_corpus):
    tr, te = disease_corpus
    with pytest.raises(ProtocolIsolationError):
        train_disease_head("mean", tr, tr[:5], "hypertension")
    same = [EmbeddingSequence(s.patient_id, s.embeddings, s.valid, [False] * 3) for s in tr]
    with pytest.raises(UndefinedMetricError):
        fit_disease_model("mean", same, "hypertension")
    with pytest.raises(ValueError, match="unknown disease"):
        train_disease_head("mean", tr, te, "asthma")


def test_disease_training_deterministic(disease_corpus):
    tr, te = disease_corpus
    cfg = DiseaseHeadConfig(max_epochs=3, aggregator_params={"k": 5})
    a = predict_disease(fit_disease_model("topk", tr, 2, cfg)[0], te)
    b = predict_disease(fit_disease_model("topk", tr, 2, cfg)[0], te)
    np.testing.assert_array_equal(a, b)
