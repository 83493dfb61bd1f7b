"""Transformer forward semantics: teacher-forced shapes and masking,
causality, the dense-encoder document embedding (checked against an
independent straight-line reimplementation), and the loss examples."""

import numpy as np
import pytest

from cldsi.losses import ce_loss, kl_loss, total_loss
from cldsi.model import BOS_ID, Seq2SeqModel, TransformerConfig
from cldsi.rq import VocabLayout


def tiny_config(**kw):
    base = dict(dim=16, hidden=24, heads=2, encoder_blocks=1, decoder_blocks=2,
                n_mix=2, base_vocab=30, M=2, K=4, max_len=16, lora_rank=2,
                n_experts=2, top_k=2, router_kind="cosine", seed=0)
    base.update(kw)
    return TransformerConfig(**base)


def test_forward_shapes_and_mask_soundness():
    m = Seq2SeqModel(tiny_config())
    queries = [[2, 3, 4], [5, 6, 7, 8]]
    codes = np.array([[1, 2], [3, 4]])
    logits, pre = m.forward_teacher_forced(queries, codes)
    vext = 30 + 2 * 4
    assert logits.shape == (2, 2, vext)
    assert set(pre) == {0, 1}
    assert pre[0].shape == (2, 2, 16)
    p = np.exp(logits - logits.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    for i in range(2):
        seg = slice(30 + i * 4, 30 + (i + 1) * 4)
        outside = p[:, i, :].sum(axis=-1) - p[:, i, seg].sum(axis=-1)
        assert np.all(outside < 1e-12)
        np.testing.assert_allclose(p[:, i, seg].sum(axis=-1), 1.0, atol=1e-9)


def test_unregistered_docid_rejected():
    m = Seq2SeqModel(tiny_config())
    registry = {(1, 1), (2, 2)}
    m.forward_teacher_forced([[2, 3]], np.array([[1, 1]]), registry=registry)
    with pytest.raises(ValueError):
        m.forward_teacher_forced([[2, 3]], np.array([[1, 2]]), registry=registry)


def test_empty_query_rejected():
    m = Seq2SeqModel(tiny_config())
    with pytest.raises(ValueError):
        m.forward_teacher_forced([[]], np.array([[1, 1]]))


def test_causality_position_one_bitwise():
    m = Seq2SeqModel(tiny_config(seed=3))
    q = [[2, 3, 4, 5]]
    a, _ = m.forward_teacher_forced(q, np.array([[1, 1]]))
    b, _ = m.forward_teacher_forced(q, np.array([[4, 3]]))
    np.testing.assert_array_equal(a[:, 0, :], b[:, 0, :])
    assert np.any(a[:, 1, :] != b[:, 1, :])


def test_teacher_forced_deterministic():
    m = Seq2SeqModel(tiny_config(seed=5))
    q = [[2, 9, 4]]
    codes = np.array([[2, 3]])
    a, _ = m.forward_teacher_forced(q, codes)
    b, _ = m.forward_teacher_forced(q, codes)
    np.testing.assert_array_equal(a, b)


# -- document embeddings -------------------------------------------------------


def test_embed_document_determinism_bitwise():
    m = Seq2SeqModel(tiny_config(seed=1))
    doc = [4, 5, 6, 7, 8]
    np.testing.assert_array_equal(m.embed_document(doc), m.embed_document(doc))
    both = m.embed_documents([doc, doc])
    np.testing.assert_array_equal(both[0], both[1])


def test_embed_document_zero_output_norm_gain():
    m = Seq2SeqModel(tiny_config(seed=2))
    m.dec_ln_f[...] = 0.0
    np.testing.assert_array_equal(m.embed_document([3, 4, 5]), np.zeros(16))


def test_embed_document_validation():
    m = Seq2SeqModel(tiny_config())
    with pytest.raises(ValueError):
        m.embed_document([])
    with pytest.raises(ValueError):
        m.embed_document([2, 31])  # outside the base vocabulary
    m.enc_blocks[0].wq[...] = np.nan
    with pytest.raises(FloatingPointError):
        m.embed_document([2, 3])


def straight_line_embed(model, doc):
    """Independent oracle: the same architecture, written as plain loops."""
    cfg = model.config
    d, h_dim, H = cfg.dim, cfg.hidden, cfg.heads
    dh = d // H

    def rms(v, g):
        return g * v / np.sqrt(np.mean(v * v) + 1e-6)

    def pos_enc(t):
        pe = np.zeros(d)
        for j in range(0, d, 2):
            angle = t / (10000.0 ** (j / d))
            pe[j] = np.sin(angle)
            if j + 1 < d:
                pe[j + 1] = np.cos(angle)
        return pe

    def mha(xq, xkv, wq, wk, wv, wo):
        Tq, Tk = len(xq), len(xkv)
        out = np.zeros((Tq, d))
        for t in range(Tq):
            heads = []
            for head in range(H):
                sl = slice(head * dh, (head + 1) * dh)
                qv = (xq[t] @ wq)[sl]
                scores = np.array([qv @ (xkv[s] @ wk)[sl] for s in range(Tk)]) / np.sqrt(dh)
                attn = np.exp(scores - scores.max())
                attn = attn / attn.sum()
                heads.append(sum(attn[s] * (xkv[s] @ wv)[sl] for s in range(Tk)))
            out[t] = np.concatenate(heads) @ wo
        return out

    # order-free encoder over the document tokens (FFN with its ReLU)
    x = np.stack([model.embed_base[t] for t in doc])
    for blk in model.enc_blocks:
        u = np.stack([rms(r, blk.ln1) for r in x])
        x = x + mha(u, u, blk.wq, blk.wk, blk.wv, blk.wo)
        u = np.stack([rms(r, blk.ln2) for r in x])
        x = x + np.maximum(u @ blk.w_in, 0.0) @ blk.w_out
    enc = np.stack([rms(r, model.enc_ln_f) for r in x])

    # decoder on a single begin-of-sequence token
    y = (model.embed_base[BOS_ID] + pos_enc(0))[None, :]
    for blk in model.dec_blocks:
        u = np.stack([rms(r, blk.ln1) for r in y])
        y = y + mha(u, u, blk.wq1, blk.wk1, blk.wv1, blk.wo1)
        u = np.stack([rms(r, blk.ln2) for r in y])
        y = y + mha(u, enc, blk.wq2, blk.wk2, blk.wv2, blk.wo2)
        moe = blk.moe
        u = np.stack([rms(r, moe.ln_g) for r in y])
        x1 = np.maximum(u @ moe.w_in, 0.0)  # zero-init experts contribute nothing
        y = y + x1 @ moe.w_out
    return rms(y[0], model.dec_ln_f)


def test_embed_document_matches_straight_line_oracle():
    m = Seq2SeqModel(tiny_config(seed=7))
    doc = [2, 9, 17, 4, 22]
    got = m.embed_document(doc)
    want = straight_line_embed(m, doc)
    np.testing.assert_allclose(got, want, atol=1e-9)


# -- loss examples ----------------------------------------------------------------


def _uniform_masked_logits(layout):
    from cldsi.rq import MOST_NEGATIVE

    out = np.full((layout.M, layout.extended_size), MOST_NEGATIVE)
    for i in range(1, layout.M + 1):
        s = layout.base_size + (i - 1) * layout.K
        out[i - 1, s : s + layout.K] = 0.0
    return out


def test_ce_uniform_is_log_k():
    layout = VocabLayout(base_size=10, M=3, K=16)
    logits = _uniform_masked_logits(layout)
    assert ce_loss(logits, [1, 7, 16], layout) == pytest.approx(np.log(16.0), abs=1e-12)


def test_ce_saturates_to_zero():
    layout = VocabLayout(base_size=10, M=2, K=4)
    logits = _uniform_masked_logits(layout)
    for i, c in enumerate([2, 3]):
        logits[i, layout.code_to_token(i + 1, c)] = 200.0
    assert ce_loss(logits, [2, 3], layout) == pytest.approx(0.0, abs=1e-12)


def test_ce_two_position_hand_computed():
    layout = VocabLayout(base_size=2, M=2, K=2)
    logits = _uniform_masked_logits(layout)
    logits[0, 2:4] = [1.0, 0.0]
    logits[1, 4:6] = [0.3, 0.9]
    p1 = np.exp(1.0) / (np.exp(1.0) + 1.0)
    p2 = np.exp(0.9) / (np.exp(0.3) + np.exp(0.9))
    want = -(np.log(p1) + np.log(p2)) / 2
    assert ce_loss(logits, [1, 2], layout) == pytest.approx(want, abs=1e-12)


def test_ce_gold_outside_segment_errors():
    layout = VocabLayout(base_size=2, M=2, K=2)
    logits = _uniform_masked_logits(layout)
    with pytest.raises(ValueError):
        ce_loss(logits, [3, 1], layout)


def test_kl_identical_models_exactly_zero():
    m = Seq2SeqModel(tiny_config(seed=4))
    assert kl_loss([2, 3, 4], [1, 2], m, m) == 0.0


def test_kl_layout_mismatch():
    a = Seq2SeqModel(tiny_config())
    b = Seq2SeqModel(tiny_config(K=5))
    with pytest.raises(ValueError):
        kl_loss([2, 3], [1, 1], a, b)


def test_kl_nonnegative_and_directional():
    a = Seq2SeqModel(tiny_config(seed=8))
    b = Seq2SeqModel(tiny_config(seed=9))
    assert kl_loss([2, 3, 4], [2, 1], a, b) > 0.0


def test_kl_half_distribution_log2():
    from cldsi.losses import kl_from_segments

    prev = np.array([[[40.0, -40.0]]])  # P -> (1, 0)
    cur = np.array([[[0.0, 0.0]]])      # Q -> (1/2, 1/2)
    loss, _ = kl_from_segments(prev, cur)
    assert loss == pytest.approx(np.log(2.0), abs=1e-9)


def test_total_loss_degenerate_weights_and_breakdown():
    m = Seq2SeqModel(tiny_config(seed=6))
    prev = Seq2SeqModel(tiny_config(seed=7))
    batch = [([2, 3, 4], (1, 2)), ([5, 6], (3, 4))]
    total0, parts0 = total_loss(batch, m, prev, alpha1=0.0, alpha2=0.0)
    assert total0 == parts0["ce"]
    total, parts = total_loss(batch, m, prev, alpha1=1.0, alpha2=0.1)
    assert abs(total - (parts["ce"] + 1.0 * parts["aux"] + 0.1 * parts["kl"])) < 1e-9


def test_paper_default_weights():
    from cldsi.config import TrainConfig

    tc = TrainConfig()
    assert tc.alpha1 == 1.0 and tc.alpha2 == 0.1
