"""Small encoder-decoder transformer hosting MixLoRA decoder FFNs.

The output head is tied to a single embedding table split in two regions:
`embed_base` (text vocabulary, frozen during continual indexing) and
`embed_rq` (one row per RQ centroid, the slow-learner region).  Docids are
decoded in exactly M steps; decoding position i is restricted to codebook
segment i of the extended vocabulary.

Forward passes cache every intermediate needed by the hand-written
backward passes; gradients accumulate into the flat `model.grads` dict.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nnops
from .nnops import _merge_heads as _merge, _split_heads as _split
from .mixlora import (
    LoRAExpertPair,
    MixLoRALayer,
    Router,
    mixlora_backward,
    mixlora_forward_cache,
)
from .ood import energy_from_logits
from .rq import VocabLayout, apply_mask, position_mask

PAD_ID = 0
BOS_ID = 1


@dataclass
class TransformerConfig:
    dim: int = 64
    hidden: int = 128
    heads: int = 2
    encoder_blocks: int = 2
    decoder_blocks: int = 4
    n_mix: int = 4
    base_vocab: int = 600
    M: int = 4
    K: int = 16
    max_len: int = 48
    dropout: float = 0.0
    lora_rank: int = 4
    lora_scale: float = 8.0
    n_experts: int = 2
    top_k: int = 2
    router_kind: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if self.n_mix > self.decoder_blocks:
            raise ValueError("n_mix cannot exceed decoder_blocks")

    @property
    def layout(self) -> VocabLayout:
        return VocabLayout(base_size=self.base_vocab, M=self.M, K=self.K)


def _init_w(rng, fan_in, shape):
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape)


class EncoderBlock:
    def __init__(self, cfg, rng):
        d, h = cfg.dim, cfg.hidden
        self.ln1 = np.ones(d)
        self.wq = _init_w(rng, d, (d, d))
        self.wk = _init_w(rng, d, (d, d))
        self.wv = _init_w(rng, d, (d, d))
        self.wo = _init_w(rng, d, (d, d))
        self.ln2 = np.ones(d)
        self.w_in = _init_w(rng, d, (d, h))
        self.w_out = _init_w(rng, h, (h, d))
        self.heads = cfg.heads

    def params(self):
        yield "ln1", self.ln1
        yield "wq", self.wq
        yield "wk", self.wk
        yield "wv", self.wv
        yield "wo", self.wo
        yield "ln2", self.ln2
        yield "w_in", self.w_in
        yield "w_out", self.w_out

    def forward(self, x, mask, dropout=0.0, rng=None):
        u1, c1 = nnops.rmsnorm_forward(x, self.ln1)
        a, ca = nnops.attention_forward(u1, u1, self.wq, self.wk, self.wv, self.wo, self.heads, mask)
        a, da_keep = nnops.dropout_forward(a, dropout, rng)
        x2 = x + a
        u2, c2 = nnops.rmsnorm_forward(x2, self.ln2)
        # the encoder FFN keeps its ReLU: a purely linear FFN amplifies
        # off-manifold content and inverts the energy-OOD geometry
        h = np.maximum(u2 @ self.w_in, 0.0)
        f = h @ self.w_out
        f, df_keep = nnops.dropout_forward(f, dropout, rng)
        y = x2 + f
        return y, (c1, ca, da_keep, x2, c2, u2, h, df_keep)

    def backward(self, dy, cache, grads, prefix):
        c1, ca, da_keep, x2, c2, u2, h, df_keep = cache
        df = nnops.dropout_backward(dy, df_keep)
        grads[prefix + "w_out"] += np.tensordot(h, df, axes=((0, 1), (0, 1)))
        dh = (df @ self.w_out.T) * (h > 0.0)
        grads[prefix + "w_in"] += np.tensordot(u2, dh, axes=((0, 1), (0, 1)))
        du2 = dh @ self.w_in.T
        dx2_ln, dg2 = nnops.rmsnorm_backward(du2, c2)
        grads[prefix + "ln2"] += dg2
        dx2 = dy + dx2_ln
        da = nnops.dropout_backward(dx2, da_keep)
        dxq, dxkv, dwq, dwk, dwv, dwo = nnops.attention_backward(da, ca)
        grads[prefix + "wq"] += dwq
        grads[prefix + "wk"] += dwk
        grads[prefix + "wv"] += dwv
        grads[prefix + "wo"] += dwo
        du1 = dxq + dxkv
        dx_ln, dg1 = nnops.rmsnorm_backward(du1, c1)
        grads[prefix + "ln1"] += dg1
        return dx2 + dx_ln


class DecoderBlock:
    """Self-attention, cross-attention, then a plain or MixLoRA FFN."""

    def __init__(self, cfg, rng, mix: bool):
        d, h = cfg.dim, cfg.hidden
        self.ln1 = np.ones(d)
        self.wq1 = _init_w(rng, d, (d, d))
        self.wk1 = _init_w(rng, d, (d, d))
        self.wv1 = _init_w(rng, d, (d, d))
        self.wo1 = _init_w(rng, d, (d, d))
        self.ln2 = np.ones(d)
        self.wq2 = _init_w(rng, d, (d, d))
        self.wk2 = _init_w(rng, d, (d, d))
        self.wv2 = _init_w(rng, d, (d, d))
        self.wo2 = _init_w(rng, d, (d, d))
        self.heads = cfg.heads
        w_in = _init_w(rng, d, (d, h))
        w_out = _init_w(rng, h, (h, d))
        ln3 = np.ones(d)
        self.moe = None
        if mix:
            self.moe = MixLoRALayer(
                w_in=w_in,
                w_out=w_out,
                ln_g=ln3,
                router=Router.new(cfg.router_kind, d, cfg.n_experts, cfg.top_k, rng),
                experts=[LoRAExpertPair.new(d, h, cfg.lora_rank, rng) for _ in range(cfg.n_experts)],
                lora_scale=cfg.lora_scale,
                ema_tau=np.full(cfg.M, np.nan),
            )
        else:
            self.ln3 = ln3
            self.w_in = w_in
            self.w_out = w_out

    def params(self):
        yield "ln1", self.ln1
        for n in ("wq1", "wk1", "wv1", "wo1"):
            yield n, getattr(self, n)
        yield "ln2", self.ln2
        for n in ("wq2", "wk2", "wv2", "wo2"):
            yield n, getattr(self, n)
        if self.moe is not None:
            yield "ln3", self.moe.ln_g
            yield "w_in", self.moe.w_in
            yield "w_out", self.moe.w_out
            yield "router", self.moe.router.weights
            for i, e in enumerate(self.moe.experts):
                yield f"e{i}.down_in", e.down_in
                yield f"e{i}.up_in", e.up_in
                yield f"e{i}.down_out", e.down_out
                yield f"e{i}.up_out", e.up_out
        else:
            yield "ln3", self.ln3
            yield "w_in", self.w_in
            yield "w_out", self.w_out

    def forward(self, x, enc_out, self_mask, cross_mask, dropout=0.0, rng=None):
        u1, c1 = nnops.rmsnorm_forward(x, self.ln1)
        a1, ca1 = nnops.attention_forward(u1, u1, self.wq1, self.wk1, self.wv1, self.wo1, self.heads, self_mask)
        a1, k1 = nnops.dropout_forward(a1, dropout, rng)
        x2 = x + a1
        u2, c2 = nnops.rmsnorm_forward(x2, self.ln2)
        a2, ca2 = nnops.attention_forward(u2, enc_out, self.wq2, self.wk2, self.wv2, self.wo2, self.heads, cross_mask)
        a2, k2 = nnops.dropout_forward(a2, dropout, rng)
        x3 = x2 + a2  # pre-FFN stream: feeds the router, the energy score and Eq.-style aux loss
        if self.moe is not None:
            b, t, d = x3.shape
            y_flat, cm = mixlora_forward_cache(x3.reshape(b * t, d), self.moe)
            y = y_flat.reshape(b, t, d)
            cache = (c1, ca1, k1, x2, c2, ca2, k2, x3, ("moe", cm))
        else:
            u3, c3 = nnops.rmsnorm_forward(x3, self.ln3)
            hid = np.maximum(u3 @ self.w_in, 0.0)
            f = hid @ self.w_out
            f, k3 = nnops.dropout_forward(f, dropout, rng)
            y = x3 + f
            cache = (c1, ca1, k1, x2, c2, ca2, k2, x3, ("ffn", (c3, u3, hid, k3)))
        return y, cache

    def backward(self, dy, cache, grads, prefix, dx_pre_ffn=None, dprobs_extra=None):
        c1, ca1, k1, x2, c2, ca2, k2, x3, (kind, fc) = cache
        if kind == "moe":
            b, t, d = x3.shape
            dx3 = mixlora_backward(
                dy.reshape(b * t, d), self.moe, fc, grads, prefix, dprobs_extra=dprobs_extra
            ).reshape(b, t, d)
        else:
            c3, u3, hid, k3 = fc
            df = nnops.dropout_backward(dy, k3)
            grads[prefix + "w_out"] += np.tensordot(hid, df, axes=((0, 1), (0, 1)))
            dh = (df @ self.w_out.T) * (hid > 0.0)
            grads[prefix + "w_in"] += np.tensordot(u3, dh, axes=((0, 1), (0, 1)))
            du3 = dh @ self.w_in.T
            dx3_ln, dg3 = nnops.rmsnorm_backward(du3, c3)
            grads[prefix + "ln3"] += dg3
            dx3 = dy + dx3_ln
        if dx_pre_ffn is not None:
            dx3 = dx3 + dx_pre_ffn
        da2 = nnops.dropout_backward(dx3, k2)
        du2, denc, dwq, dwk, dwv, dwo = nnops.attention_backward(da2, ca2)
        for n, g in zip(("wq2", "wk2", "wv2", "wo2"), (dwq, dwk, dwv, dwo)):
            grads[prefix + n] += g
        dx2_ln, dg2 = nnops.rmsnorm_backward(du2, c2)
        grads[prefix + "ln2"] += dg2
        dx2 = dx3 + dx2_ln
        da1 = nnops.dropout_backward(dx2, k1)
        dxq, dxkv, dwq, dwk, dwv, dwo = nnops.attention_backward(da1, ca1)
        for n, g in zip(("wq1", "wk1", "wv1", "wo1"), (dwq, dwk, dwv, dwo)):
            grads[prefix + n] += g
        du1 = dxq + dxkv
        dx_ln, dg1 = nnops.rmsnorm_backward(du1, c1)
        grads[prefix + "ln1"] += dg1
        return dx2 + dx_ln, denc


class Seq2SeqModel:
    """Model state: parameters, trainability flags, thresholds, timestep."""

    def __init__(self, config: TransformerConfig, init=True):
        self.config = config
        self.timestep = 0
        self.slow_learner_factor = 100.0
        self.grads = None
        self.trainable = {}
        if not init:
            return
        rng = np.random.default_rng(config.seed)
        d = config.dim
        # small init leaves headroom for trained rows to grow; rows of tokens
        # the corpus never used keep this scale, which is what the energy
        # score's in/out-of-distribution contrast feeds on
        self.embed_base = rng.normal(0.0, 0.3 / np.sqrt(d), (config.base_vocab, d))
        self.embed_rq = rng.normal(0.0, 0.3 / np.sqrt(d), (config.M * config.K, d))
        self.enc_blocks = [EncoderBlock(config, rng) for _ in range(config.encoder_blocks)]
        self.dec_blocks = [
            DecoderBlock(config, rng, mix=(i < config.n_mix)) for i in range(config.decoder_blocks)
        ]
        self.enc_ln_f = np.ones(d)
        self.dec_ln_f = np.ones(d)
        self.set_all_trainable(True)

    # -- parameter bookkeeping ------------------------------------------------

    def named_params(self):
        out = {"embed_base": self.embed_base, "embed_rq": self.embed_rq}
        for i, blk in enumerate(self.enc_blocks):
            for n, a in blk.params():
                out[f"enc.{i}.{n}"] = a
        out["enc.ln_f"] = self.enc_ln_f
        for i, blk in enumerate(self.dec_blocks):
            for n, a in blk.params():
                out[f"dec.{i}.{n}"] = a
        out["dec.ln_f"] = self.dec_ln_f
        return out

    def zero_grads(self):
        self.grads = {n: np.zeros_like(a) for n, a in self.named_params().items()}
        return self.grads

    def set_all_trainable(self, flag: bool):
        self.trainable = {n: flag for n in self.named_params()}
        for l in self.mix_layer_ids():
            moe = self.dec_blocks[l].moe
            moe.router.frozen_cols = [not flag] * moe.router.n_experts
            for e in moe.experts:
                e.frozen = not flag

    def trainable_col_mask(self, name):
        """Per-column trainability for router arrays, None elsewhere."""
        if name.endswith(".router"):
            l = int(name.split(".")[1])
            cols = self.dec_blocks[l].moe.router.frozen_cols
            return np.array([0.0 if f else 1.0 for f in cols])
        return None

    def mix_layer_ids(self):
        return [i for i, b in enumerate(self.dec_blocks) if b.moe is not None]

    def decoder_layer(self, i) -> MixLoRALayer:
        return self.dec_blocks[i].moe

    def clone(self):
        return copy.deepcopy(self)

    # -- forward --------------------------------------------------------------

    def pad_queries(self, queries):
        if any(len(q) == 0 for q in queries):
            raise ValueError("empty query")
        max_t = max(len(q) for q in queries)
        if max_t > self.config.max_len:
            raise ValueError(f"query length {max_t} exceeds max_len {self.config.max_len}")
        out = np.full((len(queries), max_t), PAD_ID, dtype=np.int64)
        for i, q in enumerate(queries):
            out[i, : len(q)] = q
        return out

    def decoder_inputs(self, codes):
        """[BOS, tok(1,c1), ..., tok(M-1, c_{M-1})] per row; codes are 1-based."""
        layout = self.config.layout
        b, m = codes.shape
        ids = np.empty((b, m), dtype=np.int64)
        ids[:, 0] = BOS_ID
        for i in range(1, m):
            ids[:, i] = [layout.code_to_token(i, int(c)) for c in codes[:, i - 1]]
        return ids

    def _embed(self, ids, positions=True):
        full = np.concatenate([self.embed_base, self.embed_rq], axis=0)
        x = full[ids]
        if positions:
            x = x + nnops.sinusoidal_positions(ids.shape[1], self.config.dim)[None, :, :]
        return x

    def forward_encoder(self, tokens, dropout=0.0, rng=None):
        # order-free encoder: queries and documents are bags of tokens here,
        # and the position mass otherwise drowns token content in the stream
        x = self._embed(tokens, positions=False)
        mask = nnops.padding_attn_mask(tokens, PAD_ID)
        caches = []
        for blk in self.enc_blocks:
            x, c = blk.forward(x, mask, dropout, rng)
            caches.append(c)
        y, c_f = nnops.rmsnorm_forward(x, self.enc_ln_f)
        return y, (tokens, caches, c_f, mask)

    def forward_decoder(self, dec_ids, enc_out, cross_mask, dropout=0.0, rng=None):
        x = self._embed(dec_ids)
        self_mask = nnops.causal_attn_mask(dec_ids.shape[1])
        caches, pre_ffn = [], {}
        for i, blk in enumerate(self.dec_blocks):
            x, c = blk.forward(x, enc_out, self_mask, cross_mask, dropout, rng)
            caches.append(c)
            if blk.moe is not None:
                pre_ffn[i] = c[7]  # the x3 stream feeding router/energy/aux
        y, c_f = nnops.rmsnorm_forward(x, self.dec_ln_f)
        return y, (dec_ids, caches, c_f, pre_ffn)

    def train_forward(self, queries, codes, dropout=0.0, rng=None):
        """Full teacher-forced pass; returns hidden states plus all caches."""
        q = self.pad_queries(queries)
        codes = np.asarray(codes)
        enc_out, enc_cache = self.forward_encoder(q, dropout, rng)
        cross_mask = nnops.padding_attn_mask(q, PAD_ID)
        dec_ids = self.decoder_inputs(codes)
        h, dec_cache = self.forward_decoder(dec_ids, enc_out, cross_mask, dropout, rng)
        seg = self.segment_logits(h)
        return {
            "h": h,
            "seg_logits": seg,
            "enc_out": enc_out,
            "enc_cache": enc_cache,
            "dec_cache": dec_cache,
            "queries": q,
            "codes": codes,
        }

    def segment_logits(self, h):
        """Within-segment logits (B, M, K): position i against codebook i rows."""
        rq = self.embed_rq.reshape(self.config.M, self.config.K, self.config.dim)
        return np.einsum("bid,ikd->bik", h, rq)

    def full_logits(self, h):
        full = np.concatenate([self.embed_base, self.embed_rq], axis=0)
        return h @ full.T

    def forward_teacher_forced(self, queries, codes, registry=None):
        """Per-position logits over the extended vocabulary with the position
        masks already applied, plus the per-layer pre-router hidden states.

        `registry` (set of code tuples), when given, rejects unregistered
        docids.
        """
        codes = np.asarray(codes)
        if registry is not None:
            for row in codes:
                if tuple(int(c) for c in row) not in registry:
                    raise ValueError(f"unregistered docid {tuple(row)}")
        out = self.train_forward(queries, codes)
        logits = self.full_logits(out["h"])
        layout = self.config.layout
        masked = np.empty_like(logits)
        for i in range(1, self.config.M + 1):
            masked[:, i - 1, :] = apply_mask(logits[:, i - 1, :], position_mask(i, layout))
        if not np.all(np.isfinite(out["h"])):
            raise FloatingPointError("non-finite decoder activations")
        pre = {l: out["dec_cache"][3][l] for l in self.mix_layer_ids()}
        return masked, pre

    # -- incremental decoding (beam search) ------------------------------------

    def start_decode(self, enc_out, cross_mask):
        """Per-block K/V caches for stepwise decoding over a batch of rows."""
        state = {"pos": 0, "self_kv": [None] * len(self.dec_blocks), "cross_kv": [], "mask": cross_mask}
        for blk in self.dec_blocks:
            k2 = _split(enc_out @ blk.wk2, blk.heads)
            v2 = _split(enc_out @ blk.wv2, blk.heads)
            state["cross_kv"].append((k2, v2))
        return state

    def gather_decode_state(self, state, idx):
        """Reorder cache rows to the new hypothesis parentage."""
        prev_owner = state.get("cross_owner")
        out = {
            "pos": state["pos"],
            "mask": state["mask"],
            "cross_kv": state["cross_kv"],
            "cross_owner": idx if prev_owner is None else prev_owner[idx],
            "self_kv": [None if kv is None else (kv[0][idx], kv[1][idx]) for kv in state["self_kv"]],
        }
        return out

    def decode_step(self, state, new_ids):
        """Process one new decoder token per row; returns final hidden (R, dim)."""
        pos = state["pos"]
        full = np.concatenate([self.embed_base, self.embed_rq], axis=0)
        pe = nnops.sinusoidal_positions(pos + 1, self.config.dim)[pos]
        x = full[new_ids][:, None, :] + pe[None, None, :]
        owner = state.get("cross_owner")
        for i, blk in enumerate(self.dec_blocks):
            x = self._block_step(blk, i, x, state, owner)
        state["pos"] = pos + 1
        y, _ = nnops.rmsnorm_forward(x, self.dec_ln_f)
        return y[:, 0, :]

    def _block_step(self, blk, i, x, state, owner):
        u1, _ = nnops.rmsnorm_forward(x, blk.ln1)
        q = _split(u1 @ blk.wq1, blk.heads)
        k_new = _split(u1 @ blk.wk1, blk.heads)
        v_new = _split(u1 @ blk.wv1, blk.heads)
        if state["self_kv"][i] is None:
            k1, v1 = k_new, v_new
        else:
            k1 = np.concatenate([state["self_kv"][i][0], k_new], axis=2)
            v1 = np.concatenate([state["self_kv"][i][1], v_new], axis=2)
        state["self_kv"][i] = (k1, v1)
        scale = 1.0 / np.sqrt(q.shape[-1])
        a = nnops.softmax(q @ k1.transpose(0, 1, 3, 2) * scale)
        x2 = x + _merge(a @ v1) @ blk.wo1

        u2, _ = nnops.rmsnorm_forward(x2, blk.ln2)
        k2, v2 = state["cross_kv"][i]
        if owner is not None:
            k2, v2 = k2[owner], v2[owner]
            mask = state["mask"][owner]
        else:
            mask = state["mask"]
        q2 = _split(u2 @ blk.wq2, blk.heads)
        s2 = q2 @ k2.transpose(0, 1, 3, 2) * scale + mask
        x3 = x2 + _merge(nnops.softmax(s2) @ v2) @ blk.wo2

        if blk.moe is not None:
            r, t, d = x3.shape
            y, _ = mixlora_forward_cache(x3.reshape(r * t, d), blk.moe)
            return y.reshape(r, t, d)
        u3, _ = nnops.rmsnorm_forward(x3, blk.ln3)
        return x3 + np.maximum(u3 @ blk.w_in, 0.0) @ blk.w_out

    # -- dense-encoder view (document embeddings) ------------------------------

    def embed_documents(self, docs):
        """Decoder hidden state at the BOS position, one row per document."""
        docs = list(docs)
        if any(len(d) == 0 for d in docs):
            raise ValueError("empty document")
        for d in docs:
            if any(not 0 <= t < self.config.base_vocab for t in d):
                raise ValueError("document not tokenizable under the base vocabulary")
        q = self.pad_queries(docs)
        enc_out, _ = self.forward_encoder(q)
        cross_mask = nnops.padding_attn_mask(q, PAD_ID)
        dec_ids = np.full((len(docs), 1), BOS_ID, dtype=np.int64)
        h, _ = self.forward_decoder(dec_ids, enc_out, cross_mask)
        e = h[:, 0, :]
        if not np.all(np.isfinite(e)):
            raise FloatingPointError("non-finite document embedding")
        return e

    def embed_document(self, doc):
        return self.embed_documents([doc])[0]

    # -- energies ---------------------------------------------------------------

    def layer_energies(self, queries, codes, temperature=1.0):
        """dict layer -> (B, M) router energies at the docid positions."""
        out = self.train_forward(queries, np.asarray(codes))
        return self.energies_from_caches(out["dec_cache"], temperature, len(queries))

    def energies_from_caches(self, dec_cache, temperature, batch):
        energies = {}
        for l in self.mix_layer_ids():
            cm = dec_cache[1][l][8][1]
            logits = cm["energy_logits"]  # (B*M, N), unit columns x raw tokens
            energies[l] = energy_from_logits(logits, temperature).reshape(batch, self.config.M)
        return energies

    # -- backward ---------------------------------------------------------------

    def backward_from_segments(self, out, dseg, aux_dx=None, aux_dprobs=None):
        """Backprop from d(seg_logits); aux_dx/aux_dprobs inject per-mix-layer
        gradients at the pre-FFN stream / router probabilities."""
        if self.grads is None:
            self.zero_grads()
        g = self.grads
        h = out["h"]
        rq3 = self.embed_rq.reshape(self.config.M, self.config.K, self.config.dim)
        g["embed_rq"] += np.einsum("bik,bid->ikd", dseg, h).reshape(self.embed_rq.shape)
        dh = np.einsum("bik,ikd->bid", dseg, rq3)
        self._backward_decoder(out, dh, aux_dx or {}, aux_dprobs or {})

    def _backward_decoder(self, out, dh, aux_dx, aux_dprobs):
        g = self.grads
        dec_ids, dec_caches, c_f, _pre = out["dec_cache"]
        dx, dg_f = nnops.rmsnorm_backward(dh, c_f)
        g["dec.ln_f"] += dg_f
        denc_total = 0.0
        for i in reversed(range(len(self.dec_blocks))):
            dx, denc = self.dec_blocks[i].backward(
                dx, dec_caches[i], g, f"dec.{i}.",
                dx_pre_ffn=aux_dx.get(i), dprobs_extra=aux_dprobs.get(i),
            )
            denc_total = denc_total + denc
        self._scatter_embedding(dec_ids, dx)
        # encoder side
        q_tokens, enc_caches, ec_f, _mask = out["enc_cache"]
        dxe, dg_ef = nnops.rmsnorm_backward(denc_total, ec_f)
        g["enc.ln_f"] += dg_ef
        for i in reversed(range(len(self.enc_blocks))):
            dxe = self.enc_blocks[i].backward(dxe, enc_caches[i], g, f"enc.{i}.")
        self._scatter_embedding(q_tokens, dxe)

    def _scatter_embedding(self, ids, dx):
        base = ids < self.config.base_vocab
        flat_ids = ids.ravel()
        flat_dx = dx.reshape(-1, dx.shape[-1])
        sel = base.ravel()
        np.add.at(self.grads["embed_base"], flat_ids[sel], flat_dx[sel])
        np.add.at(self.grads["embed_rq"], flat_ids[~sel] - self.config.base_vocab, flat_dx[~sel])


def inject_mixlora(model: Seq2SeqModel, n_experts, router_kind, rng, n_mix=None, top_k=None):
    """Convert the first n_mix decoder FFNs into fresh MixLoRA layers.

    Used when a plain backbone was pretrained and experts enter only at the
    first continual session.  The frozen FFN weights are adopted as-is, so
    the forward output is unchanged at injection time.
    """
    cfg = model.config
    n_mix = cfg.decoder_blocks if n_mix is None else n_mix
    top_k = min(top_k or 2, n_experts)
    for i in range(n_mix):
        blk = model.dec_blocks[i]
        if blk.moe is not None:
            raise ValueError(f"decoder block {i} already hosts a MixLoRA layer")
        blk.moe = MixLoRALayer(
            w_in=blk.w_in,
            w_out=blk.w_out,
            ln_g=blk.ln3,
            router=Router.new(router_kind, cfg.dim, n_experts, top_k, rng),
            experts=[
                LoRAExpertPair.new(cfg.dim, cfg.hidden, cfg.lora_rank, rng, created_at=model.timestep + 1)
                for _ in range(n_experts)
            ],
            lora_scale=cfg.lora_scale,
            ema_tau=np.full(cfg.M, np.nan),
        )
        del blk.ln3, blk.w_in, blk.w_out
    cfg.n_mix = n_mix
    cfg.n_experts = n_experts
    cfg.router_kind = router_kind
    cfg.top_k = top_k
    return model
