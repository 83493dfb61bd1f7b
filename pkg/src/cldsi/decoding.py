"""Prefix-trie constrained beam search over registered docids.

Decoding runs exactly M steps; at step i the candidate codes are the
intersection of codebook segment i (via the position mask) and the trie's
continuations of the hypothesis prefix, so every emitted sequence is a
registered docid.  Ranking is by summed log-probability with deterministic
(score, then lexicographic codes) tie-breaking.
"""

from __future__ import annotations

import numpy as np

from . import nnops
from .model import BOS_ID, PAD_ID
from .nnops import log_softmax


class DocIdTrie:
    """Prefix tree over fixed-length code sequences."""

    def __init__(self, code_seqs=()):
        self.root = {}
        self.depth = None
        self.size = 0
        for seq in code_seqs:
            self.insert(seq)

    def insert(self, codes):
        codes = tuple(int(c) for c in codes)
        if self.depth is None:
            self.depth = len(codes)
        elif len(codes) != self.depth:
            raise ValueError(f"docid length {len(codes)} != trie depth {self.depth}")
        node = self.root
        for c in codes[:-1]:
            node = node.setdefault(c, {})
        if codes[-1] not in node:
            node[codes[-1]] = None
            self.size += 1

    def allowed(self, prefix):
        """Sorted next codes continuing `prefix` (empty list if none)."""
        node = self.root
        for c in prefix:
            if node is None or c not in node:
                return []
            node = node[c]
        if node is None:
            return []
        return sorted(node.keys())

    def contains(self, codes):
        node = self.root
        for c in codes[:-1]:
            if node is None or c not in node:
                return False
            node = node[c]
        return node is not None and codes[-1] in node

    def __len__(self):
        return self.size


def constrained_beam_search(query, model, trie: DocIdTrie, beam=10, k=10):
    """Top-k registered docids for one query: list of (codes, log_prob)."""
    results = batch_constrained_beam_search([query], model, trie, beam=beam, k=k)
    return results[0]


def batch_constrained_beam_search(queries, model, trie: DocIdTrie, beam=10, k=10):
    """Vectorized beam search over a chunk of queries.

    Per-query results are independent; batching only amortizes the forward
    passes.  Returns a list (per query) of [(codes, score)] sorted by
    descending score, ties broken by lexicographic codes.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    k = min(k, beam)  # at most `beam` survivors exist
    if len(trie) == 0:
        raise ValueError("empty docid trie")
    cfg = model.config
    if trie.depth != cfg.M:
        raise ValueError(f"trie depth {trie.depth} != M={cfg.M}")
    layout = cfg.layout

    q = model.pad_queries(list(queries))
    enc_out, _ = model.forward_encoder(q)
    cross = nnops.padding_attn_mask(q, PAD_ID)

    n = len(queries)
    hyps = [[((), 0.0)] for _ in range(n)]
    state = model.start_decode(enc_out, cross)
    # row r of the decoder batch holds hypothesis hyps[owner[r]][slot[r]]
    new_ids = np.full(n, BOS_ID, dtype=np.int64)
    rq = model.embed_rq.reshape(cfg.M, cfg.K, cfg.dim)
    for step in range(1, cfg.M + 1):
        last = model.decode_step(state, new_ids)
        seg = last @ rq[step - 1].T  # the position mask restricted to segment `step`
        logp = log_softmax(seg)

        r = 0
        parents, tokens = [], []
        for qi in range(n):
            cands = []
            for codes, score in hyps[qi]:
                for c in trie.allowed(codes):
                    cands.append((codes + (c,), score + float(logp[r, c - 1]), r))
                r += 1
            cands.sort(key=lambda cs: (-cs[1], cs[0]))
            cands = cands[:beam]
            hyps[qi] = [(codes, score) for codes, score, _ in cands]
            if step < cfg.M:
                for codes, _score, parent in cands:
                    parents.append(parent)
                    tokens.append(layout.code_to_token(step, codes[-1]))
        if step < cfg.M:
            state = model.gather_decode_state(state, np.asarray(parents))
            new_ids = np.asarray(tokens, dtype=np.int64)
    return [sorted(hyps[qi], key=lambda cs: (-cs[1], cs[0]))[:k] for qi in range(n)]


def retrieve(queries, model, table, beam=10, k=10, chunk=128):
    """Ranked doc keys per query using the docid table's trie."""
    trie = DocIdTrie(table.values())
    by_codes = {tuple(v): key for key, v in table.items()}
    ranked = []
    queries = list(queries)
    for i in range(0, len(queries), chunk):
        part = queries[i : i + chunk]
        for hyps in batch_constrained_beam_search(part, model, trie, beam=beam, k=k):
            ranked.append([(by_codes[c], s) for c, s in hyps])
    return ranked
