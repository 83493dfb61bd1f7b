"""Pretrain a small retriever end to end and query it.

Generates a miniature corpus, builds RQ docids with the untrained backbone
as the dense encoder, pretrains, and runs constrained beam search.  Takes
roughly half a minute on a laptop CPU.

Run: python3 demos/04_train_and_retrieve.py
"""

import numpy as np

from cldsi.config import ExperimentConfig
from cldsi.data import DataConfig, generate_corpora
from cldsi.decoding import DocIdTrie, constrained_beam_search
from cldsi.experiment import embed_corpus, write_rq_rows
from cldsi.metrics import mrr_at_k, recall_at_k
from cldsi.model import Seq2SeqModel
from cldsi.rq import assign_unique_docids, train_codebooks
from cldsi.training import configure_pretraining, run_training

cfg = ExperimentConfig(
    mode="full",
    seed=0,
    data=DataConfig(
        n_clusters=10, docs_per_cluster=10, vocab_size=260, block_size=8,
        doc_cluster_tokens=10, doc_shared_tokens=8, query_len=8, min_overlap=6,
        queries_per_doc=6, test_queries_per_doc=2, d0_frac=0.8,
        snapshots=2, snapshot_frac=0.1, ood_schedule=("ood", "id"), seed=0,
    ),
)
cfg.model.dim = 48
cfg.model.hidden = 96
cfg.model.decoder_blocks = 3
cfg.model.n_mix = 3
cfg.rq.M = 3
cfg.rq.K = 8
cfg.train.pretrain_epochs = 8

corpora = generate_corpora(cfg.data)
d0 = corpora.snapshots[0]
print(f"corpus: {len(d0.documents)} documents, {len(d0.train_queries)} pseudo-queries")

model = Seq2SeqModel(cfg.transformer_config())
print("embedding documents with the untrained backbone as a dense encoder...")
embeds = embed_corpus(model, d0.documents)
books = train_codebooks(
    np.stack([embeds[k] for k in sorted(embeds)]), cfg.rq.M, cfg.rq.K, iters=20, seed=1
)
table = assign_unique_docids(embeds, books)
write_rq_rows(model, books)
print(f"docid table: {len(table)} unique {cfg.rq.M}-code sequences\n")

configure_pretraining(model)
pairs = [(q.tokens, table[q.gold]) for q in d0.train_queries]
print(f"pretraining for {cfg.train.pretrain_epochs} epochs...")
log = run_training(model, None, pairs, cfg.hyper(pretraining=True),
                   epochs=cfg.train.pretrain_epochs, batch_size=32, seed=2)
print(f"cross-entropy per position: {log[0]['ce']:.3f} -> {log[-1]['ce']:.3f}\n")

trie = DocIdTrie(table.values())
by_codes = {tuple(v): k for k, v in table.items()}
recs, mrrs = [], []
for q in d0.test_queries:
    hyps = constrained_beam_search(q.tokens, model, trie, beam=10, k=10)
    ranked = [by_codes[c] for c, _ in hyps]
    recs.append(recall_at_k(ranked, q.gold, 10))
    mrrs.append(mrr_at_k(ranked, q.gold, 10))
print(f"held-out retrieval on D0: R@10 = {np.mean(recs):.3f}, MRR@10 = {np.mean(mrrs):.3f}\n")

q = d0.test_queries[0]
print(f"query {q.qid} (gold {q.gold}): tokens {q.tokens}")
for rank, (codes, score) in enumerate(constrained_beam_search(q.tokens, model, trie, beam=10, k=5), 1):
    marker = " <- gold" if by_codes[codes] == q.gold else ""
    print(f"  {rank}. {by_codes[codes]}  codes={codes}  logp={score:.3f}{marker}")
