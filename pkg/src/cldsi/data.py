"""Synthetic dynamic corpora: topic-clustered documents plus noisy
pseudo-queries, split into an initial snapshot and incremental ones.

Each cluster owns a disjoint signature-token block; a document mixes
signature tokens with a near-unique combination of shared-pool tokens, and
its queries are corrupted windows of the document.  The OOD schedule
decides whether a snapshot reuses the initial snapshot's clusters (ID) or
introduces fresh ones (OOD), which is what makes expansion behavior
testable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

PAD_ID = 0
BOS_ID = 1
FIRST_CONTENT_ID = 2


@dataclass
class DataConfig:
    n_clusters: int = 40
    docs_per_cluster: int = 25
    vocab_size: int = 800
    block_size: int = 12          # signature tokens per cluster
    doc_cluster_tokens: int = 16  # signature tokens per document
    doc_shared_tokens: int = 12   # shared-pool tokens per document
    query_len: int = 12
    queries_per_doc: int = 8
    test_queries_per_doc: int = 2
    query_noise: float = 0.1
    min_overlap: int = 9
    d0_frac: float = 0.9
    snapshots: int = 4
    snapshot_frac: float = 0.025
    ood_schedule: tuple = ("ood", "id", "id", "id")
    seed: int = 0

    @property
    def doc_len(self):
        return self.doc_cluster_tokens + self.doc_shared_tokens

    def validate(self):
        if len(self.ood_schedule) != self.snapshots:
            raise ValueError("ood_schedule length must equal the snapshot count")
        if any(s not in ("id", "ood") for s in self.ood_schedule):
            raise ValueError("ood_schedule entries must be 'id' or 'ood'")
        sig_span = self.n_clusters * self.block_size
        if self.vocab_size < sig_span:
            raise ValueError(
                f"vocab size {self.vocab_size} < clusters x block = {sig_span}"
            )
        shared = self.vocab_size - FIRST_CONTENT_ID - sig_span
        if shared < self.doc_shared_tokens:
            raise ValueError("shared token pool too small for doc_shared_tokens")
        if not 0 < self.min_overlap <= self.query_len:
            raise ValueError("min_overlap must lie in (0, query_len]")
        total = self.n_clusters * self.docs_per_cluster
        d0_n = round(total * self.d0_frac)
        snap_n = round(total * self.snapshot_frac)
        if d0_n + self.snapshots * snap_n != total:
            raise ValueError(
                f"split ratios do not cover the corpus exactly: "
                f"{d0_n} + {self.snapshots}x{snap_n} != {total}"
            )
        n_ood = sum(1 for s in self.ood_schedule if s == "ood")
        ood_clusters = n_ood * _ceil_div(snap_n, self.docs_per_cluster)
        base_docs = (self.n_clusters - ood_clusters) * self.docs_per_cluster
        if base_docs < d0_n + snap_n * (self.snapshots - n_ood):
            raise ValueError("not enough base clusters for D0 plus the ID snapshots")
        return d0_n, snap_n


def _ceil_div(a, b):
    return -(-a // b)


@dataclass
class Query:
    qid: str
    tokens: list
    gold: str


@dataclass
class Snapshot:
    t: int
    documents: dict            # key -> token list, insertion-ordered
    train_queries: list
    test_queries: list
    clusters: set = field(default_factory=set)


@dataclass
class DynamicCorpora:
    config: DataConfig
    snapshots: list

    @property
    def T(self):
        return len(self.snapshots) - 1

    def all_documents(self, through=None):
        out = {}
        for snap in self.snapshots[: None if through is None else through + 1]:
            out.update(snap.documents)
        return out


def generate_corpora(config: DataConfig) -> DynamicCorpora:
    """Deterministic corpus generation; same config -> bitwise identical data."""
    d0_n, snap_n = config.validate()
    rng = np.random.default_rng(config.seed)

    sig_start = FIRST_CONTENT_ID
    blocks = [
        np.arange(sig_start + c * config.block_size, sig_start + (c + 1) * config.block_size)
        for c in range(config.n_clusters)
    ]
    # every cluster shares the common pool: fresh-cluster documents differ in
    # their (unseen) signature keywords while keeping the corpus's shared
    # structure, which is the regime the OOD detector targets
    shared_pool = np.arange(sig_start + config.n_clusters * config.block_size, config.vocab_size)

    n_ood = sum(1 for s in config.ood_schedule if s == "ood")
    ood_cluster_need = _ceil_div(snap_n, config.docs_per_cluster)
    n_base = config.n_clusters - n_ood * ood_cluster_need
    base_clusters = list(range(n_base))
    ood_cluster_iter = iter(range(n_base, config.n_clusters))

    def make_doc(cluster):
        sig = rng.choice(blocks[cluster], size=config.doc_cluster_tokens, replace=True)
        shared = rng.choice(shared_pool, size=config.doc_shared_tokens, replace=False)
        tokens = np.concatenate([sig, shared])
        rng.shuffle(tokens)
        return [int(t) for t in tokens]

    # base pool: D0 plus the ID snapshots draw from the same clusters
    n_id = config.snapshots - n_ood
    base_doc_count = d0_n + snap_n * n_id
    per_cluster = np.full(n_base, base_doc_count // n_base)
    per_cluster[: base_doc_count % n_base] += 1
    pool = []
    for c in base_clusters:
        pool.extend((c, make_doc(c)) for _ in range(per_cluster[c]))
    order = rng.permutation(len(pool))
    # every base cluster must appear in D0 so ID snapshots stay in-distribution
    first_of_cluster = {}
    for rank, idx in enumerate(order):
        first_of_cluster.setdefault(pool[idx][0], rank)
    head = sorted(first_of_cluster.values())
    rest = [r for r in range(len(order)) if r not in set(head)]
    order = np.asarray([order[r] for r in head + rest])

    key_counter = 0

    def next_key():
        nonlocal key_counter
        key = f"d{key_counter:05d}"
        key_counter += 1
        return key

    def make_queries(doc_tokens, gold, count, prefix, start_idx):
        out = []
        doc = np.asarray(doc_tokens)
        max_corrupt = config.query_len - config.min_overlap
        for j in range(count):
            start = int(rng.integers(0, len(doc) - config.query_len + 1))
            window = doc[start : start + config.query_len].copy()
            n_corrupt = min(int(rng.binomial(config.query_len, config.query_noise)), max_corrupt)
            if n_corrupt:
                pos = rng.choice(config.query_len, size=n_corrupt, replace=False)
                window[pos] = rng.integers(FIRST_CONTENT_ID, config.vocab_size, size=n_corrupt)
            out.append(Query(qid=f"{prefix}-{start_idx + j}", tokens=[int(t) for t in window], gold=gold))
        return out

    cursor = 0
    snaps = []
    for t in range(config.snapshots + 1):
        if t == 0:
            members = [pool[i] for i in order[:d0_n]]
            cursor = d0_n
        elif config.ood_schedule[t - 1] == "id":
            members = [pool[i] for i in order[cursor : cursor + snap_n]]
            cursor += snap_n
        else:
            members = []
            while len(members) < snap_n:
                c = next(ood_cluster_iter)
                take = min(config.docs_per_cluster, snap_n - len(members))
                members.extend((c, make_doc(c)) for _ in range(take))
        docs, clusters = {}, set()
        train_q, test_q = [], []
        for c, tokens in members:
            key = next_key()
            docs[key] = tokens
            clusters.add(c)
            train_q.extend(make_queries(tokens, key, config.queries_per_doc, f"q{t}", len(train_q)))
            test_q.extend(make_queries(tokens, key, config.test_queries_per_doc, f"tq{t}", len(test_q)))
        snaps.append(Snapshot(t=t, documents=docs, train_queries=train_q, test_queries=test_q, clusters=clusters))
    return DynamicCorpora(config=config, snapshots=snaps)


# -- JSONL interfaces ---------------------------------------------------------

def write_documents(path, documents: dict):
    with open(path, "w", encoding="utf-8") as f:
        for key, tokens in documents.items():
            f.write(json.dumps({"key": key, "tokens": list(tokens)}) + "\n")


def read_documents(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[rec["key"]] = rec["tokens"]
    return out


def write_queries(path, queries):
    with open(path, "w", encoding="utf-8") as f:
        for q in queries:
            f.write(json.dumps({"qid": q.qid, "tokens": list(q.tokens), "gold": q.gold}) + "\n")


def read_queries(path):
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out.append(Query(qid=rec["qid"], tokens=rec["tokens"], gold=rec["gold"]))
    return out


def write_corpora(corpora: DynamicCorpora, out_dir):
    """One docs/train/test JSONL triple per snapshot, plus the config."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    for snap in corpora.snapshots:
        write_documents(os.path.join(out_dir, f"docs_t{snap.t}.jsonl"), snap.documents)
        write_queries(os.path.join(out_dir, f"train_queries_t{snap.t}.jsonl"), snap.train_queries)
        write_queries(os.path.join(out_dir, f"test_queries_t{snap.t}.jsonl"), snap.test_queries)
    meta = asdict(corpora.config)
    meta["ood_schedule"] = list(meta["ood_schedule"])
    meta["clusters"] = {str(s.t): sorted(s.clusters) for s in corpora.snapshots}
    with open(os.path.join(out_dir, "data_meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def read_corpora(out_dir) -> DynamicCorpora:
    import os

    with open(os.path.join(out_dir, "data_meta.json"), encoding="utf-8") as f:
        meta = json.load(f)
    clusters = meta.pop("clusters")
    meta["ood_schedule"] = tuple(meta["ood_schedule"])
    config = DataConfig(**meta)
    snaps = []
    for t in range(config.snapshots + 1):
        snaps.append(
            Snapshot(
                t=t,
                documents=read_documents(os.path.join(out_dir, f"docs_t{t}.jsonl")),
                train_queries=read_queries(os.path.join(out_dir, f"train_queries_t{t}.jsonl")),
                test_queries=read_queries(os.path.join(out_dir, f"test_queries_t{t}.jsonl")),
                clusters=set(clusters[str(t)]),
            )
        )
    return DynamicCorpora(config=config, snapshots=snaps)
