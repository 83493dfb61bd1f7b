"""End-to-end experiment orchestration over dynamic corpora.

A run directory is fully determined by one config: data generation, RQ
docid construction, D0 pretraining, then per-snapshot scan / expand /
train / checkpoint / evaluate, and finally the report stage.  A manifest
records the config hash and completed stages so re-invocation resumes
instead of restarting.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import time

import numpy as np

from .checkpoint import MAGIC, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_hash, config_to_dict, load_config, save_config
from .data import generate_corpora, read_corpora, write_corpora
from .decoding import DocIdTrie, batch_constrained_beam_search
from .losses import compute_objective
from .metrics import MetricsMatrix, mrr_at_k, read_pmatrix, recall_at_k, write_cl_summary, write_pmatrix
from .mixlora import expand_layer, routing_fractions
from .model import Seq2SeqModel, inject_mixlora
from .ood import expansion_decision, scan_corpus, write_ood_report
from .rq import (
    assign_unique_docids,
    load_codebooks,
    load_docid_table,
    save_codebooks,
    save_docid_table,
    save_embeddings,
    train_codebooks,
)
from .training import configure_pretraining, configure_session, run_training

METRICS = ("R@10", "MRR@10")


def subseed(seed, tag):
    h = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(h[:4], "little") % (2**31)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Run inventory: config hash, completed stages, file checksums."""

    def __init__(self, run_dir):
        self.path = os.path.join(run_dir, "manifest.json")
        self.run_dir = run_dir
        self.data = {"config_hash": None, "seed": None, "mode": None, "completed": [], "files": {}}

    def load(self):
        if os.path.exists(self.path):
            with open(self.path, encoding="utf-8") as f:
                self.data = json.load(f)
            return True
        return False

    def save(self):
        with open(self.path, "w", encoding="utf-8") as f:
            json.dump(self.data, f, indent=1, sort_keys=True)

    def done(self, stage):
        return stage in self.data["completed"]

    def complete(self, stage, files):
        if stage not in self.data["completed"]:
            self.data["completed"].append(stage)
        for rel in files:
            self.data["files"][rel] = sha256_file(os.path.join(self.run_dir, rel))
        self.save()


def checkpoint_info(path):
    """Header-only read: config, timestep and per-layer expert counts."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        _version, hlen = struct.unpack("<II", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
    counts = {int(l): m["n_experts"] for l, m in header["mix_layers"].items()}
    return {"config": header["config"], "timestep": header["timestep"], "expert_counts": counts}


def embed_corpus(model, documents: dict, chunk=256):
    """key -> embedding, computed in ascending key order."""
    keys = sorted(documents)
    out = {}
    for i in range(0, len(keys), chunk):
        part = keys[i : i + chunk]
        vecs = model.embed_documents([documents[k] for k in part])
        for k, v in zip(part, vecs):
            out[k] = v
    return out


def write_rq_rows(model, codebooks):
    """Initialize the RQ vocabulary region with the trained centroids."""
    model.embed_rq[...] = codebooks.centroids.reshape(-1, codebooks.dim)


def evaluate_checkpoint(model, table, corpora, eval_cfg):
    """R@10 / MRR@10 of one checkpoint on every snapshot's test queries."""
    trie = DocIdTrie(table.values())
    by_codes = {tuple(v): k for k, v in table.items()}
    scores = {}
    for snap in corpora.snapshots:
        queries = snap.test_queries
        recs, mrrs = [], []
        for i in range(0, len(queries), eval_cfg.chunk):
            part = queries[i : i + eval_cfg.chunk]
            hyp_lists = batch_constrained_beam_search(
                [q.tokens for q in part], model, trie, beam=eval_cfg.beam, k=eval_cfg.topk
            )
            for q, hyps in zip(part, hyp_lists):
                ranked = [by_codes[c] for c, _ in hyps]
                recs.append(recall_at_k(ranked, q.gold, eval_cfg.topk))
                mrrs.append(mrr_at_k(ranked, q.gold, eval_cfg.topk))
        scores[("R@10", snap.t)] = float(np.mean(recs))
        scores[("MRR@10", snap.t)] = float(np.mean(mrrs))
    return scores


def write_routing_report(path, model, pairs):
    """CSV `layer,expert,token_fraction` (argmax-dispatch shares per layer)."""
    queries = [q for q, _ in pairs]
    codes = np.asarray([c for _, c in pairs])
    rows = []
    for i in range(0, len(queries), 256):
        out = model.train_forward(queries[i : i + 256], codes[i : i + 256])
        chunk_rows = {}
        for l in model.mix_layer_ids():
            cm = out["dec_cache"][1][l][8][1]
            chunk_rows[l] = cm["logits"]
        rows.append(chunk_rows)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["layer", "expert", "token_fraction"])
        for l in model.mix_layer_ids():
            logits = np.concatenate([r[l] for r in rows], axis=0)
            for e, frac in enumerate(routing_fractions(logits)):
                w.writerow([l, e, repr(float(frac))])


class ExperimentRunner:
    def __init__(self, cfg: ExperimentConfig, out_dir, force=False):
        self.cfg = cfg
        self.out = out_dir
        self.hash = config_hash(cfg)
        self.manifest = Manifest(out_dir)
        os.makedirs(out_dir, exist_ok=True)
        for sub in ("data", "rq", "ckpt", "reports"):
            os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
        had = self.manifest.load()
        if had and self.manifest.data["config_hash"] not in (None, self.hash):
            if not force:
                raise FileExistsError(
                    f"{out_dir} holds a run with a different config "
                    f"(hash {self.manifest.data['config_hash'][:8]}); use force to restart"
                )
            self.manifest.data = {"config_hash": None, "seed": None, "mode": None,
                                  "completed": [], "files": {}}
        self.manifest.data.update(config_hash=self.hash, seed=cfg.seed, mode=cfg.mode)
        self.manifest.save()
        save_config(cfg, self.p("config.yaml"))
        self._corpora = None

    # -- small helpers ---------------------------------------------------------

    def p(self, *rel):
        return os.path.join(self.out, *rel)

    @property
    def corpora(self):
        if self._corpora is None:
            self._corpora = read_corpora(self.p("data"))
        return self._corpora

    def snapshot_pairs(self, t, table):
        snap = self.corpora.snapshots[t]
        return [(q.tokens, table[q.gold]) for q in snap.train_queries]

    def _load_pmatrix(self):
        path = self.p("reports", "pmatrix.csv")
        if os.path.exists(path):
            return read_pmatrix(path)
        return MetricsMatrix(METRICS, self.corpora.T)

    def _record_eval(self, model, table, t):
        matrix = self._load_pmatrix()
        scores = evaluate_checkpoint(model, table, self.corpora, self.cfg.eval)
        for (metric, i), v in scores.items():
            matrix.set(metric, t, i, v)
        write_pmatrix(self.p("reports", "pmatrix.csv"), matrix)

    # -- stages ----------------------------------------------------------------

    def stage_data(self):
        corpora = generate_corpora(self.cfg.data)
        write_corpora(corpora, self.p("data"))
        self._corpora = corpora
        files = ["config.yaml"] + [
            f"data/{n}" for n in sorted(os.listdir(self.p("data")))
        ]
        self.manifest.complete("data", files)

    def stage_rq(self):
        model = Seq2SeqModel(self.cfg.transformer_config())
        d0_docs = self.corpora.snapshots[0].documents
        embeds = embed_corpus(model, d0_docs)
        keys = sorted(embeds)
        save_embeddings(self.p("rq", "embeddings_t0.bin"), np.stack([embeds[k] for k in keys]))
        codebooks = train_codebooks(
            np.stack([embeds[k] for k in keys]),
            self.cfg.rq.M, self.cfg.rq.K,
            iters=self.cfg.rq.kmeans_iters,
            seed=subseed(self.cfg.seed, "rq"),
        )
        save_codebooks(self.p("rq", "codebooks.bin"), codebooks)
        table = assign_unique_docids(embeds, codebooks)
        save_docid_table(self.p("rq", "docids_t0.tsv"), table)
        write_rq_rows(model, codebooks)
        save_checkpoint(model, self.p("ckpt", "init.bin"))
        self.manifest.complete(
            "rq", ["rq/embeddings_t0.bin", "rq/codebooks.bin", "rq/docids_t0.tsv", "ckpt/init.bin"]
        )

    def stage_pretrain(self):
        model = load_checkpoint(self.p("ckpt", "init.bin"))
        table = load_docid_table(self.p("rq", "docids_t0.tsv"))
        configure_pretraining(model)
        pairs = self.snapshot_pairs(0, table)
        run_training(
            model, None, pairs,
            self.cfg.hyper(pretraining=True),
            epochs=self.cfg.train.pretrain_epochs,
            batch_size=self.cfg.train.pretrain_batch,
            seed=subseed(self.cfg.seed, "pretrain"),
            slow_factor=1.0,
            log_path=self.p("reports", "train_log_t0.csv"),
        )
        model.timestep = 0
        save_checkpoint(model, self.p("ckpt", "model_t0.bin"))
        self._record_eval(model, table, 0)
        self.manifest.complete(
            "pretrain", ["ckpt/model_t0.bin", "reports/train_log_t0.csv", "reports/pmatrix.csv"]
        )

    def stage_session(self, t):
        cfg = self.cfg
        prev = load_checkpoint(self.p("ckpt", f"model_t{t - 1}.bin"))
        model = load_checkpoint(self.p("ckpt", f"model_t{t - 1}.bin"))
        table = load_docid_table(self.p("rq", f"docids_t{t - 1}.tsv"))
        codebooks = load_codebooks(self.p("rq", "codebooks.bin"))

        # docids for the incoming documents (frozen codebooks, cascade on collision)
        new_docs = self.corpora.snapshots[t].documents
        embeds = embed_corpus(prev, new_docs)
        table = assign_unique_docids(embeds, codebooks, existing=table)
        save_docid_table(self.p("rq", f"docids_t{t}.tsv"), table)
        pairs = self.snapshot_pairs(t, table)

        if cfg.mode == "no-pretrain" and t == 1:
            inject_mixlora(
                model, cfg.model.n_experts, "cosine",
                np.random.default_rng(subseed(cfg.seed, "inject")),
                n_mix=cfg.model.n_mix, top_k=cfg.model.top_k,
            )

        # pre-indexing scan, then the expansion decision
        report = None
        expanded = set()
        if model.mix_layer_ids():
            report = scan_corpus(model, pairs, cfg.policy,
                                 rng=np.random.default_rng(subseed(cfg.seed, f"scan{t}")))
            if cfg.expansion_rule == "always":
                expanded = set(model.mix_layer_ids())
            elif cfg.expansion_rule == "ood":
                expanded = expansion_decision(report, cfg.policy)
            for l in sorted(expanded):
                expand_layer(model.decoder_layer(l), t,
                             np.random.default_rng(subseed(cfg.seed, f"expand{t}.{l}")))
            rows = [
                {
                    "timestep": t,
                    "layer": l,
                    "ood_fraction": report.per_layer_fraction[l],
                    "n_queries": report.n_queries,
                    "expanded": l in expanded,
                }
                for l in sorted(report.per_layer_fraction)
            ]
            write_ood_report(self.p("reports", f"ood_t{t}.csv"), rows)

        configure_session(model, t, full_finetune=cfg.full_finetune)
        run_training(
            model, prev, pairs,
            cfg.hyper(pretraining=False),
            epochs=cfg.train.session_epochs,
            batch_size=cfg.train.session_batch,
            seed=subseed(cfg.seed, f"session{t}"),
            slow_factor=cfg.session_slow_factor(),
            log_path=self.p("reports", f"train_log_t{t}.csv"),
        )
        model.timestep = t
        save_checkpoint(model, self.p("ckpt", f"model_t{t}.bin"))
        if model.mix_layer_ids():
            write_routing_report(self.p("reports", f"routing_t{t}.csv"), model, pairs)
        self._record_eval(model, table, t)

        files = [f"rq/docids_t{t}.tsv", f"ckpt/model_t{t}.bin",
                 f"reports/train_log_t{t}.csv", "reports/pmatrix.csv"]
        if model.mix_layer_ids():
            files += [f"reports/ood_t{t}.csv", f"reports/routing_t{t}.csv"]
        self.manifest.complete(f"session_{t}", files)

    def stage_report(self):
        write_report(self.out)
        files = ["reports/cl_summary.csv"]
        if os.path.exists(self.p("reports", "ood_report.csv")):
            files.append("reports/ood_report.csv")
        if os.path.exists(self.p("reports", "routing_report.csv")):
            files.append("reports/routing_report.csv")
        self.manifest.complete("report", files)

    # -- driver ------------------------------------------------------------------

    def stages(self):
        names = ["data", "rq", "pretrain"]
        names += [f"session_{t}" for t in range(1, self.cfg.data.snapshots + 1)]
        names += ["report"]
        return names

    def run(self, stop_after=None, progress=None):
        for stage in self.stages():
            if self.manifest.done(stage):
                if progress:
                    progress(f"[{stage}] already complete, resuming past it")
            else:
                t0 = time.time()
                if stage == "data":
                    self.stage_data()
                elif stage == "rq":
                    self.stage_rq()
                elif stage == "pretrain":
                    self.stage_pretrain()
                elif stage == "report":
                    self.stage_report()
                else:
                    self.stage_session(int(stage.split("_")[1]))
                if progress:
                    progress(f"[{stage}] done in {time.time() - t0:.1f}s")
            if stop_after is not None and stage == stop_after:
                break
        return summarize_run(self.out)


def write_report(run_dir):
    """Merge per-session artifacts into the final report CSVs."""
    reports = os.path.join(run_dir, "reports")
    matrix = read_pmatrix(os.path.join(reports, "pmatrix.csv"))
    write_cl_summary(os.path.join(reports, "cl_summary.csv"), matrix)

    ood_rows = []
    for name in sorted(os.listdir(reports)):
        if name.startswith("ood_t") and name.endswith(".csv"):
            with open(os.path.join(reports, name), newline="", encoding="utf-8") as f:
                r = csv.reader(f)
                next(r)
                for ts, layer, frac, n, exp in r:
                    ood_rows.append(
                        {"timestep": int(ts), "layer": int(layer),
                         "ood_fraction": None if frac == "-" else float(frac),
                         "n_queries": int(n), "expanded": exp == "True"}
                    )
    if ood_rows:
        write_ood_report(os.path.join(reports, "ood_report.csv"), ood_rows)

    routing_rows = []
    for name in sorted(os.listdir(reports)):
        if name.startswith("routing_t") and name.endswith(".csv"):
            t = int(name[len("routing_t") : -len(".csv")])
            with open(os.path.join(reports, name), newline="", encoding="utf-8") as f:
                r = csv.reader(f)
                next(r)
                routing_rows += [[t] + row for row in r]
    if routing_rows:
        with open(os.path.join(reports, "routing_report.csv"), "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["timestep", "layer", "expert", "token_fraction"])
            w.writerows(routing_rows)


def summarize_run(run_dir):
    """Collect the artifacts a caller usually wants after run()."""
    reports = os.path.join(run_dir, "reports")
    out = {"out_dir": run_dir, "expert_counts": {}, "expansions": {}, "P": None, "cl": {}}
    ckpt_dir = os.path.join(run_dir, "ckpt")
    for name in sorted(os.listdir(ckpt_dir)):
        if name.startswith("model_t"):
            t = int(name[len("model_t") : -len(".bin")])
            out["expert_counts"][t] = checkpoint_info(os.path.join(ckpt_dir, name))["expert_counts"]
    ood_path = os.path.join(reports, "ood_report.csv")
    if os.path.exists(ood_path):
        with open(ood_path, newline="", encoding="utf-8") as f:
            r = csv.reader(f)
            next(r)
            for ts, layer, _frac, _n, exp in r:
                out["expansions"].setdefault(int(ts), [])
                if exp == "True":
                    out["expansions"][int(ts)].append(int(layer))
    pm = os.path.join(reports, "pmatrix.csv")
    if os.path.exists(pm):
        matrix = read_pmatrix(pm)
        out["P"] = {m: matrix.get(m) for m in matrix.values}
        from .metrics import ap_t, bwt_t, fwt_t

        T = matrix.T
        for m in matrix.values:
            P = matrix.get(m)
            if T in matrix.recorded_rows(m) and T >= 2:
                out["cl"][m] = {"AP": ap_t(P, T), "BWT": bwt_t(P, T), "FWT": fwt_t(P, T)}
    return out


def run_experiment(cfg, out_dir, force=False, stop_after=None, progress=None):
    """Run (or resume) a full experiment; returns the run summary."""
    if isinstance(cfg, (str, os.PathLike)):
        cfg = load_config(cfg)
    runner = ExperimentRunner(cfg, out_dir, force=force)
    return runner.run(stop_after=stop_after, progress=progress)
