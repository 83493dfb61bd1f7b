"""A miniature dynamic-corpora experiment: frozen-expand vs full fine-tune.

Runs the whole pipeline (data -> RQ -> pretrain -> scan/expand/index ->
evaluate -> report) twice on the same miniature benchmark: once in `full`
mode (OOD-driven expansion, frozen backbone, slow-learner + KL anchoring)
and once in `base` mode (sequential full fine-tuning).  Prints the score
matrices and the continual-learning summary.

Run: python3 demos/05_continual_experiment.py   (about two minutes)
"""

import shutil
import tempfile

import numpy as np

from cldsi.config import ExperimentConfig
from cldsi.data import DataConfig
from cldsi.experiment import run_experiment

def mini_config(mode):
    cfg = ExperimentConfig(
        mode=mode,
        seed=0,
        data=DataConfig(
            n_clusters=12, docs_per_cluster=15, vocab_size=350, block_size=8,
            doc_cluster_tokens=12, doc_shared_tokens=8, query_len=8, min_overlap=6,
            queries_per_doc=6, test_queries_per_doc=2, d0_frac=0.8,
            snapshots=3, snapshot_frac=1 / 15, ood_schedule=("ood", "id", "id"), seed=0,
        ),
    )
    cfg.model.dim = 48
    cfg.model.hidden = 96
    cfg.model.decoder_blocks = 3
    cfg.model.n_mix = 3
    cfg.rq.M = 3
    cfg.rq.K = 8
    cfg.train.pretrain_epochs = 8
    cfg.train.session_epochs = 8
    return cfg


work = tempfile.mkdtemp(prefix="cldsi_demo_")
try:
    results = {}
    for mode in ("full", "base"):
        print(f"== running mode={mode} ==")
        results[mode] = run_experiment(mini_config(mode), f"{work}/{mode}", progress=print)
        print()

    for mode, s in results.items():
        P = s["P"]["R@10"]
        print(f"mode={mode}: expert counts by session {s['expert_counts']}")
        print("P[t, i] (R@10), rows = checkpoint t, columns = snapshot i:")
        print(np.array_str(np.round(P, 3), max_line_width=100))
        cl = s["cl"]["R@10"]
        print(f"AP = {cl['AP']:.3f}  BWT (forgetting) = {cl['BWT']:.3f}  FWT = {cl['FWT']:.3f}\n")

    bwt_full = results["full"]["cl"]["R@10"]["BWT"]
    bwt_base = results["base"]["cl"]["R@10"]["BWT"]
    print(f"forgetting: full={bwt_full:.3f} vs base={bwt_base:.3f} "
          f"({'frozen-expand forgets less' if bwt_full < bwt_base else 'unexpected ordering'})")
finally:
    shutil.rmtree(work, ignore_errors=True)
