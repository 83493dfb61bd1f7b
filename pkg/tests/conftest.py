"""Shared fixtures: a micro experiment config that runs in seconds."""

import pytest

from cldsi.config import ExperimentConfig
from cldsi.data import DataConfig


def micro_experiment(mode="full", seed=0, ood_schedule=("ood", "id"), **kw):
    cfg = ExperimentConfig(
        mode=mode,
        seed=seed,
        data=DataConfig(
            n_clusters=8, docs_per_cluster=10, vocab_size=220, block_size=8,
            doc_cluster_tokens=10, doc_shared_tokens=6, query_len=6, min_overlap=4,
            queries_per_doc=4, test_queries_per_doc=1,
            d0_frac=0.75, snapshots=2, snapshot_frac=0.125,
            ood_schedule=tuple(ood_schedule), seed=seed,
        ),
    )
    cfg.model.dim = 32
    cfg.model.hidden = 48
    cfg.model.encoder_blocks = 1
    cfg.model.decoder_blocks = 2
    cfg.model.n_mix = 2
    cfg.model.max_len = 24
    cfg.rq.M = 3
    cfg.rq.K = 8
    cfg.train.pretrain_epochs = 3
    cfg.train.session_epochs = 4
    cfg.train.pretrain_batch = 32
    cfg.eval.chunk = 64
    for key, value in kw.items():
        setattr(cfg, key, value)
    return cfg


@pytest.fixture(scope="session")
def micro_run(tmp_path_factory):
    """One completed micro experiment, shared across read-only tests."""
    from cldsi.experiment import run_experiment

    out = tmp_path_factory.mktemp("micro_run")
    summary = run_experiment(micro_experiment(), str(out))
    return summary
