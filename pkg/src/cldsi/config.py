"""Experiment configuration: one YAML file fully determines a run.

The mode presets mirror the published variant rows: a full-fine-tune
comparator, naive per-corpus expansion with the original softmax router,
no-expansion, expansion-without-OOD-gating, the full OOD-driven method,
and a no-pretraining variant where experts enter at the first session.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import yaml

from .data import DataConfig
from .model import TransformerConfig
from .ood import ExpansionPolicy
from .training import Hyper

MODES = ("base", "naive-expansion", "no-expand", "no-ood", "full", "no-pretrain")


@dataclass
class TrainConfig:
    pretrain_epochs: int = 12
    session_epochs: int = 10
    pretrain_batch: int = 64
    session_batch: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    warmup_frac: float = 0.1
    alpha1: float = 1.0
    alpha2: float = 0.1
    lb_coeff: float = 0.01
    slow_learner_factor: float = 100.0


@dataclass
class RQConfig:
    M: int = 4
    K: int = 16
    kmeans_iters: int = 25


@dataclass
class EvalConfig:
    beam: int = 10
    topk: int = 10
    chunk: int = 128


@dataclass
class ModelArch:
    dim: int = 64
    hidden: int = 128
    heads: int = 2
    encoder_blocks: int = 2
    decoder_blocks: int = 4
    n_mix: int = 4
    max_len: int = 48
    dropout: float = 0.0
    lora_rank: int = 4
    lora_scale: float = 8.0
    n_experts: int = 2
    top_k: int = 2


@dataclass
class ExperimentConfig:
    mode: str = "full"
    seed: int = 0
    use_mask: bool = True  # ablation toggle; constrained decoding requires it
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelArch = field(default_factory=ModelArch)
    rq: RQConfig = field(default_factory=RQConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    policy: ExpansionPolicy = field(default_factory=ExpansionPolicy)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; pick one of {MODES}")

    # -- mode semantics -------------------------------------------------------

    @property
    def router_kind(self):
        return "softmax" if self.mode == "naive-expansion" else "cosine"

    @property
    def uses_experts(self):
        return self.mode != "base"

    @property
    def pretrains_experts(self):
        return self.mode in ("naive-expansion", "no-expand", "no-ood", "full")

    @property
    def expansion_rule(self):
        if self.mode in ("naive-expansion", "no-ood"):
            return "always"
        if self.mode in ("full", "no-pretrain"):
            return "ood"
        return "never"

    @property
    def cl_strategies(self):
        """Slow-learner + KL anchoring (the RQ-docid CL strategies)."""
        return self.mode in ("no-expand", "no-ood", "full", "no-pretrain")

    @property
    def full_finetune(self):
        return self.mode == "base"

    def transformer_config(self) -> TransformerConfig:
        n_mix = self.model.n_mix if (self.uses_experts and self.pretrains_experts) else 0
        return TransformerConfig(
            dim=self.model.dim,
            hidden=self.model.hidden,
            heads=self.model.heads,
            encoder_blocks=self.model.encoder_blocks,
            decoder_blocks=self.model.decoder_blocks,
            n_mix=n_mix,
            base_vocab=self.data.vocab_size,
            M=self.rq.M,
            K=self.rq.K,
            max_len=self.model.max_len,
            dropout=self.model.dropout,
            lora_rank=self.model.lora_rank,
            lora_scale=self.model.lora_scale,
            n_experts=self.model.n_experts,
            top_k=self.model.top_k,
            router_kind=self.router_kind,
            seed=self.seed,
        )

    def hyper(self, pretraining: bool) -> Hyper:
        alpha1 = self.train.alpha1 if self.uses_experts else 0.0
        alpha2 = 0.0 if (pretraining or not self.cl_strategies) else self.train.alpha2
        return Hyper(
            alpha1=alpha1,
            alpha2=alpha2,
            lb_coeff=self.train.lb_coeff,
            aux_mode="dispatched" if pretraining else "newest",
            lr=self.train.lr,
            weight_decay=self.train.weight_decay,
            clip_norm=self.train.clip_norm,
            warmup_frac=self.train.warmup_frac,
            ema_decay=self.policy.ema_decay,
            threshold_stat=self.policy.threshold_stat,
        )

    def session_slow_factor(self):
        return self.train.slow_learner_factor if self.cl_strategies else 1.0


def _to_plain(obj):
    d = asdict(obj)
    d["data"]["ood_schedule"] = list(d["data"]["ood_schedule"])
    return d


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _to_plain(cfg)


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    sections = {
        "data": DataConfig,
        "model": ModelArch,
        "rq": RQConfig,
        "train": TrainConfig,
        "policy": ExpansionPolicy,
        "eval": EvalConfig,
    }
    kwargs = {}
    for key, cls in sections.items():
        sub = dict(d.pop(key, {}) or {})
        if key == "data" and "ood_schedule" in sub:
            sub["ood_schedule"] = tuple(sub["ood_schedule"])
        kwargs[key] = cls(**sub)
    kwargs.update(d)
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path):
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=True)


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def default_benchmark(mode="full", seed=0, ood_schedule=("ood", "id", "id", "id")) -> ExperimentConfig:
    """The default synthetic benchmark used by the acceptance suite."""
    return ExperimentConfig(mode=mode, seed=seed, data=DataConfig(ood_schedule=tuple(ood_schedule), seed=seed))
