"""Energy-score OOD detection and the layer-wise expansion decision.

The router of each MixLoRA layer doubles as an N-way classifier; its
energy score -T*log(sum_i exp(<R_i, x>/T)) drops as inputs align with known
experts, so fresh-corpus queries whose tokens exceed the running
in-distribution thresholds mark the layer as a candidate for expansion.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .mixlora import Router, router_logits


@dataclass
class ExpansionPolicy:
    delta: float = 0.2         # OOD-query fraction that triggers expansion
    ema_decay: float = 0.99
    temperature: float = 1.0
    threshold_stat: str = "max"  # batch statistic fed to the EMA: "max" | "mean"
    scan_sample: int = 0         # 0 = scan every pseudo-query

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.threshold_stat not in ("max", "mean"):
            raise ValueError("threshold_stat must be 'max' or 'mean'")


@dataclass
class OODScanReport:
    """Per-layer OOD-query fractions (None where thresholds are unset)."""

    per_layer_fraction: dict
    per_position_scores: dict  # (layer, position) -> {mean, std, max}
    corpus_timestep: int
    n_queries: int


def energy_score(x, router: Router, temperature=1.0):
    """-T * log sum_i exp(<R_i, x>/T), via a stabilized log-sum-exp.

    For cosine routers the columns are unit-normalized but x keeps its norm:
    a fully normalized (cosine) logit is bounded in [-1, 1] and carries no
    confidence magnitude, which empties the score of its OOD signal.
    """
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite energy input")
    if router.kind == "cosine":
        col = np.linalg.norm(router.weights, axis=0, keepdims=True)
        logits = x @ (router.weights / col)
    else:
        logits = x @ router.weights
    return energy_from_logits(logits, temperature)


def energy_from_logits(logits, temperature=1.0):
    z = np.asarray(logits, dtype=np.float64) / temperature
    m = z.max(axis=-1)
    lse = m + np.log(np.exp(z - np.expand_dims(m, -1)).sum(axis=-1))
    out = -temperature * lse
    return float(out) if out.ndim == 0 else out


def update_ema(tau, score, decay):
    """decay*tau + (1-decay)*score; the first observation initializes tau."""
    if not 0.0 < decay < 1.0:
        raise ValueError("decay must lie in (0, 1)")
    if tau is None or (np.isscalar(tau) and np.isnan(tau)):
        return float(score)
    return float(decay * tau + (1.0 - decay) * score)


def update_layer_thresholds(layer, energies, decay, stat="max"):
    """Fold one training batch's energies (B, M) into layer.ema_tau.

    Called after the loss on in-distribution batches only; NaN entries in
    ema_tau mean "never observed" and are initialized with the first batch.
    """
    agg = energies.max(axis=0) if stat == "max" else energies.mean(axis=0)
    tau = layer.ema_tau
    fresh = np.isnan(tau)
    tau[fresh] = agg[fresh]
    tau[~fresh] = decay * tau[~fresh] + (1.0 - decay) * agg[~fresh]


def scan_corpus(model, pairs, policy: ExpansionPolicy, rng=None) -> OODScanReport:
    """Pre-indexing scan: fraction of OOD pseudo-queries per MixLoRA layer.

    Each (query tokens, codes) pair is teacher-forced through the model; a
    token at docid position i is OOD at a layer iff its energy exceeds that
    layer's tau_i, and a query is OOD iff any of its tokens is.  The model
    is not mutated.  Layers with unpopulated thresholds report None,
    mirroring the "-" of inapplicable scans.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cannot scan an empty pair set")
    if policy.scan_sample and len(pairs) > policy.scan_sample:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(len(pairs), size=policy.scan_sample, replace=False)
        pairs = [pairs[i] for i in sorted(idx)]

    mix_ids = model.mix_layer_ids()
    flagged = {l: 0 for l in mix_ids}
    stats_acc = {}
    n = 0
    for chunk in _chunks(pairs, 256):
        queries = [q for q, _ in chunk]
        codes = np.asarray([c for _, c in chunk])
        energies = model.layer_energies(queries, codes, policy.temperature)
        n += codes.shape[0]
        for l in mix_ids:
            tau = model.decoder_layer(l).ema_tau
            e = energies[l]  # (B, M)
            for pos in range(e.shape[1]):
                key = (l, pos + 1)
                acc = stats_acc.setdefault(key, [])
                acc.append(e[:, pos])
            if np.any(np.isnan(tau)):
                continue
            flagged[l] += int((e > tau[None, :]).any(axis=1).sum())

    fractions = {}
    for l in mix_ids:
        tau = model.decoder_layer(l).ema_tau
        fractions[l] = None if np.any(np.isnan(tau)) else flagged[l] / n
    stats = {
        key: {
            "mean": float(np.concatenate(v).mean()),
            "std": float(np.concatenate(v).std()),
            "max": float(np.concatenate(v).max()),
        }
        for key, v in stats_acc.items()
    }
    return OODScanReport(
        per_layer_fraction=fractions,
        per_position_scores=stats,
        corpus_timestep=model.timestep + 1,
        n_queries=n,
    )


def expansion_decision(report: OODScanReport, policy: ExpansionPolicy):
    """Layers whose OOD-query fraction strictly exceeds delta."""
    return {
        layer
        for layer, frac in report.per_layer_fraction.items()
        if frac is not None and frac > policy.delta
    }


def write_ood_report(path, rows, append=False):
    """CSV `timestep,layer,ood_fraction,n_queries,expanded`; '-' marks
    inapplicable scans."""
    mode = "a" if append else "w"
    with open(path, mode, newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        if not append:
            w.writerow(["timestep", "layer", "ood_fraction", "n_queries", "expanded"])
        for r in rows:
            frac = "-" if r["ood_fraction"] is None else repr(r["ood_fraction"])
            w.writerow([r["timestep"], r["layer"], frac, r["n_queries"], r["expanded"]])


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]
