"""Optimizer, the single train step, and the per-session training loop.

Freezing is enforced twice: frozen gradients are zeroed before the step and
the optimizer never touches parameters without a trainable flag, so frozen
arrays stay bitwise identical across a session.  The slow learner scales
the learning rate of the RQ vocabulary region (equivalent to gradient
scaling under SGD, and the only variant that actually slows an adaptive
optimizer).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .losses import compute_objective
from .ood import update_layer_thresholds


class NumericalError(RuntimeError):
    """Raised when training produces non-finite losses or gradients."""


@dataclass
class Hyper:
    alpha1: float = 1.0
    alpha2: float = 0.1
    lb_coeff: float = 0.01
    aux_mode: str = "newest"  # "newest" | "dispatched" (pretraining)
    lr: float = 1e-3
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    warmup_frac: float = 0.1
    ema_decay: float = 0.99
    threshold_stat: str = "max"
    update_thresholds: bool = True


class AdamW:
    """Decoupled-weight-decay Adam with a linear warmup/decay schedule."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01, total_steps=1, warmup_frac=0.1, lr_factors=None):
        self.params = params  # dict name -> array, updated in place
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.total_steps = max(1, total_steps)
        self.warmup_steps = max(1, int(round(warmup_frac * self.total_steps)))
        self.lr_factors = lr_factors or {}
        self.t = 0
        self.m = {}
        self.v = {}

    def lr_at(self, t):
        if t <= self.warmup_steps:
            return self.lr * t / self.warmup_steps
        if self.total_steps == self.warmup_steps:
            return self.lr
        frac = (self.total_steps - t) / (self.total_steps - self.warmup_steps)
        return self.lr * max(0.0, frac)

    def step(self, grads, trainable, col_masks=None):
        self.t += 1
        lr_t = self.lr_at(self.t)
        col_masks = col_masks or {}
        for name, p in self.params.items():
            if not trainable.get(name, False):
                continue
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            # no decay on gains or embeddings (decayed embedding rows shrink
            # relative to never-touched ones and corrupt the energy-OOD signal)
            wd = self.wd if (p.ndim > 1 and not name.startswith("embed")) else 0.0
            upd = mhat / (np.sqrt(vhat) + self.eps) + wd * p
            lr_eff = lr_t * self.lr_factors.get(name, 1.0)
            delta = lr_eff * upd
            mask = col_masks.get(name)
            if mask is not None:
                delta = delta * mask[None, :]
            p -= delta


def clip_gradients(grads, trainable, col_masks, max_norm):
    """Global-norm clip over trainable gradients; returns the pre-clip norm."""
    sq = 0.0
    for name, g in grads.items():
        if not trainable.get(name, False):
            continue
        mask = col_masks.get(name)
        sq += float(((g * mask[None, :]) ** 2).sum()) if mask is not None else float((g * g).sum())
    norm = float(np.sqrt(sq))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for name, g in grads.items():
            if trainable.get(name, False):
                g *= scale
    return norm


def train_step(batch, model, model_prev, optimizer, hyper: Hyper, dropout_rng=None):
    """One optimization step; returns the loss record.

    Order: gradients of the total objective, EMA threshold update from this
    (in-distribution) batch, frozen-gradient zeroing, global clip, optimizer
    step, cosine-column renormalization.
    """
    queries = [q for q, _ in batch]
    codes = np.asarray([c for _, c in batch])
    model.zero_grads()
    losses, out = compute_objective(
        model, model_prev, queries, codes, hyper, with_grads=True, dropout_rng=dropout_rng
    )
    if not np.isfinite(losses["total"]):
        raise NumericalError(f"non-finite loss: {losses}")

    if hyper.update_thresholds and model.mix_layer_ids():
        energies = model.energies_from_caches(out["dec_cache"], 1.0, codes.shape[0])
        for l, e in energies.items():
            update_layer_thresholds(model.decoder_layer(l), e, hyper.ema_decay, hyper.threshold_stat)

    col_masks = {}
    for name, g in model.grads.items():
        if not model.trainable.get(name, False):
            g[...] = 0.0
            continue
        mask = model.trainable_col_mask(name)
        if mask is not None:
            g *= mask[None, :]
            col_masks[name] = mask
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"NaN/inf gradient in {name} (losses: {losses})")

    grad_norm = clip_gradients(model.grads, model.trainable, col_masks, hyper.clip_norm)
    optimizer.step(model.grads, model.trainable, col_masks)
    for l in model.mix_layer_ids():
        model.decoder_layer(l).router.renormalize()

    losses["grad_norm"] = grad_norm
    return losses


def make_optimizer(model, hyper: Hyper, total_steps, slow_factor=1.0):
    factors = {"embed_rq": 1.0 / slow_factor} if slow_factor != 1.0 else {}
    return AdamW(
        model.named_params(),
        lr=hyper.lr,
        weight_decay=hyper.weight_decay,
        total_steps=total_steps,
        warmup_frac=hyper.warmup_frac,
        lr_factors=factors,
    )


def run_training(model, model_prev, pairs, hyper: Hyper, epochs, batch_size, seed,
                 slow_factor=1.0, log_path=None):
    """Mini-batch training over (query, codes) pairs; returns the step log.

    The session ends with a gradient-free calibration sweep that folds the
    final model's energies on the same (in-distribution) batches into the
    EMA thresholds, so the next scan compares against the trained state
    rather than the mid-session trajectory.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no training pairs")
    steps_per_epoch = (len(pairs) + batch_size - 1) // batch_size
    opt = make_optimizer(model, hyper, steps_per_epoch * epochs, slow_factor)
    rng = np.random.default_rng(seed)
    log = []
    for _epoch in range(epochs):
        order = rng.permutation(len(pairs))
        for s in range(steps_per_epoch):
            idx = order[s * batch_size : (s + 1) * batch_size]
            batch = [pairs[i] for i in idx]
            rec = train_step(batch, model, model_prev, opt, hyper, dropout_rng=rng)
            log.append(rec)
    if hyper.update_thresholds and model.mix_layer_ids():
        calibrate_thresholds(model, pairs, hyper, batch_size)
    if log_path is not None:
        with open(log_path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["step", "ce", "aux", "kl", "total", "grad_norm"])
            for i, rec in enumerate(log):
                w.writerow([i, repr(rec["ce"]), repr(rec["aux"]), repr(rec["kl"]),
                            repr(rec["total"]), repr(rec["grad_norm"])])
    return log


def calibrate_thresholds(model, pairs, hyper: Hyper, batch_size):
    """Fold the current model's in-distribution energies into the thresholds."""
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i : i + batch_size]
        queries = [q for q, _ in chunk]
        codes = np.asarray([c for _, c in chunk])
        out = model.train_forward(queries, codes)
        energies = model.energies_from_caches(out["dec_cache"], 1.0, codes.shape[0])
        for l, e in energies.items():
            update_layer_thresholds(model.decoder_layer(l), e, hyper.ema_decay, hyper.threshold_stat)


# -- trainability policies ---------------------------------------------------

def configure_pretraining(model):
    """D0 stage: every parameter trains (backbone, experts, both vocab regions)."""
    model.set_all_trainable(True)


def configure_session(model, timestep, full_finetune=False):
    """Continual-indexing stage.

    full_finetune (the BASE comparator) keeps everything trainable.
    Otherwise exactly the spec set trains: router columns and LoRA pairs
    created at this timestep, plus the RQ vocabulary region.
    """
    if full_finetune:
        model.set_all_trainable(True)
        return
    model.trainable = {n: False for n in model.named_params()}
    model.trainable["embed_rq"] = True
    for l in model.mix_layer_ids():
        layer = model.decoder_layer(l)
        new_cols = False
        for e in layer.experts:
            e.frozen = e.created_at != timestep
        layer.router.frozen_cols = [
            e.created_at != timestep for e in layer.experts
        ]
        for i, e in enumerate(layer.experts):
            if e.created_at == timestep:
                new_cols = True
                for part in ("down_in", "up_in", "down_out", "up_out"):
                    model.trainable[f"dec.{l}.e{i}.{part}"] = True
        if new_cols:
            model.trainable[f"dec.{l}.router"] = True
