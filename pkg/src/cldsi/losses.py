"""Training objectives: masked CE, posterior-anchoring KL, and the total.

CE and KL operate on within-segment logits (position i vs. codebook i); the
position mask zeroes all probability outside the segment, so the segment
view is exact and avoids the full extended-vocabulary softmax.
"""

from __future__ import annotations

import numpy as np

from .mixlora import load_balance_loss_grad, router_assigned_aux_grad, router_aux_loss_grad
from .nnops import log_softmax, softmax


def ce_from_segments(seg_logits, codes):
    """(loss, dseg). Mean over positions and batch of -log p(gold code)."""
    codes = np.asarray(codes)
    b, m, k = seg_logits.shape
    logp = log_softmax(seg_logits)
    gold = codes - 1
    rows, pos = np.meshgrid(np.arange(b), np.arange(m), indexing="ij")
    loss = -logp[rows, pos, gold].mean()
    dseg = softmax(seg_logits)
    dseg[rows, pos, gold] -= 1.0
    dseg /= b * m
    return float(loss), dseg


def kl_from_segments(prev_seg, cur_seg):
    """KL(P_prev || P_cur) per position, averaged; (loss, dseg_cur).

    Gradients flow only into the current model's logits.
    """
    b, m, k = cur_seg.shape
    logp_prev = log_softmax(prev_seg)
    p_prev = np.exp(logp_prev)
    logq = log_softmax(cur_seg)
    loss = (p_prev * (logp_prev - logq)).sum(axis=-1).mean()
    dseg = (np.exp(logq) - p_prev) / (b * m)
    return float(loss), dseg


def _segments_from_full(masked_logits, layout):
    """Slice (.., M, V_ext) masked logits down to (.., M, K) segment logits."""
    single = masked_logits.ndim == 2
    x = masked_logits[None] if single else masked_logits
    if x.shape[-1] != layout.extended_size:
        raise ValueError("logits width does not match the vocabulary layout")
    seg = np.stack(
        [x[:, i - 1, layout.base_size + (i - 1) * layout.K : layout.base_size + i * layout.K]
         for i in range(1, layout.M + 1)],
        axis=1,
    )
    return seg


def ce_loss(masked_logits, codes, layout):
    """Mean over the M positions of -log p(gold code) under masked logits."""
    codes = np.asarray(codes)
    single = masked_logits.ndim == 2
    if single:
        codes = codes[None]
    for row in codes:
        for i, c in enumerate(row, start=1):
            if not 1 <= c <= layout.K:
                raise ValueError(f"gold code {c} at position {i} is outside its segment")
    seg = _segments_from_full(masked_logits, layout)
    loss, _ = ce_from_segments(seg, codes)
    return loss


def kl_loss(query, codes, model_t, model_prev):
    """Eq.-style posterior anchoring between consecutive checkpoints."""
    lt, lp = model_t.config.layout, model_prev.config.layout
    if lt != lp:
        raise ValueError(f"vocabulary layout mismatch: {lt} vs {lp}")
    queries = [query] if isinstance(query[0], (int, np.integer)) else list(query)
    codes = np.atleast_2d(np.asarray(codes))
    cur = model_t.train_forward(queries, codes)["seg_logits"]
    prev = model_prev.train_forward(queries, codes)["seg_logits"]
    loss, _ = kl_from_segments(prev, cur)
    return loss


def aux_terms(model, out, hyper, with_grads):
    """Per-MixLoRA-layer auxiliary losses and their injected gradients.

    Cosine routers use the alignment/separation loss on the pre-FFN hidden
    states (newest column as the target during continual sessions, the
    dispatched mode-seeking form during pretraining when no column is new);
    softmax routers use the load-balancing loss on the full router
    probabilities.
    """
    total = 0.0
    aux_dx, aux_dprobs = {}, {}
    b = out["codes"].shape[0]
    m = model.config.M
    for l in model.mix_layer_ids():
        layer = model.decoder_layer(l)
        if layer.router.kind == "cosine":
            h = out["dec_cache"][3][l].reshape(b * m, model.config.dim)
            if hyper.aux_mode == "dispatched":
                loss_l, dh, dr = router_assigned_aux_grad(h, layer.router)
            else:
                loss_l, dh, dr = router_aux_loss_grad(h, layer.router, layer.router.n_experts - 1)
            total += loss_l
            if with_grads:
                aux_dx[l] = hyper.alpha1 * dh.reshape(b, m, model.config.dim)
                model.grads[f"dec.{l}.router"] += hyper.alpha1 * dr
        else:
            cm = out["dec_cache"][1][l][8][1]
            probs, logits = cm["probs"], cm["logits"]
            loss_l, dprobs = load_balance_loss_grad(probs, logits.argmax(axis=1), hyper.lb_coeff)
            total += loss_l
            if with_grads:
                aux_dprobs[l] = hyper.alpha1 * dprobs
    return total, aux_dx, aux_dprobs


def compute_objective(model, prev_model, queries, codes, hyper, with_grads=False, dropout_rng=None):
    """Eq.-7-style objective: CE + a1 * sum_l aux_l + a2 * KL.

    The KL term is omitted when prev_model is None (the pretraining stage).
    Returns the loss breakdown plus the forward state (for threshold
    updates); gradients accumulate into model.grads when with_grads is set.
    """
    codes = np.asarray(codes)
    dropout = model.config.dropout if with_grads else 0.0
    out = model.train_forward(queries, codes, dropout=dropout, rng=dropout_rng)
    if with_grads and model.grads is None:
        model.zero_grads()

    ce, dseg = ce_from_segments(out["seg_logits"], codes)
    kl = 0.0
    if prev_model is not None and hyper.alpha2 > 0.0:
        prev_seg = prev_model.train_forward(queries, codes)["seg_logits"]
        kl, dseg_kl = kl_from_segments(prev_seg, out["seg_logits"])
        dseg = dseg + hyper.alpha2 * dseg_kl

    aux, aux_dx, aux_dprobs = (0.0, {}, {})
    if hyper.alpha1 > 0.0 and model.mix_layer_ids():
        aux, aux_dx, aux_dprobs = aux_terms(model, out, hyper, with_grads)

    if with_grads:
        model.backward_from_segments(out, dseg, aux_dx=aux_dx, aux_dprobs=aux_dprobs)

    total = ce + hyper.alpha1 * aux + hyper.alpha2 * kl
    losses = {"ce": ce, "aux": aux, "kl": kl, "total": total}
    return losses, out


def total_loss(batch, model_t, model_prev, alpha1, alpha2, aux_mode="newest", lb_coeff=0.01):
    """Public objective evaluation: (total, breakdown), no gradients."""
    from .training import Hyper  # local import to avoid a cycle

    queries = [q for q, _ in batch]
    codes = np.asarray([c for _, c in batch])
    hyper = Hyper(alpha1=alpha1, alpha2=alpha2, aux_mode=aux_mode, lb_coeff=lb_coeff)
    losses, _ = compute_objective(model_t, model_prev, queries, codes, hyper, with_grads=False)
    return losses["total"], losses
