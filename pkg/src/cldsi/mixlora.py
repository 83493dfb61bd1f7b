"""Expandable mixture-of-LoRA FFN layers.

A MixLoRA layer keeps the pretrained two-matrix FFN frozen and adds N
rank-r LoRA pairs (one adapting the in-projection, one the out-projection)
gated by a shared top-k router.  Layers expand by appending a zero-init
expert plus one router column; everything older freezes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nnops import rmsnorm_backward, rmsnorm_forward, softmax, softmax_backward

ROUTER_KINDS = ("softmax", "cosine")


@dataclass
class LoRAExpertPair:
    """Rank-r adapters for the FFN in/out projections of one expert."""

    down_in: np.ndarray   # (dim, r)
    up_in: np.ndarray     # (r, hidden), zero at creation so the expert is a no-op
    down_out: np.ndarray  # (hidden, r)
    up_out: np.ndarray    # (r, dim), zero at creation
    created_at: int = 0
    frozen: bool = False

    @property
    def rank(self):
        return self.down_in.shape[1]

    @staticmethod
    def new(dim, hidden, rank, rng, created_at=0):
        """Fresh expert: random down-projections, zero up-projections."""
        return LoRAExpertPair(
            down_in=rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, rank)),
            up_in=np.zeros((rank, hidden)),
            down_out=rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, rank)),
            up_out=np.zeros((rank, dim)),
            created_at=created_at,
        )

    def delta_in(self, x, scale):
        return (x @ self.down_in) @ self.up_in * scale

    def delta_out(self, x, scale):
        return (x @ self.down_out) @ self.up_out * scale


@dataclass
class Router:
    """Per-expert gating weights; cosine kind keeps columns unit-norm."""

    kind: str
    weights: np.ndarray  # (dim, N)
    top_k: int
    frozen_cols: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ROUTER_KINDS:
            raise ValueError(f"unknown router kind {self.kind!r}")
        if not self.frozen_cols:
            self.frozen_cols = [False] * self.weights.shape[1]
        if not 1 <= self.top_k <= self.weights.shape[1]:
            raise ValueError("need N >= top_k >= 1")

    @property
    def n_experts(self):
        return self.weights.shape[1]

    @staticmethod
    def new(kind, dim, n_experts, top_k, rng):
        w = rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, n_experts))
        if kind == "cosine":
            w = w / np.linalg.norm(w, axis=0, keepdims=True)
        return Router(kind=kind, weights=w, top_k=top_k)

    def renormalize(self):
        """Project unfrozen cosine columns back to unit L2 norm."""
        if self.kind != "cosine":
            return
        for j, frozen in enumerate(self.frozen_cols):
            if not frozen:
                self.weights[:, j] /= np.linalg.norm(self.weights[:, j])


def router_logits(x, router: Router):
    """Raw inner products (softmax kind) or cosine similarities.

    Accepts a single dim-vector or a (T, dim) batch.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if not np.all(np.isfinite(xb)):
        raise FloatingPointError("non-finite router input")
    if router.kind == "softmax":
        out = xb @ router.weights
    else:
        norms = np.linalg.norm(xb, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise ValueError("zero-norm input has no direction under a cosine router")
        col = np.linalg.norm(router.weights, axis=0, keepdims=True)
        out = (xb / norms) @ (router.weights / col)
    return out[0] if single else out


def gate_topk(logits, k):
    """Softmax over all logits, then zero everything outside the top k.

    No renormalization after truncation; ties keep the lower index.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    lb = logits[None, :] if single else logits
    n = lb.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, N={n}]")
    probs = softmax(lb)
    order = np.argsort(-lb, axis=-1, kind="stable")  # stable -> lower index wins ties
    sel = order[:, :k]
    gates = np.zeros_like(probs)
    rows = np.arange(lb.shape[0])[:, None]
    gates[rows, sel] = probs[rows, sel]
    return gates[0] if single else gates


@dataclass
class MixLoRALayer:
    """Frozen FFN + expandable LoRA experts + router + OOD thresholds."""

    w_in: np.ndarray   # (dim, hidden), frozen during continual indexing
    w_out: np.ndarray  # (hidden, dim), frozen during continual indexing
    ln_g: np.ndarray   # (dim,) pre-FFN RMSNorm gain, frozen during continual indexing
    router: Router
    experts: list
    lora_scale: float = 8.0
    ema_tau: np.ndarray = None  # (M,) per-docid-position energy thresholds, NaN = unset

    def __post_init__(self):
        if len(self.experts) != self.router.n_experts:
            raise ValueError("expert count must match router column count")
        ranks = {e.rank for e in self.experts}
        if len(ranks) > 1:
            raise ValueError("all experts in a layer share one rank")

    @property
    def n_experts(self):
        return len(self.experts)

    @property
    def dim(self):
        return self.w_in.shape[0]

    @property
    def hidden(self):
        return self.w_in.shape[1]

    @property
    def scale_eff(self):
        """Effective LoRA multiplier: scale / rank."""
        return self.lora_scale / self.experts[0].rank


def expand_layer(layer: MixLoRALayer, timestep: int, rng) -> MixLoRALayer:
    """Append a zero-init expert and a fresh router column; freeze the rest.

    The forward output is unchanged right after expansion whenever the new
    expert's gate is zero (its up-projections are zero anyway), so any
    immediate change comes purely from routing-probability shifts.
    """
    for e in layer.experts:
        e.frozen = True
    layer.router.frozen_cols = [True] * layer.router.n_experts
    layer.experts.append(
        LoRAExpertPair.new(layer.dim, layer.hidden, layer.experts[0].rank, rng, created_at=timestep)
    )
    col = rng.normal(0.0, 1.0, layer.dim)
    if layer.router.kind == "cosine":
        col = col / np.linalg.norm(col)
    else:
        col = col / np.sqrt(layer.dim)
    layer.router.weights = np.concatenate([layer.router.weights, col[:, None]], axis=1)
    layer.router.frozen_cols.append(False)
    return layer


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def mixlora_forward(x, layer: MixLoRALayer, gate_override=None):
    """x' = W_in(LN(x)) + sum_i g_i * Din_i(x);  h = relu(x');
    y = x + W_out(h) + sum_i g_i * Dout_i(h).

    One gate vector is shared by both halves, and the out-adapters read the
    same activated hidden state the frozen out-projection sees.  The hidden
    nonlinearity is load-bearing: without it the FFN amplifies off-manifold
    inputs and the router's energy score loses its OOD direction.
    `gate_override` replaces the routed gates (used by tests to force or
    zero specific experts).  Accepts a dim-vector or a (T, dim) batch.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    y, _ = mixlora_forward_cache(xb, layer, gate_override=gate_override)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite MixLoRA output")
    return y[0] if single else y


def mixlora_forward_cache(x, layer: MixLoRALayer, gate_override=None):
    """Batched forward returning the cache needed for the backward pass.

    x: (T, dim).  The cache also exposes router probs/logits for the
    load-balancing loss and the energy score.
    """
    scale = layer.scale_eff
    u, ln_cache = rmsnorm_forward(x, layer.ln_g)
    base_in = u @ layer.w_in

    if gate_override is not None:
        gates = np.broadcast_to(np.asarray(gate_override, dtype=np.float64), (x.shape[0], layer.n_experts)).copy()
        logits = probs = sel = None
        xn = col_n = energy_logits = None
    else:
        logits = router_logits(x, layer.router)
        probs = softmax(logits)
        order = np.argsort(-logits, axis=-1, kind="stable")
        sel = order[:, : layer.router.top_k]
        gates = np.zeros_like(probs)
        rows = np.arange(x.shape[0])[:, None]
        gates[rows, sel] = probs[rows, sel]
        if layer.router.kind == "cosine":
            xn = x / np.linalg.norm(x, axis=1, keepdims=True)
            col_n = np.linalg.norm(layer.router.weights, axis=0, keepdims=True)
            # the energy score reads <R_i, x> with unit columns but the raw
            # token: normalizing x away leaves a bounded, signal-free logit
            energy_logits = x @ (layer.router.weights / col_n)
        else:
            xn = col_n = None
            energy_logits = logits

    b_in = [x @ e.down_in for e in layer.experts]          # (T, r) each
    z_in = [bi @ e.up_in for bi, e in zip(b_in, layer.experts)]
    x1 = base_in.copy()
    for i, zi in enumerate(z_in):
        x1 += scale * gates[:, i : i + 1] * zi
    h = np.maximum(x1, 0.0)

    base_out = h @ layer.w_out
    b_out = [h @ e.down_out for e in layer.experts]
    z_out = [bo @ e.up_out for bo, e in zip(b_out, layer.experts)]
    y = x + base_out
    for i, zo in enumerate(z_out):
        y += scale * gates[:, i : i + 1] * zo

    cache = dict(
        x=x, u=u, ln_cache=ln_cache, x1=x1, h=h, gates=gates, probs=probs,
        logits=logits, sel=sel, b_in=b_in, z_in=z_in, b_out=b_out, z_out=z_out,
        xn=xn, col_n=col_n, energy_logits=energy_logits,
        overridden=gate_override is not None,
    )
    return y, cache


def mixlora_backward(dy, layer: MixLoRALayer, cache, grads, prefix, dprobs_extra=None):
    """Backprop through mixlora_forward_cache; accumulates into `grads`.

    grads is a flat dict name -> array; parameter names are prefixed with
    `prefix` (e.g. "dec.2.").  dprobs_extra adds an upstream gradient on the
    full softmax probabilities (load-balancing loss).  Returns dx.
    """
    scale = layer.scale_eff
    x, u, x1, h, gates = cache["x"], cache["u"], cache["x1"], cache["h"], cache["gates"]
    dgates = np.zeros_like(gates)

    dx = dy.copy()
    grads[prefix + "w_out"] += h.T @ dy
    dh = dy @ layer.w_out.T
    for i, e in enumerate(layer.experts):
        gdy = scale * gates[:, i : i + 1] * dy
        grads[f"{prefix}e{i}.up_out"] += cache["b_out"][i].T @ gdy
        db = gdy @ e.up_out.T
        grads[f"{prefix}e{i}.down_out"] += h.T @ db
        dh += db @ e.down_out.T
        dgates[:, i] += scale * (dy * cache["z_out"][i]).sum(axis=1)

    dx1 = dh * (x1 > 0.0)
    grads[prefix + "w_in"] += u.T @ dx1
    du = dx1 @ layer.w_in.T
    for i, e in enumerate(layer.experts):
        gdx1 = scale * gates[:, i : i + 1] * dx1
        grads[f"{prefix}e{i}.up_in"] += cache["b_in"][i].T @ gdx1
        db = gdx1 @ e.up_in.T
        grads[f"{prefix}e{i}.down_in"] += x.T @ db
        dx += db @ e.down_in.T
        dgates[:, i] += scale * (dx1 * cache["z_in"][i]).sum(axis=1)

    dln, dg = rmsnorm_backward(du, cache["ln_cache"])
    dx += dln
    grads[prefix + "ln3"] += dg

    if not cache["overridden"]:
        probs, sel = cache["probs"], cache["sel"]
        dprobs = np.zeros_like(probs)
        rows = np.arange(x.shape[0])[:, None]
        dprobs[rows, sel] = dgates[rows, sel]  # only selected gates pass gradient
        if dprobs_extra is not None:
            dprobs = dprobs + dprobs_extra
        dlogits = softmax_backward(probs, dprobs)
        dx += _router_backward(dlogits, x, layer.router, cache, grads, prefix)
    return dx


def _router_backward(dlogits, x, router: Router, cache, grads, prefix):
    if router.kind == "softmax":
        grads[prefix + "router"] += x.T @ dlogits
        return dlogits @ router.weights.T
    xn, col_n = cache["xn"], cache["col_n"]
    rn = router.weights / col_n
    dxn = dlogits @ rn.T
    drn = xn.T @ dlogits
    # unnormalize both sides of the cosine
    xnorm = np.linalg.norm(x, axis=1, keepdims=True)
    dx = (dxn - xn * (dxn * xn).sum(axis=1, keepdims=True)) / xnorm
    dr = (drn - rn * (drn * rn).sum(axis=0, keepdims=True)) / col_n
    grads[prefix + "router"] += dr
    return dx


# ---------------------------------------------------------------------------
# auxiliary losses
# ---------------------------------------------------------------------------

def load_balance_loss(batch_probs, assignments, a):
    """a * N * sum_i F_i * P_i with argmax-dispatch fractions F and mean probs P."""
    p = np.asarray(batch_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("batch_probs must be a non-empty (T, N) matrix")
    if not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("rows of batch_probs must sum to 1")
    t, n = p.shape
    assignments = np.asarray(assignments)
    frac = np.bincount(assignments, minlength=n) / t
    mean_p = p.mean(axis=0)
    return float(a * n * (frac * mean_p).sum())


def load_balance_loss_grad(batch_probs, assignments, a):
    """(loss, dloss/dprobs); the dispatch indicator is treated as constant."""
    loss = load_balance_loss(batch_probs, assignments, a)
    p = np.asarray(batch_probs, dtype=np.float64)
    t, n = p.shape
    frac = np.bincount(np.asarray(assignments), minlength=n) / t
    dprobs = np.tile(a * n * frac / t, (t, 1))
    return loss, dprobs


def router_aux_loss(h, router: Router, new_index=None):
    """Cosine-router alignment + separation loss for one layer.

    mean_i (1 - cos(R_new, h_i)) + sum_{j != new} max(0, cos(R_j, R_new)).
    `h` holds the docid-position hidden states, shape (M, dim) (or (dim,)).
    With new_index=None every column serves as R_new in turn and the results
    are averaged (the pretraining form, where no column is "new").
    """
    loss, _, _ = router_aux_loss_grad(h, router, new_index)
    return loss


def router_aux_loss_grad(h, router: Router, new_index=None):
    """(loss, dh, drouter) for router_aux_loss."""
    if router.kind != "cosine":
        raise ValueError("the alignment aux loss is defined for cosine routers")
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        h = h[None, :]
    if h.shape[0] == 0:
        raise ValueError("need at least one hidden state")
    targets = list(range(router.n_experts)) if new_index is None else [new_index]
    w = 1.0 / len(targets)

    r = router.weights
    col_n = np.linalg.norm(r, axis=0, keepdims=True)
    rn = r / col_n
    hnorm = np.linalg.norm(h, axis=1, keepdims=True)
    if np.any(hnorm == 0.0):
        raise ValueError("zero-norm hidden state")
    hn = h / hnorm

    m = h.shape[0]
    loss = 0.0
    dhn = np.zeros_like(hn)
    drn = np.zeros_like(rn)
    for t in targets:
        cos_h = hn @ rn[:, t]
        loss += w * (1.0 - cos_h).mean()
        dhn += -(w / m) * rn[:, t][None, :]
        drn[:, t] += -(w / m) * hn.sum(axis=0)
        for j in range(router.n_experts):
            if j == t:
                continue
            c = float(rn[:, j] @ rn[:, t])
            if c > 0.0:
                loss += w * c
                drn[:, j] += w * rn[:, t]
                drn[:, t] += w * rn[:, j]
    dh = (dhn - hn * (dhn * hn).sum(axis=1, keepdims=True)) / hnorm
    dr = (drn - rn * (drn * rn).sum(axis=0, keepdims=True)) / col_n
    return float(loss), dh, dr


def router_assigned_aux_grad(h, router: Router):
    """Pretraining form of the router loss: mode-seeking alignment.

    Each column aligns with the tokens dispatched to it (argmax), plus the
    pairwise hinge keeping columns apart:
    (1/T) sum_t (1 - cos(R_{a(t)}, h_t)) + sum_{j<k} max(0, cos(R_j, R_k)).
    Aligning every column to every token (the naive symmetric reading)
    collapses the columns into a fan around the mean hidden direction, which
    makes the energy score INCREASE confidence for off-mean inputs; the
    dispatched form keeps columns on in-distribution modes instead.
    Returns (loss, dh, drouter).
    """
    if router.kind != "cosine":
        raise ValueError("the alignment aux loss is defined for cosine routers")
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        h = h[None, :]
    if h.shape[0] == 0:
        raise ValueError("need at least one hidden state")
    r = router.weights
    col_n = np.linalg.norm(r, axis=0, keepdims=True)
    rn = r / col_n
    hnorm = np.linalg.norm(h, axis=1, keepdims=True)
    if np.any(hnorm == 0.0):
        raise ValueError("zero-norm hidden state")
    hn = h / hnorm

    cos = hn @ rn  # (T, N)
    assign = cos.argmax(axis=1)
    t = h.shape[0]
    loss = float((1.0 - cos[np.arange(t), assign]).mean())
    dhn = -rn[:, assign].T / t
    drn = np.zeros_like(rn)
    np.add.at(drn.T, assign, -hn / t)
    for j in range(router.n_experts):
        for k in range(j + 1, router.n_experts):
            c = float(rn[:, j] @ rn[:, k])
            if c > 0.0:
                loss += c
                drn[:, j] += rn[:, k]
                drn[:, k] += rn[:, j]
    dh = (dhn - hn * (dhn * hn).sum(axis=1, keepdims=True)) / hnorm
    dr = (drn - rn * (drn * rn).sum(axis=0, keepdims=True)) / col_n
    return loss, dh, dr


def routing_fractions(batch_logits):
    """Argmax-dispatch share per expert (the routing-analysis quantity)."""
    logits = np.asarray(batch_logits)
    n = logits.shape[-1]
    top = logits.argmax(axis=-1).ravel()
    return np.bincount(top, minlength=n) / top.shape[0]
