"""Mixture-of-LoRA layers: gating, the zero-init no-op, expansion, and the
two auxiliary losses.

Run: python3 demos/02_mixlora_routing.py
"""

import numpy as np

from cldsi.mixlora import (
    LoRAExpertPair,
    MixLoRALayer,
    Router,
    expand_layer,
    gate_topk,
    load_balance_loss,
    mixlora_forward,
    router_aux_loss,
    router_logits,
)

rng = np.random.default_rng(1)
dim, hidden = 8, 12

layer = MixLoRALayer(
    w_in=rng.normal(size=(dim, hidden)),
    w_out=rng.normal(size=(hidden, dim)),
    ln_g=np.ones(dim),
    router=Router.new("cosine", dim, 2, top_k=2, rng=rng),
    experts=[LoRAExpertPair.new(dim, hidden, rank=2, rng=rng) for _ in range(2)],
    lora_scale=8.0,
    ema_tau=np.full(4, np.nan),
)

x = rng.normal(size=(5, dim))
print("== routing ==")
logits = router_logits(x, layer.router)
gates = gate_topk(logits, layer.router.top_k)
print("cosine logits (each in [-1, 1]):")
print(np.round(logits, 3))
print("top-2 gates (softmax probs, unselected zeroed, no renormalization):")
print(np.round(gates, 3))

print("\n== zero-init no-op ==")
y = mixlora_forward(x, layer)
y_nogate = mixlora_forward(x, layer, gate_override=np.zeros(2))
print(f"fresh experts have zero up-projections: routed output == gateless output "
      f"is {np.array_equal(y, y_nogate)}")

print("\n== expansion ==")
print(f"before: {layer.n_experts} experts, router columns {layer.router.weights.shape[1]}")
expand_layer(layer, timestep=1, rng=rng)
print(f"after:  {layer.n_experts} experts, router columns {layer.router.weights.shape[1]}")
print(f"frozen flags: experts {[e.frozen for e in layer.experts]}, "
      f"columns {layer.router.frozen_cols}")
y_after = mixlora_forward(x, layer, gate_override=np.concatenate([gates, np.zeros((5, 1))], axis=1))
print(f"with the new expert's gate forced to zero the output is bitwise unchanged: "
      f"{np.array_equal(y, y_after)}")

print("\n== auxiliary losses ==")
h = layer.router.weights[:, -1][None, :] + 0.05 * rng.normal(size=(4, dim))
aux = router_aux_loss(h, layer.router, new_index=layer.n_experts - 1)
print(f"alignment/separation loss with h near the new column: {aux:.4f}")
h_far = rng.normal(size=(4, dim))
print(f"same loss with random h: {router_aux_loss(h_far, layer.router, new_index=2):.4f}")

probs = np.full((8, 4), 0.25)
print(f"load-balancing loss at a perfectly uniform batch equals its weight: "
      f"{load_balance_loss(probs, np.arange(8) % 4, a=0.01):.4f}")
