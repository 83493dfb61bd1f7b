"""Energy scores and expansion decisions.

Shows the raw energy formula, the EMA threshold bookkeeping, and a
synthetic two-cluster scan where thresholds fitted on one cluster flag the
other.

Run: python3 demos/03_energy_ood.py
"""

import numpy as np

from cldsi.mixlora import Router
from cldsi.ood import (
    ExpansionPolicy,
    OODScanReport,
    energy_score,
    expansion_decision,
    update_ema,
)

rng = np.random.default_rng(0)

print("== the energy score ==")
cols = np.stack([np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])], axis=1)
router = Router(kind="cosine", weights=cols, top_k=1)
for x, label in [
    (np.array([1.0, 0.0, 0.0]), "aligned with column 1, unit norm"),
    (np.array([2.0, 0.0, 0.0]), "aligned, twice the norm"),
    (np.array([0.0, 0.0, 1.0]), "orthogonal to every column"),
]:
    print(f"  E = {energy_score(x, router, 1.0):+.4f}   ({label})")
print("aligned, confident inputs sit low; unfamiliar inputs drift up toward -log N.\n")

print("== EMA thresholds ==")
tau = None
for step, e in enumerate([-1.0, -1.1, -1.3, -1.25], start=1):
    tau = update_ema(tau, e, decay=0.9)
    print(f"  after batch {step} (energy {e:+.2f}): tau = {tau:+.4f}")
print()

print("== cluster A thresholds flag cluster B ==")
center_a = rng.normal(size=8)
center_a /= np.linalg.norm(center_a)
router = Router(
    kind="cosine",
    weights=np.stack([center_a + 0.2 * rng.normal(size=8) for _ in range(3)], axis=1),
    top_k=2,
)
router.weights /= np.linalg.norm(router.weights, axis=0, keepdims=True)
a_train = center_a + 0.25 * rng.normal(size=(100, 8))
tau = None
for x in a_train:
    tau = update_ema(tau, energy_score(x, router, 1.0), decay=0.95)
center_b = rng.normal(size=8)
center_b -= (center_b @ center_a) * center_a
center_b /= np.linalg.norm(center_b)
a_held = center_a + 0.25 * rng.normal(size=(50, 8))
b_new = center_b + 0.25 * rng.normal(size=(50, 8))
ea = np.array([energy_score(x, router, 1.0) for x in a_held])
eb = np.array([energy_score(x, router, 1.0) for x in b_new])
print(f"  tau (EMA on cluster A)      : {tau:+.3f}")
print(f"  held-out A energies         : {ea.mean():+.3f} +- {ea.std():.3f}  ({(ea > tau).mean():.0%} above tau)")
print(f"  cluster B energies          : {eb.mean():+.3f} +- {eb.std():.3f}  ({(eb > tau).mean():.0%} above tau)\n")

print("== the layer-wise decision ==")
report = OODScanReport(
    per_layer_fraction={0: 0.31, 1: 0.04, 2: None, 3: 0.22},
    per_position_scores={},
    corpus_timestep=1,
    n_queries=200,
)
policy = ExpansionPolicy(delta=0.2)
print(f"  fractions: {report.per_layer_fraction} (None = thresholds not yet populated)")
print(f"  delta={policy.delta} -> expand layers {sorted(expansion_decision(report, policy))}")
