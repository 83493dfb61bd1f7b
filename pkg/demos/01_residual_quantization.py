"""Residual-quantization docids, step by step.

Builds codebooks on clustered synthetic embeddings, shows how greedy
encoding refines the residual level by level, how collisions cascade into
unique docids, and what the position masks look like.

Run: python3 demos/01_residual_quantization.py
"""

import numpy as np

from cldsi.rq import (
    VocabLayout,
    apply_mask,
    assign_unique_docids,
    encode,
    position_mask,
    reconstruct,
    reconstruction_mse,
    train_codebooks,
)

rng = np.random.default_rng(0)

print("== training codebooks on 3 synthetic clusters ==")
centers = rng.normal(size=(3, 8)) * 3
points = np.concatenate([c + 0.3 * rng.normal(size=(40, 8)) for c in centers])
books = train_codebooks(points, M=3, K=4, iters=20, seed=0)
print(f"M={books.M} codebooks, K={books.K} centroids each, dim={books.dim}")

for m in range(1, 4):
    print(f"  reconstruction MSE with {m} level(s): {reconstruction_mse(points, books, m):.4f}")
print("MSE is non-increasing in the number of levels.\n")

e = points[0]
codes = encode(e, books)
print(f"greedy codes for the first point: {codes}")
residual = e.copy()
for level, c in enumerate(codes, start=1):
    centroid = books.centroids[level - 1][c - 1]
    print(f"  level {level}: picked centroid {c}, |residual| "
          f"{np.linalg.norm(residual):.3f} -> {np.linalg.norm(residual - centroid):.3f}")
    residual -= centroid
print(f"reconstruction error: {np.linalg.norm(e - reconstruct(codes, books)):.4f}\n")

print("== unique docid assignment with a forced 3-way collision ==")
same = {f"doc{i}": points[0] for i in range(3)}
table = assign_unique_docids(same, books)
for key in sorted(table):
    print(f"  {key}: {table[key]}")
print("identical embeddings received distinct codes (last level first, then cascade).\n")

print("== vocabulary masks ==")
layout = VocabLayout(base_size=10, M=3, K=4)
print(f"extended vocabulary: {layout.base_size} text tokens + {layout.M}x{layout.K} code slots "
      f"= {layout.extended_size}")
logits = rng.normal(size=layout.extended_size)
for pos in (1, 3):
    masked = apply_mask(logits, position_mask(pos, layout))
    p = np.exp(masked - masked.max())
    p /= p.sum()
    live = np.nonzero(p > 1e-12)[0]
    print(f"  position {pos}: probability mass lives on indices {list(live)}")
