"""Retrieval metrics and the continual-learning summary statistics.

P[t][i] is the retrieval score of the checkpoint after indexing snapshot t
evaluated on snapshot i's test queries.  Zero-shot entries (i > t) are
recorded too; the forgetting metric's inner max ranges over them by
default.
"""

from __future__ import annotations

import csv

import numpy as np


def recall_at_k(ranked, gold, k=10):
    """1 iff gold appears in the top k; duplicates in the ranking are an error."""
    ranked = list(ranked)
    if len(set(ranked)) != len(ranked):
        raise ValueError("duplicate docids in ranking")
    return 1.0 if gold in ranked[:k] else 0.0


def mrr_at_k(ranked, gold, k=10):
    """1/rank when gold sits at rank <= k, else 0."""
    ranked = list(ranked)
    if len(set(ranked)) != len(ranked):
        raise ValueError("duplicate docids in ranking")
    for r, key in enumerate(ranked[:k], start=1):
        if key == gold:
            return 1.0 / r
    return 0.0


class MetricsMatrix:
    """Square score matrices, one per metric, NaN where unevaluated."""

    def __init__(self, metrics, T):
        self.T = T
        self.values = {m: np.full((T + 1, T + 1), np.nan) for m in metrics}

    def set(self, metric, t, i, value):
        self.values[metric][t, i] = value

    def get(self, metric):
        return self.values[metric]

    def recorded_rows(self, metric):
        return [t for t in range(self.T + 1) if not np.all(np.isnan(self.values[metric][t]))]


def ap_t(P, t):
    """Average performance: mean of P[t, 0..t] (one summand per corpus)."""
    P = np.asarray(P, dtype=np.float64)
    row = P[t, : t + 1]
    if np.any(np.isnan(row)):
        raise ValueError(f"AP_{t} needs P[t, 0..{t}] populated")
    return float(row.mean())


def fwt_t(P, t):
    """Forward transfer: mean of the diagonal P[i, i], i = 1..t."""
    if t < 1:
        raise ValueError("FWT needs t >= 1")
    P = np.asarray(P, dtype=np.float64)
    diag = np.array([P[i, i] for i in range(1, t + 1)])
    if np.any(np.isnan(diag)):
        raise ValueError(f"FWT_{t} needs diagonal entries P[1..{t}, 1..{t}]")
    return float(diag.mean())


def bwt_t(P, t, restrict_to_indexed=False):
    """Backward transfer (forgetting).

    mean over i = 1..t-1 of max_{i' in 0..t-1} P[i', i] - P[t, i]; the max
    ranges over recorded zero-shot entries unless restrict_to_indexed
    limits it to checkpoints i' >= i.
    """
    if t < 2:
        raise ValueError("BWT needs t >= 2")
    P = np.asarray(P, dtype=np.float64)
    terms = []
    for i in range(1, t):
        lo = i if restrict_to_indexed else 0
        col = P[lo:t, i]
        if np.any(np.isnan(col)) or np.isnan(P[t, i]):
            raise ValueError(f"BWT_{t} needs P[{lo}..{t - 1}, {i}] and P[{t}, {i}]")
        terms.append(col.max() - P[t, i])
    return float(np.mean(terms))


def cl_metrics(P, t, restrict_to_indexed=False):
    """{AP_t, BWT_t, FWT_t} from a score matrix (t >= 2 so BWT is defined)."""
    return {
        "AP": ap_t(P, t),
        "BWT": bwt_t(P, t, restrict_to_indexed),
        "FWT": fwt_t(P, t),
    }


# -- CSV interfaces -----------------------------------------------------------

def write_pmatrix(path, matrix: MetricsMatrix):
    """CSV `metric,t,i,value` for every recorded cell."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["metric", "t", "i", "value"])
        for metric in sorted(matrix.values):
            P = matrix.values[metric]
            for t in range(matrix.T + 1):
                for i in range(matrix.T + 1):
                    if not np.isnan(P[t, i]):
                        w.writerow([metric, t, i, repr(float(P[t, i]))])


def read_pmatrix(path) -> MetricsMatrix:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        r = csv.reader(f)
        header = next(r)
        if header != ["metric", "t", "i", "value"]:
            raise ValueError(f"{path}: unexpected P-matrix header {header}")
        rows = [(m, int(t), int(i), float(v)) for m, t, i, v in r]
    if not rows:
        raise ValueError(f"{path}: empty P-matrix")
    T = max(max(t for _, t, _, _ in rows), max(i for _, _, i, _ in rows))
    matrix = MetricsMatrix(sorted({m for m, _, _, _ in rows}), T)
    for m, t, i, v in rows:
        matrix.set(m, t, i, v)
    return matrix


def write_cl_summary(path, matrix: MetricsMatrix, restrict_to_indexed=False):
    """CSV `metric,AP,BWT,FWT,timestep` for every timestep with a recorded
    row (BWT blank at t=1 where it is undefined)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["metric", "AP", "BWT", "FWT", "timestep"])
        for metric in sorted(matrix.values):
            P = matrix.values[metric]
            for t in matrix.recorded_rows(metric):
                if t < 1:
                    continue
                bwt = "" if t < 2 else repr(bwt_t(P, t, restrict_to_indexed))
                w.writerow([metric, repr(ap_t(P, t)), bwt, repr(fwt_t(P, t)), t])
