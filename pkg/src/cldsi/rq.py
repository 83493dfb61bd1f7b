"""Residual-quantization codebooks, docid assignment, and vocabulary masks.

Documents are represented by fixed-length codes: codebook m quantizes the
residual left after subtracting the centroids chosen at levels 1..m-1.  The
centroids of all M codebooks are appended to the model vocabulary, one
K-wide segment per level, and decoding at position i is restricted to
segment i by a binary mask.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MOST_NEGATIVE = float(np.finfo(np.float64).min)

CODEBOOK_MAGIC = b"RQCB"
CODEBOOK_VERSION = 1


@dataclass
class RQCodebooks:
    """M codebooks of K centroids each, trained on successive residuals."""

    centroids: np.ndarray  # (M, K, dim)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 3:
            raise ValueError("centroids must have shape (M, K, dim)")
        if self.M < 1 or self.K < 2:
            raise ValueError("need M >= 1 and K >= 2")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be finite")

    @property
    def M(self) -> int:
        return self.centroids.shape[0]

    @property
    def K(self) -> int:
        return self.centroids.shape[1]

    @property
    def dim(self) -> int:
        return self.centroids.shape[2]


@dataclass(frozen=True)
class DocId:
    """A document's code sequence (1-based codes, one per codebook level)."""

    codes: tuple
    doc_ref: str

    def __post_init__(self):
        if any(c < 1 for c in self.codes):
            raise ValueError("codes are 1-based")


@dataclass(frozen=True)
class VocabLayout:
    """Layout of the extended vocabulary: base tokens then M segments of K."""

    base_size: int
    M: int
    K: int

    @property
    def extended_size(self) -> int:
        return self.base_size + self.M * self.K

    @property
    def segment_offsets(self) -> tuple:
        return tuple(self.base_size + (m - 1) * self.K for m in range(1, self.M + 1))

    def code_to_token(self, position: int, code: int) -> int:
        """Extended-vocab index of code `code` (1-based) at level `position`."""
        if not 1 <= position <= self.M:
            raise ValueError(f"position {position} outside [1, {self.M}]")
        if not 1 <= code <= self.K:
            raise ValueError(f"code {code} outside [1, {self.K}]")
        return self.base_size + (position - 1) * self.K + (code - 1)

    def token_to_code(self, token: int) -> tuple:
        """Inverse of code_to_token: (position, code), both 1-based."""
        if not self.base_size <= token < self.extended_size:
            raise ValueError(f"token {token} is not in any codebook segment")
        off = token - self.base_size
        return off // self.K + 1, off % self.K + 1


# ---------------------------------------------------------------------------
# k-means (seeded k-means++ init, lowest-index ties, reseed empty clusters)
# ---------------------------------------------------------------------------

def _pairwise_sq_dists(x, c):
    # ||x||^2 - 2 x.c + ||c||^2, clipped at 0 against fp cancellation
    d = (x * x).sum(1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp_init(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    closest = _pairwise_sq_dists(x, centers[:1]).ravel()
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # all remaining mass at existing centers (e.g. identical points):
            # duplicated centroids are permitted
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[j] = x[idx]
        closest = np.minimum(closest, _pairwise_sq_dists(x, centers[j : j + 1]).ravel())
    return centers


def kmeans(x, k, iters, rng):
    """Lloyd's algorithm; returns (centers, assignments).

    Ends on a centroid update so every center is the mean of its final
    cluster (needed for the residual-MSE monotonicity guarantee).  Empty
    clusters are reseeded from the point farthest from its assigned center.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    centers = _kmeans_pp_init(x, k, rng)
    assign = None
    for _ in range(iters):
        d = _pairwise_sq_dists(x, centers)
        new_assign = d.argmin(axis=1)  # argmin takes the lowest index on ties
        for j in range(k):
            sel = new_assign == j
            if sel.any():
                centers[j] = x[sel].mean(axis=0)
            else:
                far = d[np.arange(n), new_assign].argmax()
                centers[j] = x[far]
                new_assign[far] = j
        if assign is not None and np.array_equal(assign, new_assign):
            assign = new_assign
            break
        assign = new_assign
    return centers, assign


def train_codebooks(embeddings, M, K, iters=25, seed=0) -> RQCodebooks:
    """Fit M codebooks of K centroids on successive residuals."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("embeddings must be a (count, dim) matrix")
    if x.shape[0] < K:
        raise ValueError(f"need at least K={K} embeddings, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    residual = x.copy()
    books = np.empty((M, K, x.shape[1]))
    for m in range(M):
        centers, _ = kmeans(residual, K, iters, rng)
        books[m] = centers
        idx = _pairwise_sq_dists(residual, centers).argmin(axis=1)
        residual -= centers[idx]
    return RQCodebooks(books)


def encode(embedding, codebooks: RQCodebooks):
    """Greedy per-level assignment; returns a tuple of M 1-based codes."""
    e = np.asarray(embedding, dtype=np.float64)
    if e.shape != (codebooks.dim,):
        raise ValueError(f"embedding has dim {e.shape}, codebooks expect ({codebooks.dim},)")
    return tuple(int(c) for c in encode_batch(e[None, :], codebooks)[0])


def encode_batch(embeddings, codebooks: RQCodebooks):
    """Vectorized greedy encoding; returns (n, M) int array of 1-based codes."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebooks.dim:
        raise ValueError("embeddings must be (n, dim) matching the codebooks")
    residual = x.copy()
    codes = np.empty((x.shape[0], codebooks.M), dtype=np.int64)
    for m in range(codebooks.M):
        d = _pairwise_sq_dists(residual, codebooks.centroids[m])
        idx = d.argmin(axis=1)
        codes[:, m] = idx + 1
        residual -= codebooks.centroids[m][idx]
    return codes


def reconstruct(codes, codebooks: RQCodebooks):
    """Sum of the selected centroids for 1-based `codes` (truncation allowed)."""
    out = np.zeros(codebooks.dim)
    for m, c in enumerate(codes):
        out += codebooks.centroids[m][c - 1]
    return out


def reconstruction_mse(embeddings, codebooks: RQCodebooks, levels=None):
    """Mean squared residual after greedy encoding with the first
    `levels` codebooks (all M when None)."""
    x = np.asarray(embeddings, dtype=np.float64)
    levels = codebooks.M if levels is None else levels
    residual = x.copy()
    for m in range(levels):
        d = _pairwise_sq_dists(residual, codebooks.centroids[m])
        idx = d.argmin(axis=1)
        residual -= codebooks.centroids[m][idx]
    return float((residual ** 2).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# unique docid assignment with cascading collision resolution
# ---------------------------------------------------------------------------

def assign_unique_docids(embeddings: dict, codebooks: RQCodebooks, existing=None) -> dict:
    """Assign a distinct code sequence to every document.

    `embeddings` maps doc key -> dim-vector; documents are processed in
    ascending key order.  On collision the last code moves to the nearest
    unused centroid under the same prefix; when a level is exhausted the
    reassignment cascades one level up.  `existing` (key -> codes) seeds the
    used set for continual indexing and is included in the returned table.

    Raises RuntimeError when a colliding prefix runs out of capacity.
    """
    used = {}
    table = {}
    if existing:
        for key, codes in existing.items():
            codes = tuple(codes)
            if codes in used:
                raise ValueError(f"existing table has duplicate codes {codes}")
            used[codes] = key
            table[key] = codes

    M = codebooks.M
    for key in sorted(embeddings):
        if key in table:
            raise ValueError(f"document {key} already has a docid")
        e = np.asarray(embeddings[key], dtype=np.float64)
        codes = list(encode(e, codebooks))
        if tuple(codes) not in used:
            used[tuple(codes)] = key
            table[key] = tuple(codes)
            continue
        assigned = _reassign(e, codes, codebooks, used)
        if assigned is None:
            raise RuntimeError(
                f"docid capacity exhausted while assigning {key}: "
                f"no free code near prefix {tuple(codes[:-1])}"
            )
        used[assigned] = key
        table[key] = assigned
    return table


def _residual_before(e, codes, codebooks, level):
    """Residual entering `level` (1-based) given the chosen prefix codes."""
    r = e.copy()
    for m in range(level - 1):
        r -= codebooks.centroids[m][codes[m] - 1]
    return r


def _reassign(e, codes, codebooks, used):
    """Cascade from the last level upward looking for a free code sequence."""
    M = codebooks.M
    for level in range(M, 0, -1):
        r = _residual_before(e, codes, codebooks, level)
        dists = ((codebooks.centroids[level - 1] - r) ** 2).sum(axis=1)
        order = np.argsort(dists, kind="stable")  # ties -> lowest index
        for j in order:
            cand = list(codes[: level - 1]) + [int(j) + 1]
            # complete greedily below the changed level
            rr = r - codebooks.centroids[level - 1][j]
            for m in range(level, M - 1):
                d = ((codebooks.centroids[m] - rr) ** 2).sum(axis=1)
                c = int(d.argmin())
                cand.append(c + 1)
                rr = rr - codebooks.centroids[m][c]
            if level <= M - 1:
                # last level: nearest unused centroid under this prefix
                d = ((codebooks.centroids[M - 1] - rr) ** 2).sum(axis=1)
                last = None
                for jj in np.argsort(d, kind="stable"):
                    if tuple(cand + [int(jj) + 1]) not in used:
                        last = int(jj) + 1
                        break
                if last is None:
                    continue
                cand.append(last)
                return tuple(cand)
            if tuple(cand) not in used:
                return tuple(cand)
    return None


# ---------------------------------------------------------------------------
# vocabulary masks
# ---------------------------------------------------------------------------

def position_mask(position: int, layout: VocabLayout):
    """Binary mask over the extended vocabulary selecting segment `position`."""
    if not 1 <= position <= layout.M:
        raise ValueError(f"position {position} outside [1, {layout.M}]")
    mask = np.zeros(layout.extended_size, dtype=np.float64)
    start = layout.base_size + (position - 1) * layout.K
    mask[start : start + layout.K] = 1.0
    return mask


def apply_mask(logits, mask):
    """Replace masked-out entries with the most-negative finite float.

    Softmax of the result carries exactly zero mass outside the mask (the
    shifted exponentials underflow to 0) without the NaN risk of a literal
    -inf.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask)
    if logits.shape[-1] != mask.shape[-1]:
        raise ValueError(f"length mismatch: logits {logits.shape[-1]} vs mask {mask.shape[-1]}")
    return np.where(mask > 0, logits, MOST_NEGATIVE)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_embeddings(path, embeddings):
    """Binary matrix file: header <u32 dim><u64 count><u8 float width> + rows."""
    x = np.asarray(embeddings, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(struct.pack("<IQB", x.shape[1], x.shape[0], 8))
        f.write(x.astype("<f8").tobytes())


def load_embeddings(path):
    with open(path, "rb") as f:
        header = f.read(13)
        if len(header) != 13:
            raise ValueError(f"{path}: truncated embeddings header")
        dim, count, width = struct.unpack("<IQB", header)
        if width not in (4, 8):
            raise ValueError(f"{path}: unsupported float width {width}")
        dtype = "<f8" if width == 8 else "<f4"
        raw = f.read(count * dim * width)
        if len(raw) != count * dim * width:
            raise ValueError(f"{path}: truncated embeddings data")
        return np.frombuffer(raw, dtype=dtype).reshape(count, dim).astype(np.float64)


def save_codebooks(path, codebooks: RQCodebooks):
    """Versioned blob: magic, version, M, K, dim, centroid data."""
    with open(path, "wb") as f:
        f.write(CODEBOOK_MAGIC)
        f.write(struct.pack("<IIII", CODEBOOK_VERSION, codebooks.M, codebooks.K, codebooks.dim))
        f.write(codebooks.centroids.astype("<f8").tobytes())


def load_codebooks(path) -> RQCodebooks:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CODEBOOK_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, M, K, dim = struct.unpack("<IIII", f.read(16))
        if version != CODEBOOK_VERSION:
            raise ValueError(f"{path}: unsupported codebook version {version}")
        raw = f.read(M * K * dim * 8)
        if len(raw) != M * K * dim * 8:
            raise ValueError(f"{path}: truncated codebook data")
        return RQCodebooks(np.frombuffer(raw, dtype="<f8").reshape(M, K, dim).copy())


def save_docid_table(path, table: dict):
    """TSV rows `doc_key \\t c1,c2,...,cM`, ascending key order."""
    with open(path, "w", encoding="utf-8") as f:
        for key in sorted(table):
            f.write(f"{key}\t{','.join(str(c) for c in table[key])}\n")


def load_docid_table(path) -> dict:
    table = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            key, codes = line.split("\t")
            table[key] = tuple(int(c) for c in codes.split(","))
    if len(set(table.values())) != len(table):
        raise ValueError(f"{path}: duplicate code sequences in docid table")
    return table
