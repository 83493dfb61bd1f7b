"""Residual quantization: k-means identities, greedy encoding vs an
exhaustive oracle, collision cascades, and mask soundness."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cldsi import rq
from cldsi.rq import (
    RQCodebooks,
    VocabLayout,
    apply_mask,
    assign_unique_docids,
    encode,
    encode_batch,
    kmeans,
    position_mask,
    reconstruction_mse,
    train_codebooks,
)


def softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


# -- k-means / codebook training ----------------------------------------------


def test_kmeans_k1_is_mean():
    x = np.array([[0.0, 0.0], [2.0, 2.0]])
    centers, assign = kmeans(x, 1, iters=5, rng=np.random.default_rng(0))
    np.testing.assert_allclose(centers[0], [1.0, 1.0])
    assert list(assign) == [0, 0]


def test_second_level_k1_is_mean_residual():
    # same identity applied to residuals: fit one centroid, then the next
    # level's single centroid must equal the mean residual
    x = np.random.default_rng(3).normal(size=(10, 2))
    c1, _ = kmeans(x, 1, iters=5, rng=np.random.default_rng(0))
    resid = x - c1[0]
    c2, _ = kmeans(resid, 1, iters=5, rng=np.random.default_rng(1))
    np.testing.assert_allclose(c2[0], resid.mean(axis=0), atol=1e-12)


def test_codebooks_type_invariants():
    with pytest.raises(ValueError):
        RQCodebooks(np.zeros((0, 4, 2)))
    with pytest.raises(ValueError):
        RQCodebooks(np.zeros((1, 1, 2)))  # K >= 2
    with pytest.raises(ValueError):
        RQCodebooks(np.full((1, 2, 2), np.inf))


def test_train_codebooks_requires_enough_points():
    with pytest.raises(ValueError):
        train_codebooks(np.zeros((3, 2)), M=1, K=4)


def test_degenerate_identical_embeddings_allowed():
    x = np.ones((10, 3))
    books = train_codebooks(x, M=2, K=2, iters=3, seed=0)
    codes = encode_batch(x, books)
    assert codes.shape == (10, 2)  # duplicated centroids are fine


def test_mse_non_increasing_in_levels():
    x = np.random.default_rng(7).normal(size=(64, 6))
    books = train_codebooks(x, M=4, K=4, iters=20, seed=1)
    mses = [reconstruction_mse(x, books, levels=m) for m in range(1, 5)]
    assert all(a >= b - 1e-12 for a, b in zip(mses, mses[1:]))
    # and quantizing at all helps versus the raw second moment
    assert mses[0] <= (x ** 2).sum(axis=1).mean()


def test_mse_m2_not_worse_than_m1_small_random_set():
    x = np.random.default_rng(11).normal(size=(32, 4))
    books = train_codebooks(x, M=2, K=4, iters=15, seed=2)
    assert reconstruction_mse(x, books, 2) <= reconstruction_mse(x, books, 1) + 1e-12


def test_train_codebooks_deterministic():
    x = np.random.default_rng(5).normal(size=(40, 3))
    b1 = train_codebooks(x, M=3, K=4, iters=10, seed=9)
    b2 = train_codebooks(x, M=3, K=4, iters=10, seed=9)
    np.testing.assert_array_equal(b1.centroids, b2.centroids)


# -- greedy encoding -----------------------------------------------------------


def test_encode_1d_example():
    books = RQCodebooks(np.array([[[0.0], [10.0]], [[-2.0], [1.0]]]))
    codes = encode(np.array([9.0]), books)
    assert codes == (2, 1)
    rec = rq.reconstruct(codes, books)
    np.testing.assert_allclose(rec, [8.0])


def test_encode_exact_representability():
    books = RQCodebooks(
        np.stack([np.array([[1.0, 2.0], [3.0, -1.0]]), np.array([[0.0, 0.0], [5.0, 5.0]])])
    )
    codes = encode(np.array([3.0, -1.0]), books)
    assert codes == (2, 1)
    np.testing.assert_allclose(rq.reconstruct(codes, books), [3.0, -1.0])


def test_encode_tie_breaks_to_lowest_index():
    books = RQCodebooks(np.array([[[-1.0], [1.0]], [[0.0], [2.0]]]))
    # 0 is equidistant from -1 and 1 -> lowest index wins
    assert encode(np.array([0.0]), books)[0] == 1


def test_encode_dimension_mismatch():
    books = RQCodebooks(np.zeros((1, 2, 3)))
    with pytest.raises(ValueError):
        encode(np.zeros(2), books)


def exhaustive_encode(e, books):
    """Oracle: per level, scan every centroid distance explicitly."""
    residual = np.asarray(e, dtype=float).copy()
    codes = []
    for m in range(books.M):
        dists = [float(((books.centroids[m][k] - residual) ** 2).sum()) for k in range(books.K)]
        best = min(range(books.K), key=lambda k: (dists[k], k))
        codes.append(best + 1)
        residual = residual - books.centroids[m][best]
    return tuple(codes)


def test_encode_matches_exhaustive_oracle():
    rng = np.random.default_rng(21)
    books = train_codebooks(rng.normal(size=(60, 5)), M=3, K=6, iters=10, seed=3)
    for _ in range(100):
        e = rng.normal(size=5)
        assert encode(e, books) == exhaustive_encode(e, books)


def test_greedy_level_optimality():
    # invariant: at every level the chosen centroid attains the minimum distance
    rng = np.random.default_rng(2)
    books = train_codebooks(rng.normal(size=(50, 4)), M=3, K=5, iters=10, seed=4)
    e = rng.normal(size=4)
    codes = encode(e, books)
    residual = e.copy()
    for m, c in enumerate(codes):
        d = ((books.centroids[m] - residual) ** 2).sum(axis=1)
        assert d[c - 1] == d.min()
        residual = residual - books.centroids[m][c - 1]


# -- unique docid assignment ----------------------------------------------------


def _books_2x2():
    return RQCodebooks(np.array([[[0.0], [10.0]], [[-1.0], [1.0]]]))


def test_identical_embeddings_differ_in_last_position():
    books = _books_2x2()
    table = assign_unique_docids({"a": [0.1], "b": [0.1]}, books)
    assert table["a"][:1] == table["b"][:1]
    assert table["a"][1] != table["b"][1]


def test_no_collisions_is_raw_encoding():
    books = _books_2x2()
    emb = {"a": [0.5], "b": [9.5]}
    table = assign_unique_docids(emb, books)
    for k, e in emb.items():
        assert table[k] == encode(np.array(e), books)


def test_three_way_collision_cascades_to_level_one():
    books = _books_2x2()
    table = assign_unique_docids({"a": [0.1], "b": [0.1], "c": [0.1]}, books)
    assert len(set(table.values())) == 3
    # oracle: enumerate the stated rule by hand.  a -> greedy (1, c).  b ->
    # last level reassigned under prefix 1.  c -> prefix 1 exhausted, so the
    # first level moves to the other centroid.
    assert table["a"][0] == 1 and table["b"][0] == 1
    assert table["c"][0] == 2


def test_capacity_exhaustion_raises():
    books = _books_2x2()
    emb = {f"d{i}": [0.1] for i in range(5)}  # capacity 4 = K^M
    with pytest.raises(RuntimeError):
        assign_unique_docids(emb, books)


def test_docid_table_bijectivity():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(50, 4))
    books = train_codebooks(x, M=3, K=4, iters=10, seed=5)
    emb = {f"d{i:03d}": x[i] for i in range(50)}
    table = assign_unique_docids(emb, books)
    inverse = {codes: key for key, codes in table.items()}
    assert all(inverse[table[k]] == k for k in emb)


def test_existing_table_respected():
    books = _books_2x2()
    existing = {"x": (1, 1)}
    table = assign_unique_docids({"a": [0.1]}, books, existing=existing)
    assert table["x"] == (1, 1)
    assert table["a"] != (1, 1)


# -- masks -----------------------------------------------------------------------


def test_position_mask_layout_examples():
    layout = VocabLayout(base_size=5, M=2, K=3)
    m1 = position_mask(1, layout)
    assert list(np.nonzero(m1)[0]) == [5, 6, 7]
    m2 = position_mask(2, layout)
    assert list(np.nonzero(m2)[0]) == [8, 9, 10]
    for pos in (1, 2):
        assert position_mask(pos, layout).sum() == 3
    with pytest.raises(ValueError):
        position_mask(3, layout)
    assert layout.extended_size == 5 + 2 * 3
    assert layout.segment_offsets == (5, 8)


def test_apply_mask_uniform_within_segment():
    layout = VocabLayout(base_size=5, M=2, K=3)
    out = apply_mask(np.zeros(layout.extended_size), position_mask(1, layout))
    p = softmax(out)
    np.testing.assert_allclose(p[5:8], 1 / 3, atol=1e-12)
    assert p[:5].sum() + p[8:].sum() == 0.0


def test_apply_mask_identity_when_all_ones():
    logits = np.arange(6.0)
    np.testing.assert_array_equal(apply_mask(logits, np.ones(6)), logits)


def test_apply_mask_two_element_softmax():
    logits = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    mask = np.array([0, 0, 0, 1, 1.0])
    p = softmax(apply_mask(logits, mask))
    # oracle: direct two-element softmax
    np.testing.assert_allclose(p[3:], [1 / (1 + np.e), np.e / (1 + np.e)], atol=1e-9)
    np.testing.assert_allclose(p[3:], [0.2689, 0.7311], atol=1e-4)


def test_apply_mask_length_mismatch():
    with pytest.raises(ValueError):
        apply_mask(np.zeros(4), np.ones(5))


@settings(max_examples=60, deadline=None)
@given(
    logits=st.lists(st.floats(-50, 50), min_size=11, max_size=11),
    position=st.integers(1, 2),
)
def test_mask_soundness_property(logits, position):
    layout = VocabLayout(base_size=5, M=2, K=3)
    p = softmax(apply_mask(np.array(logits), position_mask(position, layout)))
    seg = slice(layout.base_size + (position - 1) * 3, layout.base_size + position * 3)
    outside = p.sum() - p[seg].sum()
    assert outside < 1e-12
    assert abs(p.sum() - 1.0) < 1e-9


# -- file formats ------------------------------------------------------------------


def test_embeddings_roundtrip(tmp_path):
    x = np.random.default_rng(0).normal(size=(7, 3))
    path = tmp_path / "emb.bin"
    rq.save_embeddings(path, x)
    np.testing.assert_array_equal(rq.load_embeddings(path), x)


def test_codebooks_roundtrip_and_validation(tmp_path):
    books = train_codebooks(np.random.default_rng(1).normal(size=(20, 3)), M=2, K=4, iters=5, seed=0)
    path = tmp_path / "cb.bin"
    rq.save_codebooks(path, books)
    loaded = rq.load_codebooks(path)
    np.testing.assert_array_equal(loaded.centroids, books.centroids)
    raw = path.read_bytes()
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        rq.load_codebooks(bad)
    trunc = tmp_path / "trunc.bin"
    trunc.write_bytes(raw[:-9])
    with pytest.raises(ValueError):
        rq.load_codebooks(trunc)


def test_docid_table_roundtrip(tmp_path):
    table = {"d1": (1, 2), "d0": (2, 2)}
    path = tmp_path / "docids.tsv"
    rq.save_docid_table(path, table)
    assert rq.load_docid_table(path) == table
    text = path.read_text().splitlines()
    assert text[0] == "d0\t2,2"  # ascending key order, `key \t c1,c2` rows
