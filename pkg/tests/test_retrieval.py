import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hashgnn.graph import planted_block_graph, split_interactions
from hashgnn.hashing import pack_codes
from hashgnn.retrieval import (
    CodeMatrix,
    EmbeddingMatrix,
    continuous_scan,
    encode_all,
    hamming_distance,
    hamming_scan,
    hierarchical_search,
    recommend_all,
)
from hashgnn.trainer import ModelParams, TrainConfig


def signs(bits):
    return np.array([1.0 if b == "+" else -1.0 for b in bits])


# --- oracles: unpacked +-1 vectors and full lexicographic sorts ---------------------


def oracle_hamming(query_pm, items_pm, top, exclude=()):
    k = items_pm.shape[1]
    d = (k - items_pm @ query_pm) / 2
    keep = [i for i in range(len(d)) if i not in set(exclude)]
    keep.sort(key=lambda i: (d[i], i))
    return np.array(keep[:top], dtype=np.int64)


def oracle_continuous(query_z, items_z, top, exclude=()):
    s = items_z @ query_z
    keep = [i for i in range(len(s)) if i not in set(exclude)]
    keep.sort(key=lambda i: (-s[i], i))
    return np.array(keep[:top], dtype=np.int64)


def oracle_hier(query_pm, query_z, items_pm, items_z, m, top, exclude=()):
    short = oracle_hamming(query_pm, items_pm, m, exclude)
    s = items_z[short] @ query_z
    order = sorted(range(len(short)), key=lambda j: (-s[j], short[j]))
    return short[order][:top]


def random_items(n, k, seed, coarse=False):
    rng = np.random.default_rng(seed)
    z = rng.uniform(-1, 1, (n, k)).astype(np.float32)
    if coarse:
        z = np.round(z * 2) / 2.5  # many exact score ties
    return z


def test_hamming_distance_examples():
    a = pack_codes(signs("++--+-++")[None])[0]
    b = pack_codes(signs("+--++-++")[None])[0]
    assert hamming_distance(a, a) == 0
    assert hamming_distance(a, b) == 2
    assert (8 - signs("++--+-++") @ signs("+--++-++")) / 2 == 2
    comp = pack_codes(-signs("++--+-++")[None])[0]
    assert hamming_distance(a, comp) == 8
    with pytest.raises(ValueError):
        hamming_distance(a, np.zeros(2, dtype=np.uint64))


def test_hamming_identity_exhaustive_k4():
    rows = np.array(list(itertools.product([-1.0, 1.0], repeat=4)))
    packed = pack_codes(rows)
    for i, j in itertools.product(range(16), repeat=2):
        assert hamming_distance(packed[i], packed[j]) == (4 - rows[i] @ rows[j]) / 2


@settings(max_examples=100)
@given(st.sampled_from([32, 64, 68]), st.integers(0, 2**32 - 1))
def test_hamming_identity_random(k, seed):
    rng = np.random.default_rng(seed)
    a, b = np.where(rng.random((2, k)) < 0.5, -1.0, 1.0)
    pa, pb = pack_codes(np.stack([a, b]))
    assert hamming_distance(pa, pb) == (k - a @ b) / 2


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_hamming_metric_axioms(seed):
    rng = np.random.default_rng(seed)
    x, y, w = pack_codes(rng.uniform(-1, 1, (3, 68)))
    assert hamming_distance(x, y) == hamming_distance(y, x)
    assert (hamming_distance(x, y) == 0) == bool(np.all(x == y))
    assert hamming_distance(x, w) <= hamming_distance(x, y) + hamming_distance(y, w)


def test_query_equal_to_item_ranked_first():
    z = random_items(50, 32, 0)
    codes = CodeMatrix.from_embeddings(z)
    res = hamming_scan(codes.packed[17], codes, 5)
    assert res.indices[0] == 17 and res.scores[0] == 0


@pytest.mark.parametrize("k", [8, 32, 68])
def test_hamming_scan_matches_oracle(k):
    z = random_items(1000, k, k)
    codes = CodeMatrix.from_embeddings(z)
    pm = codes.unpack(np.float64)
    rng = np.random.default_rng(1)
    for q in rng.integers(0, 1000, 10):
        exclude = rng.choice(1000, 30, replace=False)
        for top in (1, 10, 100, 970):
            got = hamming_scan(codes.packed[q], codes, top, exclude).indices
            np.testing.assert_array_equal(got, oracle_hamming(pm[q], pm, top, exclude))


def test_exclude_all_but_one():
    z = random_items(20, 16, 0)
    codes = CodeMatrix.from_embeddings(z)
    res = hamming_scan(codes.packed[0], codes, 5, np.delete(np.arange(20), 7))
    assert res.indices.tolist() == [7]


@pytest.mark.parametrize("coarse", [False, True])
def test_continuous_scan_matches_oracle(coarse):
    z = random_items(1000, 32, 3, coarse)
    items = EmbeddingMatrix(z)
    rng = np.random.default_rng(2)
    for q in rng.integers(0, 1000, 10):
        exclude = rng.choice(1000, 25, replace=False)
        for top in (1, 10, 100):
            got = continuous_scan(z[q], items, top, exclude).indices
            np.testing.assert_array_equal(got, oracle_continuous(z[q], z, top, exclude))


def test_continuous_self_before_negation():
    q = np.array([0.3, -0.5, 0.9], dtype=np.float32)
    items = EmbeddingMatrix(np.stack([-q, q]))
    assert continuous_scan(q, items, 2).indices.tolist() == [1, 0]


def test_continuous_scale_invariance():
    z = random_items(300, 16, 4)
    a = continuous_scan(z[0], EmbeddingMatrix(z), 50).indices
    b = continuous_scan(z[0], EmbeddingMatrix(2 * z), 50).indices
    np.testing.assert_array_equal(a, b)


def test_hierarchical_matches_composed_oracle():
    z = random_items(1000, 32, 5)
    codes, embs = CodeMatrix.from_embeddings(z), EmbeddingMatrix(z)
    pm = codes.unpack(np.float64)
    rng = np.random.default_rng(3)
    for q in rng.integers(0, 1000, 10):
        exclude = rng.choice(1000, 20, replace=False)
        for m, top in ((100, 10), (50, 50), (500, 100)):
            got = hierarchical_search(codes.packed[q], z[q], codes, embs, m, top, exclude).indices
            np.testing.assert_array_equal(got, oracle_hier(pm[q], z[q], pm, z, m, top, exclude))


def test_hierarchical_full_shortlist_equals_continuous():
    z = random_items(400, 32, 6)
    codes, embs = CodeMatrix.from_embeddings(z), EmbeddingMatrix(z)
    exclude = np.arange(0, 400, 7)
    a = hierarchical_search(codes.packed[3], z[3], codes, embs, 400, 30, exclude)
    b = continuous_scan(z[3], embs, 30, exclude)
    np.testing.assert_array_equal(a.indices, b.indices)


def test_hierarchical_topn_equals_shortlist_reorders():
    z = random_items(300, 32, 7)
    codes, embs = CodeMatrix.from_embeddings(z), EmbeddingMatrix(z)
    short = hamming_scan(codes.packed[0], codes, 40).indices
    res = hierarchical_search(codes.packed[0], z[0], codes, embs, 40, 40).indices
    assert set(res.tolist()) == set(short.tolist())
    s = z[res] @ z[0]
    assert np.all(np.diff(s) <= 0)


def test_hierarchical_recall_monotone_in_shortlist():
    z = random_items(1000, 32, 8)
    codes, embs = CodeMatrix.from_embeddings(z), EmbeddingMatrix(z)
    target = set(continuous_scan(z[0], embs, 20).indices.tolist())
    prev = -1
    for m in (20, 40, 80, 160, 320, 640, 1000):
        got = hierarchical_search(codes.packed[0], z[0], codes, embs, m, 20).indices
        recall = len(target & set(got.tolist()))
        assert recall >= prev
        prev = recall
    assert prev == 20


def test_topn_larger_than_pool_truncates(caplog):
    z = random_items(10, 8, 0)
    res = hamming_scan(CodeMatrix.from_embeddings(z).packed[0], CodeMatrix.from_embeddings(z), 50, [0, 1])
    assert res.indices.size == 8
    assert "truncating" in caplog.text


def test_scan_results_deterministic():
    z = random_items(500, 32, 9, coarse=True)
    codes, embs = CodeMatrix.from_embeddings(z), EmbeddingMatrix(z)
    a = hierarchical_search(codes.packed[1], z[1], codes, embs, 100, 10).indices
    b = hierarchical_search(codes.packed[1], z[1], codes, embs, 100, 10).indices
    np.testing.assert_array_equal(a, b)


def _model_and_split():
    g, _, _ = planted_block_graph(30, 25, 3, 0.3, 0.05, seed=0)
    split = split_interactions(g, seed=0)
    cfg = TrainConfig(bits=12, feature_dim=8, hidden_dims=(8, 6), init_std=0.5)
    return ModelParams.init(g.num_nodes, cfg, np.random.default_rng(0)), split


def test_encode_all_shapes_and_consistency():
    params, split = _model_and_split()
    codes, embs = encode_all(params, split.train)
    assert codes.n == embs.n == split.train.num_users + split.train.num_items
    np.testing.assert_array_equal(codes.unpack(), np.where(embs.values >= 0, 1.0, -1.0))
    codes2, embs2 = encode_all(params, split.train)
    np.testing.assert_array_equal(codes.packed, codes2.packed)
    np.testing.assert_array_equal(embs.values, embs2.values)
    assert np.all(np.abs(embs.values) < 1)


def test_encode_all_rejects_mismatch():
    params, _ = _model_and_split()
    g, _, _ = planted_block_graph(10, 10, 2, 0.5, 0.1, seed=0)
    with pytest.raises(ValueError):
        encode_all(params, g)


def test_recommend_all_excludes_train_items():
    params, split = _model_and_split()
    codes, embs = encode_all(params, split.train)
    for mode in ("hamr", "hies", "ces"):
        res = recommend_all(codes, embs, split, mode, 5)
        for u, r in res.items():
            assert not set(r.indices.tolist()) & set(split.train.user_items(u).tolist())
