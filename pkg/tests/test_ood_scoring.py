import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import exhaustive_mask_logit, kth_distance_full_sort, mahalanobis_solve
from subknn import ood_scoring as osc
from subknn import trainer
from subknn.numcore import ContractError, DegenerateEmbeddingError, Rng, l2_normalize_rows
from subknn.snn_layer import SnnLayer


def unit_bank(n, m, seed):
    rng = Rng(seed)
    return osc.EmbeddingBank.build(rng.normal(size=(n, m)), rng.integers(0, 3, size=n))


def test_bank_invariants():
    bank = unit_bank(10, 4, 0)
    np.testing.assert_allclose(np.linalg.norm(bank.embeddings, axis=1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        bank.embeddings[0, 0] = 2.0
    with pytest.raises(ContractError):
        osc.EmbeddingBank(np.ones((2, 2)), [0, 1])
    with pytest.raises(DegenerateEmbeddingError):
        osc.EmbeddingBank.build(np.zeros((1, 3)), [0])


def test_knn_examples():
    bank = osc.EmbeddingBank.build([[1.0, 0.0], [-1.0, 0.0]], [0, 1])
    assert osc.knn_score(bank, [[5.0, 0.0]], 1)[0] == 0.0
    assert osc.knn_score(bank, [[1.0, 0.0]], 2)[0] == -2.0
    with pytest.raises(ContractError):
        osc.knn_score(bank, [[1.0, 0.0]], 3)
    with pytest.raises(ContractError):
        osc.knn_score(bank, [[1.0, 0.0, 0.0]], 1)


def test_knn_matches_full_sort_small():
    bank = unit_bank(50, 8, 1)
    q = Rng(2).normal(size=(30, 8))
    expect = kth_distance_full_sort(bank.embeddings, q, 7)
    assert np.array_equal(-osc.knn_score(bank, q, 7), expect)


def test_knn_exact_with_duplicate_distances():
    # many bank rows at exactly the same distance from the query
    rows = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [0.0, 1.0], [-1.0, 0.0]])
    bank = osc.EmbeddingBank.build(rows, np.zeros(5, dtype=int))
    q = np.array([[1.0, 0.0]])
    for k in range(1, 6):
        assert osc.kth_neighbor_distance(bank, q, k)[0] == kth_distance_full_sort(bank.embeddings, q, k)[0]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(1, 12), st.integers(0, 2**32))
def test_knn_distance_bounds_and_superset(n, m, seed):
    rng = Rng(seed)
    feats = rng.normal(size=(n + 5, m))
    small = osc.EmbeddingBank.build(feats[:n], np.zeros(n, dtype=int))
    big = osc.EmbeddingBank.build(feats, np.zeros(n + 5, dtype=int))
    q = rng.normal(size=(4, m))
    k = int(rng.integers(1, n + 1))
    d_small = osc.kth_neighbor_distance(small, q, k)
    d_big = osc.kth_neighbor_distance(big, q, k)
    assert np.all(d_small >= 0) and np.all(d_small <= 2.0 + 1e-12)
    assert np.all(d_big <= d_small + 1e-12)


def test_distances_to_bank_explicit():
    bank = unit_bank(20, 5, 3)
    q = l2_normalize_rows(Rng(4).normal(size=(3, 5)))
    d = osc.distances_to_bank(bank, q)
    for i in range(3):
        for j in range(20):
            assert d[i, j] == np.sqrt(((q[i] - bank.embeddings[j]) ** 2).sum())


def test_mahalanobis_identity_covariance():
    model = osc.MahalanobisModel.from_parameters(np.zeros((1, 3)), np.eye(3))
    z = l2_normalize_rows(Rng(5).normal(size=(4, 3)))
    np.testing.assert_allclose(osc.mahalanobis_score(model, z), -np.sum(z * z, axis=1), atol=1e-15)
    raw = Rng(5).normal(size=(4, 3))
    np.testing.assert_allclose(osc.mahalanobis_score(model, raw, normalize=False),
                               -np.sum(raw * raw, axis=1), atol=1e-12)


def test_mahalanobis_query_at_mean_scores_zero():
    rng = Rng(6)
    model = osc.MahalanobisModel.fit(np.abs(rng.normal(size=(60, 3))), np.arange(60) % 2, 2)
    # fitted means are not unit norm, so feed them without re-normalizing
    at_mean = osc.mahalanobis_score(model, model.means, normalize=False)
    np.testing.assert_allclose(at_mean, 0.0, atol=1e-12)
    assert np.all(osc.mahalanobis_score(model, rng.normal(size=(20, 3))) <= 0.0)


def test_mahalanobis_matches_solve_oracle():
    rng = Rng(7)
    feats, labels = rng.normal(size=(40, 3)), np.arange(40) % 2
    model = osc.MahalanobisModel.fit(feats, labels, 2)
    cov = model.covariance + model.ridge * np.eye(3)
    np.testing.assert_allclose(model.covariance, model.covariance.T, atol=1e-15)
    np.linalg.cholesky(cov)
    q = rng.normal(size=(10, 3))
    z = l2_normalize_rows(q)
    oracle = [mahalanobis_solve(model.means, cov, row) for row in z]
    np.testing.assert_allclose(osc.mahalanobis_score(model, q), oracle, rtol=1e-8, atol=1e-8)


def test_mahalanobis_ridge_handles_rank_deficiency():
    # normalized features in 3-D with only two informative directions
    feats = np.zeros((30, 3))
    feats[:, :2] = Rng(8).normal(size=(30, 2))
    model = osc.MahalanobisModel.fit(feats, np.zeros(30, dtype=int), 1)
    assert model.ridge > 0
    assert np.all(np.isfinite(model.precision))


def test_msp_examples():
    assert np.allclose(osc.msp_from_logits(np.zeros((2, 4))), 0.25)
    assert osc.msp_from_logits([[1000.0, 0.0, 0.0]])[0] == pytest.approx(1.0)
    z = Rng(9).normal(size=(10, 5))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    np.testing.assert_allclose(osc.msp_from_logits(z), (e / e.sum(axis=1, keepdims=True)).max(axis=1),
                               atol=1e-15)


def test_msp_score_on_model():
    model = trainer.build_model(4, (5,), 3, 0.6, 0)
    x = Rng(10).normal(size=(6, 4))
    np.testing.assert_allclose(osc.msp_score(model, x), osc.msp_from_logits(trainer.logits(model, x)))


def test_random_subspace_mask():
    assert osc.random_subspace_mask(5, 5, Rng(0)).indices == (0, 1, 2, 3, 4)
    a = osc.random_subspace_mask(10, 4, Rng(1).substream("c"))
    assert a == osc.random_subspace_mask(10, 4, Rng(1).substream("c"))
    assert len(a.indices) == 4 and list(a.indices) == sorted(set(a.indices))
    with pytest.raises(ContractError):
        osc.random_subspace_mask(3, 0, Rng(0))


def test_random_subspace_mask_uniform():
    rng = Rng(11)
    n = 100_000
    counts = np.zeros(3)
    for _ in range(n):
        counts[osc.random_subspace_mask(3, 1, rng).indices[0]] += 1
    np.testing.assert_allclose(counts / n, 1 / 3, atol=0.02)


def test_random_subspace_masks_shape():
    masks = osc.random_subspace_masks(4, 10, 3, seed=2)
    assert masks.shape == (4, 10) and np.all(masks.sum(axis=1) == 3)
    assert np.array_equal(masks, osc.random_subspace_masks(4, 10, 3, seed=2))


def test_least_relevance_forward():
    layer = SnnLayer(np.ones((1, 3)), np.zeros(1), r=2 / 3)
    assert osc.least_relevance_forward(layer, [[3.0, 1.0, 2.0]])[0, 0] == 3.0
    rng = Rng(13)
    w, b, h = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=(5, 4))
    np.testing.assert_allclose(osc.least_relevance_forward(SnnLayer(w, b, r=1.0), h), h @ w.T + b, atol=1e-12)
    out = osc.least_relevance_forward(SnnLayer(w, b, r=0.5), h)
    for i in range(5):
        for c in range(3):
            assert out[i, c] == pytest.approx(exhaustive_mask_logit(w[c], h[i], 2, b[c], best=min), abs=1e-12)


def test_masked_features_keeps_predicted_subspace():
    rng = Rng(14)
    layer = SnnLayer(rng.normal(size=(3, 6)), np.zeros(3), r=0.5)
    h = np.abs(rng.normal(size=(4, 6)))
    out = osc.masked_features(layer, h)
    assert np.all((out == 0) | (out == h))
    assert np.all(np.count_nonzero(out, axis=1) <= 3)


def test_bank_file_round_trip(tmp_path):
    bank = unit_bank(7, 3, 15)
    path = tmp_path / "b.emb"
    osc.save_bank(path, bank.embeddings, bank.labels)
    emb, labels = osc.load_bank(path)
    assert np.array_equal(emb, bank.embeddings) and np.array_equal(labels, bank.labels)
    assert path.read_bytes()[:4] == b"EMB1"
    assert len(path.read_bytes()) == 4 + 16 + 7 * 3 * 8 + 7 * 4
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(ValueError):
        osc.load_bank(path)


def test_scores_csv(tmp_path):
    path = tmp_path / "s.csv"
    osc.write_scores_csv(path, [0.1, -2.0])
    assert path.read_text() == "sample_id,score\n0,0.10000000000000001\n1,-2\n"
