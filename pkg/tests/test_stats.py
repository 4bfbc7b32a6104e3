import csv
import io
import math

import numpy as np
import pytest

from conftest import (
    oracle_m_corr,
    oracle_m_std,
    oracle_pearson,
    oracle_similarity,
    oracle_topk_corr,
    random_activations,
)
from fmprune import stats
from fmprune.errors import DegenerateSpatial, KTooLarge
from fmprune.stats import FeatureStats, SimilarityMatrix
from fmprune.tensorio import ActivationSet


def acts_from(arr, layer_id="L"):
    return ActivationSet(layer_id=layer_id, samples=np.asarray(arr, dtype=np.float64))


def sim_from(values):
    v = np.asarray(values, dtype=np.float64)
    return SimilarityMatrix(layer_id="L", channel_ids=list(range(len(v))), values=v)


# ------------------------------------------------------------- m_std


def test_m_std_constant_channel_is_zero():
    a = acts_from(np.full((3, 2, 4, 4), 7.5))
    np.testing.assert_array_equal(stats.compute_m_std(a), [0.0, 0.0])


def test_m_std_hand_value():
    # 2x2 map [[0,0],[1,1]]: mean 0.5, squared deviations sum 1.0, ddof 3
    a = acts_from([[[[0.0, 0.0], [1.0, 1.0]]]])
    got = stats.compute_m_std(a)
    assert got[0] == pytest.approx(math.sqrt(1.0 / 3.0), abs=1e-12)


def test_m_std_two_sample_average(rng):
    a = rng.standard_normal((2, 1, 4, 4))
    got = stats.compute_m_std(acts_from(a))
    s1 = oracle_m_std(a[:1])[0]
    s2 = oracle_m_std(a[1:])[0]
    assert got[0] == pytest.approx((s1 + s2) / 2.0, abs=1e-9)


def test_m_std_degenerate_spatial():
    with pytest.raises(DegenerateSpatial):
        stats.compute_m_std(acts_from(np.ones((2, 3, 1, 1))))


# ------------------------------------------------------- similarity


def test_similarity_identical_channels():
    ch = np.arange(16.0).reshape(4, 4)
    a = acts_from(np.stack([np.stack([ch, ch])] * 3))
    sim = stats.compute_similarity_matrix(a)
    np.testing.assert_allclose(sim.values, np.ones((2, 2)))


def test_similarity_orthogonal():
    m = np.zeros((1, 2, 2, 2))
    m[0, 0, 0, 0] = 1.0
    m[0, 1, 0, 1] = 1.0
    sim = stats.compute_similarity_matrix(acts_from(m))
    assert sim.values[0, 1] == 0.0


def test_similarity_hand_value():
    m = np.zeros((1, 2, 1, 2))
    m[0, 0] = [[1.0, 0.0]]
    m[0, 1] = [[1.0, 1.0]]
    sim = stats.compute_similarity_matrix(acts_from(m))
    assert sim.values[0, 1] == pytest.approx(1.0 / math.sqrt(2.0), abs=1e-12)


def test_similarity_zero_channel_rule():
    m = np.zeros((1, 2, 2, 2))
    m[0, 1] = 1.0
    sim = stats.compute_similarity_matrix(acts_from(m))
    assert sim.values[0, 0] == 0.0  # zero channel's own diagonal
    assert sim.values[0, 1] == 0.0
    assert sim.values[1, 1] == 1.0


def test_similarity_exact_symmetry(rng):
    a = random_activations(rng)
    sim = stats.compute_similarity_matrix(a)
    assert np.array_equal(sim.values, sim.values.T)


# ----------------------------------------------------------- m_corr


def test_m_corr_identical_layer():
    n = 5
    sim = sim_from(np.ones((n, n)))
    np.testing.assert_array_equal(stats.compute_m_corr(sim), np.ones(n))


def test_m_corr_includes_self_pair():
    sim = sim_from([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(stats.compute_m_corr(sim), [0.5, 0.5])


def test_m_corr_oracle(rng):
    a = random_activations(rng, n=6)
    sim = stats.compute_similarity_matrix(a)
    np.testing.assert_allclose(
        stats.compute_m_corr(sim), oracle_m_corr(sim.values), atol=1e-9
    )


# ------------------------------------------------------- topk_corr


def test_topk_two_channels():
    sim = sim_from([[1.0, 0.4], [0.4, 1.0]])
    np.testing.assert_allclose(stats.compute_topk_corr(sim, 1), [0.4, 0.4])


def test_topk_mean_of_two_largest():
    v = np.eye(4)
    v[0, 1:] = v[1:, 0] = [0.9, 0.2, 0.1]
    v[1, 2] = v[2, 1] = 0.0
    v[1, 3] = v[3, 1] = 0.0
    v[2, 3] = v[3, 2] = 0.0
    got = stats.compute_topk_corr(sim_from(v), 2)
    assert got[0] == pytest.approx(0.55, abs=1e-12)


def test_topk_k_too_large():
    sim = sim_from(np.eye(3))
    with pytest.raises(KTooLarge):
        stats.compute_topk_corr(sim, 3)


def test_topk_oracle(rng):
    for _ in range(20):
        a = random_activations(rng)
        sim = stats.compute_similarity_matrix(a)
        k = int(rng.integers(1, sim.size))
        np.testing.assert_allclose(
            stats.compute_topk_corr(sim, k), oracle_topk_corr(sim.values, k), atol=1e-9
        )


# ------------------------------------------------------- properties


def test_oracle_equivalence_suite(rng):
    for _ in range(50):
        a = random_activations(rng)
        sim = stats.compute_similarity_matrix(a)
        np.testing.assert_allclose(stats.compute_m_std(a), oracle_m_std(a.samples), atol=1e-9)
        np.testing.assert_allclose(sim.values, oracle_similarity(a.samples), atol=1e-9)


def test_positive_scaling(rng):
    a = random_activations(rng, n=4)
    c = 3.75
    scaled = a.samples.copy()
    scaled[:, 2] *= c
    b = ActivationSet(layer_id="L", samples=scaled)
    std_a, std_b = stats.compute_m_std(a), stats.compute_m_std(b)
    assert std_b[2] == pytest.approx(c * std_a[2], rel=1e-9)
    sim_a = stats.compute_similarity_matrix(a).values
    sim_b = stats.compute_similarity_matrix(b).values
    np.testing.assert_allclose(sim_b[2], sim_a[2], atol=1e-12)


def test_permutation_equivariance(rng):
    a = random_activations(rng, n=6)
    perm = rng.permutation(6)
    b = ActivationSet(layer_id="L", samples=a.samples[:, perm])
    np.testing.assert_array_equal(stats.compute_m_std(b), stats.compute_m_std(a)[perm])
    sim_a = stats.compute_similarity_matrix(a).values
    sim_b = stats.compute_similarity_matrix(b).values
    np.testing.assert_array_equal(sim_b, sim_a[np.ix_(perm, perm)])


def test_float32_inputs_accumulate_in_float64(rng):
    a = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
    acts = acts_from(a)
    got = stats.compute_m_std(acts)
    assert got.dtype == np.float64
    np.testing.assert_allclose(got, oracle_m_std(a.astype(np.float64)), atol=1e-5)


# ----------------------------------------------------------- report


def _layer_stats(rng, layer_id="L", n=4):
    a = random_activations(rng, layer_id=layer_id, n=n)
    return stats.compute_layer_stats(a, k=2)


def test_report_row_counts(rng):
    st = _layer_stats(rng, n=2)
    rows = list(csv.reader(io.StringIO(stats.stats_report([st]))))
    assert rows[0] == ["layer_id", "channel", "m_std", "m_corr", "topk_corr"]
    assert len(rows) == 1 + 2 + 1 + 1
    assert rows[3][1] == "ALL"
    assert rows[4][:2] == ["ALL", "PEARSON"]


def test_report_pearson_anticorrelated():
    st = FeatureStats(
        layer_id="L",
        m_std=np.array([0.1, 0.2, 0.3, 0.4]),
        m_corr=np.array([0.9, 0.8, 0.7, 0.6]),
    )
    rows = list(csv.reader(io.StringIO(stats.stats_report([st]))))
    assert float(rows[-1][2]) == pytest.approx(-1.0, abs=1e-12)


def test_report_pearson_oracle(rng):
    sts = [_layer_stats(rng, layer_id=f"L{i}") for i in range(3)]
    rows = list(csv.reader(io.StringIO(stats.stats_report(sts))))
    all_std = np.concatenate([s.m_std for s in sts])
    all_corr = np.concatenate([s.m_corr for s in sts])
    assert float(rows[-1][2]) == pytest.approx(
        oracle_pearson(all_std.tolist(), all_corr.tolist()), abs=1e-9
    )


def test_report_nine_significant_digits():
    st = FeatureStats(
        layer_id="L",
        m_std=np.array([1.0 / 3.0, 0.25]),
        m_corr=np.array([0.5, 0.5]),
    )
    out = stats.stats_report([st])
    assert "0.333333333" in out
