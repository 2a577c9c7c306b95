import math
from itertools import combinations

import numpy as np
import pytest

from cltopk.compress import (
    CompressorKind,
    chunked_top_k_indices,
    expected_residual_oracle,
    hamming_distance,
    index_recall,
    measure_contraction,
    random_k_indices,
    sparsify,
    top_k_indices,
)
from cltopk.core import IndexSet, RngStream, UndefinedMetricError, densify, mean_of
from cltopk.theory import contraction_from_overlap


def test_top_k_magnitude_with_tie_break():
    # |-4| first; tie between the two 2s resolved to the lower index
    assert list(top_k_indices(np.array([0.1, -4.0, 2.0, 2.0, 0.0]), 2)) == [1, 2]


def test_top_k_singleton_and_full():
    assert list(top_k_indices(np.array([5.0]), 1)) == [0]
    assert list(top_k_indices(np.array([1.0, 1.0, 1.0]), 3)) == [0, 1, 2]


def test_top_k_matches_stable_sort_oracle():
    rng = RngStream(7)
    for _ in range(50):
        p = int(rng.integers(2, 30))
        v = np.round(rng.normal(size=p), 1)  # rounding forces ties
        k = int(rng.integers(1, p + 1))
        ranked = sorted(range(p), key=lambda i: (-abs(v[i]), i))
        assert list(top_k_indices(v, k)) == sorted(ranked[:k])


def test_top_k_rejects_bad_k():
    with pytest.raises(ValueError):
        top_k_indices(np.array([1.0, 2.0]), 3)
    with pytest.raises(ValueError):
        top_k_indices(np.array([1.0, 2.0]), 0)


def test_chunked_reduces_to_exact_with_one_chunk():
    assert list(chunked_top_k_indices(np.array([9.0, 1.0, 1.0, 8.0]), 2, 1)) == [0, 3]


def test_chunked_quota_example():
    # two chunks of two entries, one pick each by the ceil quota
    assert list(chunked_top_k_indices(np.array([9.0, 8.0, 1.0, 1.0]), 2, 2)) == [0, 2]


def test_chunked_k_equals_p():
    assert list(chunked_top_k_indices(np.ones(4), 4, 2)) == [0, 1, 2, 3]


def test_chunked_with_one_chunk_equals_exact_on_random_inputs():
    rng = RngStream(9)
    for _ in range(30):
        p = int(rng.integers(2, 60))
        v = rng.normal(size=p)
        k = int(rng.integers(1, p + 1))
        assert chunked_top_k_indices(v, k, 1) == top_k_indices(v, k)


def test_chunked_returns_exactly_k_and_recall_bounds():
    rng = RngStream(10)
    for _ in range(30):
        p = int(rng.integers(8, 120))
        v = rng.normal(size=p)
        k = int(rng.integers(1, p + 1))
        chunks = int(rng.integers(1, min(p, 9)))
        got = chunked_top_k_indices(v, k, chunks)
        assert got.k == k
        exact = top_k_indices(v, k)
        recall = index_recall(got, exact)
        assert 0.0 <= recall <= 1.0
        if chunks == 1:
            assert recall == 1.0


def test_sparsify_examples():
    s = sparsify(np.array([2.0, 0.1, 7.0]), IndexSet.from_indices([1]))
    assert list(s.support) == [1] and np.array_equal(s.values, [0.1])

    v = np.array([3.0, -5.0, 1.0])
    assert np.array_equal(densify(sparsify(v, IndexSet.from_indices([0, 1, 2]))), v)

    w = np.array([1.0, -3.0, 0.5])
    assert np.array_equal(densify(sparsify(w, top_k_indices(w, 1))), [0.0, -3.0, 0.0])


def test_sparsify_on_own_top_k_is_classical_top_k():
    rng = RngStream(12)
    for _ in range(20):
        p = int(rng.integers(2, 50))
        v = rng.normal(size=p)
        k = int(rng.integers(1, p + 1))
        dense = densify(sparsify(v, top_k_indices(v, k)))
        keep = np.zeros(p, dtype=bool)
        keep[np.argsort(-np.abs(v), kind="stable")[:k]] = True
        expected = np.where(keep, v, 0.0)
        assert np.array_equal(dense, expected)


def test_sparsify_rejects_out_of_range():
    with pytest.raises(ValueError):
        sparsify(np.array([1.0, 2.0]), IndexSet.from_indices([2]))


def test_random_k_exhaustive_cases():
    rng = RngStream(1)
    assert list(random_k_indices(3, 3, rng)) == [0, 1, 2]
    assert list(random_k_indices(1, 1, rng)) == [0]


def test_random_k_reproducible_given_stream():
    a = random_k_indices(100, 10, RngStream(77, stream=2))
    b = random_k_indices(100, 10, RngStream(77, stream=2))
    assert a == b
    assert a.k == 10 and all(0 <= i < 100 for i in a)


def test_hamming_examples():
    s = IndexSet.from_indices
    assert hamming_distance(s([1, 2, 3]), s([1, 2, 3])) == 0
    assert hamming_distance(s([1, 2, 3]), s([4, 5, 6])) == 6
    assert hamming_distance(s([1, 2, 3]), s([1, 2, 4])) == 2
    with pytest.raises(ValueError):
        hamming_distance(s([1]), s([1, 2]))


def test_hamming_symmetric_difference_oracle_and_metric_axioms():
    rng = RngStream(13)
    for _ in range(60):
        p = int(rng.integers(4, 40))
        k = int(rng.integers(1, p + 1))
        sets = [IndexSet(np.sort(rng.choice_without_replacement(p, k))) for _ in range(3)]
        a, b, c = sets
        sym = len(set(a) ^ set(b))
        assert hamming_distance(a, b) == sym
        assert hamming_distance(a, b) == hamming_distance(b, a)
        assert hamming_distance(a, a) == 0
        assert hamming_distance(a, c) <= hamming_distance(a, b) + hamming_distance(b, c)
        assert hamming_distance(a, b) % 2 == 0
        assert hamming_distance(a, b) <= 2 * k


def test_measure_contraction_examples():
    y = np.array([3.0, 4.0])
    est = measure_contraction(y, top_k_indices(y, 1))
    assert est.gamma == pytest.approx(0.36) and est.gamma0 == pytest.approx(0.36)
    assert est.d_over_k == 0.0 and not est.flagged

    full = measure_contraction(np.array([2.0, -1.0, 5.0]), IndexSet.from_indices([0, 1, 2]))
    assert full.gamma == 0.0

    worst = measure_contraction(y, IndexSet.from_indices([0]))
    assert worst.gamma == pytest.approx(0.64) and worst.d_over_k == 1.0

    with pytest.raises(UndefinedMetricError):
        measure_contraction(np.zeros(3), IndexSet.from_indices([0]))


def test_commutativity_of_restriction_and_averaging():
    rng = RngStream(21)
    for _ in range(50):
        n = int(rng.integers(1, 9))
        p = int(rng.integers(2, 64))
        k = int(rng.integers(1, p + 1))
        support = IndexSet(np.sort(rng.choice_without_replacement(p, k)))
        xs = [rng.normal(size=p) for _ in range(n)]
        lhs = densify(sparsify(mean_of(xs), support))
        rhs = mean_of([densify(sparsify(x, support)) for x in xs])
        scale = max(1.0, float(np.abs(lhs).max()))
        assert np.max(np.abs(lhs - rhs)) <= 1e-12 * scale


def test_oracle_d_zero_is_exact_top_k_residual():
    rng = RngStream(31)
    y = rng.normal(size=8)
    k = 3
    est = expected_residual_oracle(y, k, 0)
    kept = densify(sparsify(y, top_k_indices(y, k)))
    assert est.value == pytest.approx(float(np.sum((y - kept) ** 2)), rel=1e-12)
    assert est.exhaustive and est.stderr == 0.0


def test_oracle_d_equals_k_drops_all_energy():
    est = expected_residual_oracle(np.array([3.0, 4.0]), 1, 1)
    assert est.value == pytest.approx(25.0)


def test_oracle_closed_form_example():
    # y=[3,4,0,0], k=2, d=1: retained energy halves, residual 25 - 12.5
    est = expected_residual_oracle(np.array([3.0, 4.0, 0.0, 0.0]), 2, 1)
    assert est.value == pytest.approx(12.5)


def test_oracle_equals_enumeration_of_overlap_subsets():
    rng = RngStream(32)
    for _ in range(10):
        p = int(rng.integers(5, 10))
        y = rng.normal(size=p)
        k = int(rng.integers(1, 5))
        d = int(rng.integers(0, k + 1))
        top = top_k_indices(y, k).indices
        energy = float(np.dot(y, y))
        residuals = [
            energy - float(np.sum(y[list(subset)] ** 2))
            for subset in combinations(top.tolist(), k - d)
        ]
        est = expected_residual_oracle(y, k, d)
        assert est.value == pytest.approx(float(np.mean(residuals)), rel=1e-12)
        assert est.cases == math.comb(k, k - d)


def test_oracle_monte_carlo_within_standard_error():
    rng = RngStream(33)
    y = rng.normal(size=80)
    k, d = 40, 17
    top = top_k_indices(y, k).indices
    closed_form = float(np.dot(y, y)) - (k - d) / k * float(np.sum(y[top] ** 2))
    approx = expected_residual_oracle(
        y, k, d, rng=RngStream(5), exhaustive_limit=10, mc_samples=4000
    )
    assert not approx.exhaustive and approx.stderr > 0.0
    assert abs(approx.value - closed_form) <= 5.0 * approx.stderr


def test_oracle_respects_contraction_bound():
    rng = RngStream(34)
    for _ in range(20):
        p = int(rng.integers(4, 10))
        y = rng.normal(size=p)
        k = int(rng.integers(1, min(4, p) + 1))
        d = int(rng.integers(0, k + 1))
        energy = float(np.dot(y, y))
        gamma0 = measure_contraction(y, top_k_indices(y, k)).gamma0
        bound = contraction_from_overlap(d, k, gamma0) * energy
        est = expected_residual_oracle(y, k, d)
        assert est.value <= bound * (1.0 + 1e-12) + 1e-15


def test_oracle_rejects_bad_d():
    with pytest.raises(ValueError):
        expected_residual_oracle(np.array([1.0, 2.0]), 1, 2)


def test_compressor_kind_parsing():
    assert CompressorKind.parse("cyclic-topk").kind == "cyclic-topk"
    chunked = CompressorKind.parse("chunked-topk:16")
    assert chunked.chunks == 16 and chunked.label() == "chunked-topk:16"
    with pytest.raises(ValueError):
        CompressorKind.parse("nope")
    with pytest.raises(ValueError):
        CompressorKind.parse("identity:3")
