import itertools

import numpy as np
import pytest
from scipy import stats

from gbcelab.sampling import (NegativeSampleSet, sample_negative_indices, sample_negatives, sampling_rate,
                              worker_rngs)


def test_two_item_catalog_has_one_candidate():
    got = sample_negatives(1, 2, 3, np.random.default_rng(0))
    np.testing.assert_array_equal(got.indices, [2, 2, 2])


def test_chi_square_uniformity():
    rng = np.random.default_rng(12345)
    pos = 417
    draws = sample_negative_indices(np.full(1_000_000, pos), 1000, 1, rng).ravel()
    counts = np.bincount(draws, minlength=1001)[1:]
    assert counts[pos - 1] == 0
    observed = np.delete(counts, pos - 1)
    assert stats.chisquare(observed).pvalue > 0.001


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_positive_never_sampled_exhaustive(n):
    rng = np.random.default_rng(n)
    for pos in range(1, n + 1):
        draws = sample_negative_indices(np.full(2000, pos), n, 4, rng)
        assert not np.any(draws == pos)
        assert set(np.unique(draws)) == set(range(1, n + 1)) - {pos}


def test_seeded_rng_reproducible():
    a = sample_negative_indices(np.array([3, 9]), 20, 5, np.random.default_rng(7))
    b = sample_negative_indices(np.array([3, 9]), 20, 5, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def test_history_exclusion_mode():
    draws = sample_negative_indices(np.array([1]), 6, 200, np.random.default_rng(0), history=[[2, 3]])
    assert set(np.unique(draws)) == {4, 5, 6}


def test_sample_set_validates():
    with pytest.raises(ValueError):
        NegativeSampleSet(2, np.array([1, 3]), excluded=3)


def test_invalid_arguments():
    with pytest.raises(ValueError):
        sample_negative_indices(np.array([1]), 1, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_negative_indices(np.array([1]), 5, 0, np.random.default_rng(0))


def test_sampling_rate_values():
    assert sampling_rate(1, 3416) == pytest.approx(2.928e-4, rel=1e-3)
    assert sampling_rate(256, 3416) == pytest.approx(0.07496, abs=5e-5)
    assert sampling_rate(3415, 3416) == 1.0


def test_worker_streams_are_independent_and_reproducible():
    a = [r.integers(0, 1 << 30, 4) for r in worker_rngs(3, 4)]
    b = [r.integers(0, 1 << 30, 4) for r in worker_rngs(3, 4)]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    assert not any(np.array_equal(x, y) for x, y in itertools.combinations(a, 2))
