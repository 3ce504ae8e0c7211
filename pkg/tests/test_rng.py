import numpy as np
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from ssldg.rng import KeyedRNG, truncated_normal


def test_same_key_same_stream():
    a = KeyedRNG(1, 2, 3).generator().random(5)
    b = KeyedRNG(1, 2).child(3).generator().random(5)
    np.testing.assert_array_equal(a, b)


def test_prefix_keys_differ():
    # (1, 2) and (1, 2, 0) must not alias
    a = KeyedRNG(1, 2).generator().random(4)
    b = KeyedRNG(1, 2, 0).generator().random(4)
    assert not np.array_equal(a, b)


def test_sibling_streams_uncorrelated():
    a = KeyedRNG(0, 1).generator().standard_normal(20000)
    b = KeyedRNG(0, 2).generator().standard_normal(20000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.03


@given(st.integers(0, 2**31), st.floats(-1, 1), st.floats(0.01, 2))
def test_truncated_normal_bounds(seed, mean, std):
    g = np.random.default_rng(seed)
    for _ in range(20):
        x = truncated_normal(g, mean, std)
        assert abs(x - mean) <= 2 * std + 1e-12


def test_truncated_normal_zero_std():
    assert truncated_normal(np.random.default_rng(0), 0.7, 0.0) == 0.7


def test_truncated_normal_matches_scipy():
    g = KeyedRNG(5).generator()
    xs = [truncated_normal(g, 1.0, 0.3) for _ in range(4000)]
    ref = stats.truncnorm(-2, 2, loc=1.0, scale=0.3)
    assert stats.kstest(xs, ref.cdf).pvalue > 1e-3
    assert abs(np.std(xs) - ref.std()) < 0.01
