import numpy as np
from hypothesis import given, strategies as st

from neemtrace.prng import MASK64, SplitMix64, derive_seed


def reference(seed, n):
    """Independent splitmix64 on numpy uint64 wrap-around arithmetic."""
    out = []
    s = np.uint64(seed)
    with np.errstate(over="ignore"):
        for _ in range(n):
            s = s + np.uint64(0x9E3779B97F4A7C15)
            z = s
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            out.append(int(z ^ (z >> np.uint64(31))))
    return out


def test_published_vectors_seed_zero():
    r = SplitMix64(0)
    assert [r.next_u64() for _ in range(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


@given(st.integers(0, MASK64))
def test_matches_numpy_reference(seed):
    r = SplitMix64(seed)
    assert [r.next_u64() for _ in range(8)] == reference(seed, 8)


@given(st.integers(0, MASK64), st.integers(0, 100_000))
def test_symmetric_bounds(seed, bound):
    r = SplitMix64(seed)
    for _ in range(20):
        assert -bound <= r.symmetric(bound) <= bound


def test_pour_epsilon_formula():
    a, b = SplitMix64(99), SplitMix64(99)
    for _ in range(100):
        assert a.symmetric(20_000) == b.next_u64() % 40001 - 20000


def test_chance_extremes():
    r = SplitMix64(5)
    assert all(r.chance_ppm(1_000_000) for _ in range(100))
    assert not any(r.chance_ppm(0) for _ in range(100))


def test_side_stream_differs():
    assert derive_seed(7, 1) != 7
    assert SplitMix64(derive_seed(7, 1)).next_u64() != SplitMix64(7).next_u64()
