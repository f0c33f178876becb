import numpy as np
from hypothesis import given, strategies as st

from fedseg.rng import SplitMix64, derive_seed


def test_reference_vectors():
    gen = SplitMix64(0)
    assert [gen.next_u64() for _ in range(3)] == [
        0xE220A8397B1DCDAF,
        0x6E789E6AA1B965F4,
        0x06C45D188009454F,
    ]


@given(st.integers(0, 2**64 - 1), st.integers(0, 50))
def test_array_stream_matches_scalar_stream(seed, n):
    a, b = SplitMix64(seed), SplitMix64(seed)
    assert a.u64_array(n).tolist() == [b.next_u64() for _ in range(n)]
    assert a.next_u64() == b.next_u64()


def test_random_in_unit_interval():
    xs = SplitMix64(7).random_array(10_000)
    assert xs.min() >= 0.0 and xs.max() < 1.0
    assert abs(xs.mean() - 0.5) < 0.02


@given(st.integers(0, 2**64 - 1), st.integers(1, 1000))
def test_below_range(seed, n):
    gen = SplitMix64(seed)
    assert all(0 <= gen.below(n) < n for _ in range(20))


def test_shuffle_is_permutation_and_seeded():
    xs, ys = list(range(100)), list(range(100))
    SplitMix64(3).shuffle(xs)
    SplitMix64(3).shuffle(ys)
    assert xs == ys and sorted(xs) == list(range(100))
    zs = list(range(100))
    SplitMix64(4).shuffle(zs)
    assert zs != xs


def test_derive_seed_depends_on_key_order():
    assert derive_seed(1, 2, 3) != derive_seed(1, 3, 2)
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(5) == 5
