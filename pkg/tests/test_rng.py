import numpy as np

from ovseg.rng import GOLDEN, MASK64, SplitMix64, mix64


def test_known_sequence_is_stable():
    # Frozen reference values for seed 0; these pin the generator for good.
    rng = SplitMix64(0)
    got = [rng.next_u64() for _ in range(3)]
    assert got == [
        0xE220A8397B1DCDAF,
        0x6E789E6AA1B965F4,
        0x06C45D188009454F,
    ]


def test_golden_increment_reachable_from_seed():
    rng = SplitMix64(0)
    rng.next_u64()
    assert rng.state == GOLDEN


def test_array_draws_match_scalar_draws():
    a = SplitMix64(12345)
    b = SplitMix64(12345)
    arr = a.next_u64_array(257)
    scalars = np.array([b.next_u64() for _ in range(257)], dtype=np.uint64)
    assert np.array_equal(arr, scalars)
    # both generators must land on the same state afterwards
    assert a.state == b.state
    assert a.next_u64() == b.next_u64()


def test_doubles_in_unit_interval():
    rng = SplitMix64(7)
    xs = [rng.next_double() for _ in range(1000)]
    assert all(0.0 <= x < 1.0 for x in xs)
    assert abs(sum(xs) / len(xs) - 0.5) < 0.05


def test_randint_bounds_and_coverage():
    rng = SplitMix64(3)
    draws = [rng.randint(7) for _ in range(2000)]
    assert set(draws) == set(range(7))


def test_randrange_inclusive():
    rng = SplitMix64(9)
    draws = [rng.randrange(2, 4) for _ in range(500)]
    assert set(draws) == {2, 3, 4}


def test_uniform_array_matches_scalar_order():
    a = SplitMix64(42)
    b = SplitMix64(42)
    arr = a.uniform_array((3, 4), -0.05, 0.05)
    flat = [b.uniform(-0.05, 0.05) for _ in range(12)]
    assert np.allclose(arr.ravel(), flat, rtol=0, atol=0)
    assert arr.shape == (3, 4)
    assert np.all(arr >= -0.05) and np.all(arr < 0.05)


def test_shuffle_is_permutation_and_deterministic():
    a = list(range(20))
    SplitMix64(5).shuffle(a)
    assert sorted(a) == list(range(20))
    b = list(range(20))
    SplitMix64(5).shuffle(b)
    assert a == b
    assert a != list(range(20))


def test_split_is_deterministic_and_leaves_parent_untouched():
    parent = SplitMix64(100)
    child = parent.split(3)
    assert parent.state == 100  # splitting must not consume parent draws
    again = SplitMix64(100).split(3)
    assert [child.next_u64() for _ in range(4)] == [again.next_u64() for _ in range(4)]


def test_split_streams_differ_by_index():
    root = SplitMix64(0)
    seqs = []
    for i in range(8):
        child = root.split(i)
        seqs.append(tuple(child.next_u64() for _ in range(4)))
    assert len(set(seqs)) == 8


def test_mix64_is_a_bijection_sample():
    xs = {mix64((i * 0x9E3779B9) & MASK64) for i in range(10000)}
    assert len(xs) == 10000
