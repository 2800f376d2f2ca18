"""Counter-based generator: determinism, streams, distributions."""

import numpy as np

from dynssm.rng import CounterRng


class TestDeterminism:
    def test_same_seed_same_stream(self):
        a = CounterRng(42).uniform((100,))
        b = CounterRng(42).uniform((100,))
        assert np.array_equal(a, b)

    def test_counter_advances(self):
        rng = CounterRng(1)
        first = rng.uniform((10,))
        second = rng.uniform((10,))
        assert not np.array_equal(first, second)

    def test_known_first_word_is_splitmix_stream(self):
        # seed 0: key = mix(0); first word = mix(key + GOLDEN)
        rng = CounterRng(0)
        val = rng.uniform((1,))[0]
        again = CounterRng(0).uniform((1,))[0]
        assert val == again
        assert 0.0 <= val < 1.0

    def test_child_streams_independent_and_stable(self):
        root = CounterRng(7)
        c1 = root.child(1).uniform((50,))
        c2 = root.child(2).uniform((50,))
        c1_again = CounterRng(7).child(1).uniform((50,))
        assert np.array_equal(c1, c1_again)
        assert not np.array_equal(c1, c2)

    def test_child_independent_of_parent_counter(self):
        a = CounterRng(3)
        a.uniform((17,))   # advance parent
        child_after = a.child(5).uniform((8,))
        child_fresh = CounterRng(3).child(5).uniform((8,))
        assert np.array_equal(child_after, child_fresh)


class TestDistributions:
    def test_uniform_range_and_mean(self):
        u = CounterRng(11).uniform((200_000,))
        assert u.min() >= 0.0 and u.max() < 1.0
        assert abs(u.mean() - 0.5) < 5e-3

    def test_normal_moments(self):
        z = CounterRng(12).normal((200_000,))
        assert abs(z.mean()) < 1e-2
        assert abs(z.std() - 1.0) < 1e-2

    def test_normal_std_scaling(self):
        z1 = CounterRng(13).normal((100,), std=1.0)
        z2 = CounterRng(13).normal((100,), std=2.5)
        assert np.allclose(z2, 2.5 * z1)

    def test_integers_in_range(self):
        vals = CounterRng(14).integers(3, 9, (10_000,))
        assert vals.min() == 3 and vals.max() == 8

    def test_shuffle_is_permutation(self):
        items = list(range(30))
        out = CounterRng(15).shuffle(items)
        assert sorted(out) == items and out != items
        assert items == list(range(30))   # input untouched

    def test_bernoulli_mask_scaling(self):
        mask = CounterRng(16).bernoulli_mask((100_000,), keep_prob=0.8)
        kept = mask > 0
        assert abs(kept.mean() - 0.8) < 5e-3
        assert np.allclose(mask[kept], 1.0 / 0.8)
